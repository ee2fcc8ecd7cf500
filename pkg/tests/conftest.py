from __future__ import annotations

import numpy as np

from moegeom import ModelConfig, RouterKind, Subspace, thin_svd


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULT_LINES:
            terminalreporter.write_line(line)


def tiny_config(router=None, seed=0, **overrides) -> ModelConfig:
    """Small but structurally complete model config for fast tests."""
    kw = dict(n_layers=1, n_experts=2, d_model=8, d_hidden=12, block_size=6,
              batch_size=2, n_heads=2, vocab_size=11,
              router=router or RouterKind.fully_soft(), seed=seed)
    kw.update(overrides)
    return ModelConfig(**kw)


def random_basis(d: int, n: int, rng: np.random.Generator) -> Subspace:
    u, _, _ = thin_svd(rng.standard_normal((d, n)))
    return Subspace(u[:, :n])


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    u, _, _ = thin_svd(rng.standard_normal((n, n)))
    return u
