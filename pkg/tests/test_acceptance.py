"""Acceptance suite: one test per criterion, each printing a PASS line
with the measured values once its assertions hold.

The controlled-routing runs (criteria 4 and 5) train six models from
scratch and dominate the runtime; everything is seeded and deterministic.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

from conftest import random_basis, random_orthogonal, tiny_config
from moegeom import (
    ExpertMlp,
    ModelConfig,
    RouterKind,
    TransformerModel,
    expert_forward,
    expert_jacobian,
    grassmann_distance,
    grassmann_max,
    moe_forward,
    route,
    weighted_pca,
)
from moegeom.interchange import (
    capture_dump_container,
    checkpoint_container,
    read_dump,
    report_to_dict,
    write_dump,
    write_report,
)
from moegeom.model import MoeLayer
from moegeom.pipeline import (
    DumpActivationSource,
    ModelActivationSource,
    analyze_source,
)
from moegeom.textgen import make_corpus
from moegeom.train import train

# Step budget for the controlled top-k vs fully-soft contrast. Chosen to
# fit the runtime budget with margin; the geometric contrast is present
# from early training and the fully-soft subspace collapse is strongest
# in this regime.
CONTRAST_STEPS = 150
CONTRAST_SEEDS = (0, 1, 2)
CAPTURE_TOKENS = 4096

RESULT_LINES: list[str] = []


def _announce(line: str):
    # echoed again in the terminal summary, where capture can't hide it
    RESULT_LINES.append(line)
    print(line)


# --- criterion 1: Grassmann metric suite -------------------------------------

def test_criterion_1_grassmann_metric_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n_pairs = 1000
    d, n = 64, 5
    gmax = grassmann_max(n)
    worst_self = worst_sym = worst_rot = 0.0
    for _ in range(n_pairs):
        q1 = random_basis(d, n, rng)
        q2 = random_basis(d, n, rng)
        d12 = grassmann_distance(q1, q2)
        assert 0.0 <= d12 <= gmax + 1e-12
        worst_self = max(worst_self, grassmann_distance(q1, q1))
        worst_sym = max(worst_sym, abs(d12 - grassmann_distance(q2, q1)))
        r = random_orthogonal(n, rng)
        from moegeom import Subspace
        worst_rot = max(worst_rot,
                        abs(grassmann_distance(Subspace(q1.basis @ r), q2) - d12))
    elapsed = time.perf_counter() - start
    assert gmax == pytest.approx(3.5124, abs=1e-3)
    assert worst_self <= 1e-10
    assert worst_sym <= 1e-12
    assert worst_rot <= 1e-9
    assert elapsed < 10.0
    _announce(f"[acceptance] criterion 1: PASS - 1000 pairs in {elapsed:.1f}s; "
              f"d(Q,Q) max {worst_self:.1e}, symmetry {worst_sym:.1e}, "
              f"rotation invariance {worst_rot:.1e}")


# --- criterion 2: Jacobian oracle ---------------------------------------------

def test_criterion_2_jacobian_finite_difference_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    d_model, d_hidden = 128, 256
    worst = 0.0
    for _ in range(100):
        expert = ExpertMlp(
            w1=rng.standard_normal((d_hidden, d_model)) * 0.1,
            b1=rng.standard_normal(d_hidden) * 0.05,
            w2=rng.standard_normal((d_model, d_hidden)) * 0.1,
            b2=rng.standard_normal(d_model) * 0.05,
        )
        x = rng.standard_normal(d_model)
        analytic = expert_jacobian(expert, x)
        fd = np.zeros_like(analytic)
        for j in range(d_model):
            h = 1e-6 * (1.0 + abs(x[j]))
            xp = x.copy(); xp[j] += h
            xm = x.copy(); xm[j] -= h
            fd[:, j] = (expert_forward(expert, xp) - expert_forward(expert, xm)) / (2 * h)
        rel = np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-12)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    assert worst <= 1e-4
    assert elapsed < 30.0
    _announce(f"[acceptance] criterion 2: PASS - 100 experts in {elapsed:.1f}s; "
              f"max relative error {worst:.2e}")


# --- criterion 3: PCA oracle equivalence ---------------------------------------

def test_criterion_3_pca_path_equivalence():
    rng = np.random.default_rng(11)
    worst_ev = worst_sub = 0.0
    checked = 0
    while checked < 50:
        n = int(rng.integers(12, 64))
        d = int(rng.integers(6, 20))
        x = rng.standard_normal((n, d)) * rng.uniform(0.3, 4.0, size=d)
        w = rng.random(n)
        w[rng.random(n) < 0.25] = 0.0
        mode = ["row-scaled", "sample-weighted"][checked % 2]
        k = min(5, d)
        if np.count_nonzero(w) <= k:
            continue
        a = weighted_pca(x, w, k, mode=mode, method="covariance")
        b = weighted_pca(x, w, k, mode=mode, method="svd")
        scale = max(a.eigenvalues[0], 1.0)
        worst_ev = max(worst_ev, np.abs(a.eigenvalues - b.eigenvalues).max() / scale)
        worst_sub = max(worst_sub, grassmann_distance(a.subspace, b.subspace))
        checked += 1
    assert worst_ev <= 1e-8
    assert worst_sub <= 1e-6
    _announce(f"[acceptance] criterion 3: PASS - 50 datasets; eigenvalue "
              f"mismatch {worst_ev:.2e}, subspace distance {worst_sub:.2e}")


# --- criteria 4 and 5: controlled routing contrast ------------------------------

def _pooled_offdiag(reports, field):
    vals = []
    for r in reports:
        matrix = getattr(r, field)
        ids = r.jacobian_experts if field == "jacobian_similarity" else r.grassmann_experts
        vals.extend(matrix[np.triu_indices(len(ids), k=1)])
    return np.asarray(vals)


@pytest.fixture(scope="module")
def controlled_runs():
    corpus = make_corpus(120_000, seed=42)
    assert len(corpus) >= 100_000
    runs = {}
    start = time.perf_counter()
    for seed in CONTRAST_SEEDS:
        for label, router in (("topk", RouterKind.top_k(2)),
                              ("soft", RouterKind.fully_soft())):
            config = ModelConfig(router=router, seed=seed)
            model, losses = train(config, corpus, CONTRAST_STEPS)
            assert losses[-1] < losses[0]
            source = ModelActivationSource(model, corpus, max_tokens=CAPTURE_TOKENS)
            runs[(label, seed)] = analyze_source(source)
    return runs, time.perf_counter() - start


def test_criterion_4_routing_contrast(controlled_runs):
    runs, elapsed = controlled_runs
    ratios = []
    for seed in CONTRAST_SEEDS:
        g_topk = _pooled_offdiag(runs[("topk", seed)], "grassmann").mean()
        g_soft = _pooled_offdiag(runs[("soft", seed)], "grassmann").mean()
        ratios.append(g_topk / g_soft)
        assert g_topk >= 2.0 * g_soft, (
            f"seed {seed}: top-k grassmann mean {g_topk:.3f} is below twice "
            f"the fully-soft mean {g_soft:.3f}"
        )
    assert elapsed < 45 * 60.0
    _announce(f"[acceptance] criterion 4: PASS - grassmann ratios "
              f"{[f'{r:.2f}' for r in ratios]} (threshold 2.0) across "
              f"{len(CONTRAST_SEEDS)} seeds, {CONTRAST_STEPS} steps each, "
              f"{elapsed / 60:.1f} min total")


def test_compare_cli_flags_topk_as_sharper(controlled_runs, tmp_path):
    # End-to-end: report files from the controlled runs through cmd_compare.
    from moegeom.cli import main

    runs, _ = controlled_runs
    a_path = tmp_path / "topk.json"
    b_path = tmp_path / "soft.json"
    write_report(runs[("topk", 0)], a_path)
    write_report(runs[("soft", 0)], b_path)
    out = tmp_path / "cmp.json"
    assert main(["compare", "--a", str(a_path), "--b", str(b_path),
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    for layer in doc["layers"]:
        assert layer["delta"]["grassmann_offdiag_mean"] > 0.0
        assert layer["sharper_separation"] == "a"


def test_criterion_5_functional_decorrelation(controlled_runs):
    runs, _ = controlled_runs
    topk_means = []
    soft_peaks = 0
    peak_values = []
    for seed in CONTRAST_SEEDS:
        topk_vals = _pooled_offdiag(runs[("topk", seed)], "jacobian_similarity")
        soft_vals = _pooled_offdiag(runs[("soft", seed)], "jacobian_similarity")
        topk_means.append(abs(topk_vals.mean()))
        assert abs(topk_vals.mean()) <= 0.2, (
            f"seed {seed}: top-k |mean| {abs(topk_vals.mean()):.3f} > 0.2"
        )
        peak_values.append(soft_vals.max())
        if soft_vals.max() > 0.5:
            soft_peaks += 1
    assert soft_peaks >= 2, (
        f"fully-soft high-alignment peaks in only {soft_peaks}/3 seeds "
        f"(pair maxima {peak_values})"
    )
    _announce(f"[acceptance] criterion 5: PASS - top-k |mean| "
              f"{[f'{m:.3f}' for m in topk_means]} (<= 0.2); fully-soft pair "
              f"maxima {[f'{p:.3f}' for p in peak_values]} with {soft_peaks}/3 "
              f"seeds above 0.5")


# --- criterion 6: interchange round-trips ----------------------------------------

def test_criterion_6_interchange_round_trips(tmp_path):
    config = tiny_config(router=RouterKind.top_k(2), n_experts=4, d_model=16,
                         d_hidden=24, block_size=16, batch_size=4,
                         vocab_size=256, seed=33)
    corpus = make_corpus(8_000, seed=34)
    model, _ = train(config, corpus, 4)

    ckpt = read_dump(write_dump(checkpoint_container(model)))
    for name, tensor in model.params.items():
        assert ckpt.tensors[f"param/{name}"].tobytes() == tensor.tobytes()

    source = ModelActivationSource(model, corpus, max_tokens=64)
    dump_bytes = write_dump(capture_dump_container(source, dtype="f8"))
    container = read_dump(dump_bytes)
    assert write_dump(container) == dump_bytes

    live_reports = analyze_source(source, n_components=2)
    dump_reports = analyze_source(DumpActivationSource(container), n_components=2)

    json_path = tmp_path / "report.json"
    write_report(live_reports, json_path)
    from moegeom import read_report
    parsed = read_report(json_path)
    assert [report_to_dict(r) for r in parsed] == [report_to_dict(r) for r in live_reports]

    def measurement(report):
        d = report_to_dict(report)
        d.pop("provenance")  # source naming legitimately differs
        return d

    for live, dumped in zip(live_reports, dump_reports):
        assert json.dumps(measurement(live), sort_keys=True) == \
            json.dumps(measurement(dumped), sort_keys=True)
        assert np.array_equal(live.grassmann, dumped.grassmann)
        assert np.array_equal(live.jacobian_similarity, dumped.jacobian_similarity)
    _announce("[acceptance] criterion 6: PASS - dump/checkpoint/report "
              "round-trips bit-exact; dump-then-analyze equals live analysis")


# --- criterion 7: routing invariants ----------------------------------------------

def test_criterion_7_sparse_dense_equivalence_and_simplex():
    rng = np.random.default_rng(99)
    n_rout = 10_000
    e_cnt, d, hid = 8, 12, 16
    layer = MoeLayer(
        router_w=rng.standard_normal((e_cnt, d)),
        experts=[ExpertMlp(
            w1=rng.standard_normal((hid, d)) * 0.3,
            b1=rng.standard_normal(hid) * 0.1,
            w2=rng.standard_normal((d, hid)) * 0.3,
            b2=rng.standard_normal(d) * 0.1,
        ) for _ in range(e_cnt)],
        kind=RouterKind.top_k(2),
    )
    ks = rng.choice([1, 2, 4, 8], size=n_rout)
    logits = rng.standard_normal((n_rout, e_cnt)) * 3.0
    worst_sum = 0.0
    worst_equiv = 0.0
    for i in range(n_rout):
        kind = RouterKind.top_k(int(ks[i]))
        g = route(logits[i], kind)
        assert (g >= 0.0).all()
        worst_sum = max(worst_sum, abs(g.sum() - 1.0))
        assert np.count_nonzero(g) == ks[i]
        if i % 10 == 0:
            x = rng.standard_normal(d)
            layer.kind = kind
            y, gates = moe_forward(layer, x)
            dense = np.zeros(d)
            for e in range(e_cnt):
                dense += gates[e] * expert_forward(layer.experts[e], x)
            worst_equiv = max(worst_equiv, np.abs(y - dense).max())
    assert worst_sum <= 1e-9
    assert worst_equiv <= 1e-12
    _announce(f"[acceptance] criterion 7: PASS - {n_rout} routings; "
              f"simplex defect {worst_sum:.1e}, sparse/dense gap {worst_equiv:.1e}")
