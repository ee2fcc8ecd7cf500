"""Export pipeline: run inference with capture hooks, fold per-token
expert Jacobians into running weighted means, and write an MGT1 dump the
analysis toolkit accepts unchanged.

Per-token Jacobians are materialized one token at a time and immediately
folded into the mean, so memory stays at one (d, d) matrix per expert no
matter how many tokens are processed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch.autograd.functional import jacobian as torch_jacobian

from . import __version__, mgt1
from .adapters import LayerTap, load_adapter

DEFAULT_BATCH_TOKENS = 512
DEFAULT_SEQ_LEN = 64


@dataclass
class ExportSpec:
    model: str
    layers: Optional[list[int]] = None     # None = every MoE layer
    corpus: str = ""
    max_tokens: int = 2048
    batch_tokens: int = DEFAULT_BATCH_TOKENS
    seq_len: int = DEFAULT_SEQ_LEN
    dtype: str = "f4"                      # storage dtype for activations
    arch: str = "auto"
    tokenizer: str = "byte"                # "byte" or an HF tokenizer id
    weighting_mode: str = "row-scaled"     # default PCA weighting recorded
    model_name: Optional[str] = None

    def __post_init__(self):
        if self.max_tokens < self.batch_tokens:
            raise ValueError("max_tokens must be at least batch_tokens")
        if self.dtype not in ("f4", "f8"):
            raise ValueError(f"unsupported storage dtype {self.dtype!r}")


@dataclass
class JacobianMean:
    mean: np.ndarray
    total_weight: float = 0.0
    count: int = 0

    def update(self, jac: np.ndarray, weight: float):
        if weight <= 0.0:
            return
        self.total_weight += weight
        self.mean += (weight / self.total_weight) * (jac - self.mean)
        self.count += 1


def _tokenize(spec: ExportSpec, vocab_size: int) -> np.ndarray:
    raw = Path(spec.corpus).read_bytes()
    if spec.tokenizer == "byte":
        ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64) % vocab_size
    else:
        from transformers import AutoTokenizer

        tok = AutoTokenizer.from_pretrained(spec.tokenizer)
        ids = np.asarray(tok(raw.decode("utf-8", errors="replace"))["input_ids"],
                         dtype=np.int64)
    if len(ids) < spec.seq_len:
        raise ValueError(
            f"corpus yields {len(ids)} tokens; need at least {spec.seq_len}"
        )
    return ids


def _batches(ids: np.ndarray, spec: ExportSpec):
    seq = spec.seq_len
    per_batch = max(1, spec.batch_tokens // seq)
    n_windows = min(len(ids) // seq, max(1, spec.max_tokens // seq))
    for start in range(0, n_windows, per_batch):
        stop = min(start + per_batch, n_windows)
        chunk = np.stack([ids[w * seq:(w + 1) * seq] for w in range(start, stop)])
        yield torch.from_numpy(chunk)


def _vocab_size(adapter) -> int:
    if hasattr(adapter, "config") and isinstance(adapter.config, dict):
        return int(adapter.config["vocab_size"])
    return int(adapter.model.config.vocab_size)


def export(spec: ExportSpec, out_path) -> dict:
    """Run the export and write the dump; returns the header written."""
    adapter = load_adapter(spec.model, spec.arch)
    layer_ids = spec.layers if spec.layers is not None else adapter.layer_ids()
    missing = [l for l in layer_ids if l not in adapter.layer_ids()]
    if missing:
        raise ValueError(f"layers {missing} not present; model has {adapter.layer_ids()}")

    ids = _tokenize(spec, _vocab_size(adapter))
    taps = adapter.attach(layer_ids)
    try:
        adapter.run(_batches(ids, spec))
    finally:
        adapter.detach()

    tensors: dict[str, np.ndarray] = {}
    total_weight: dict[str, list[float]] = {}
    sample_count: dict[str, list[int]] = {}
    store = np.float32 if spec.dtype == "f4" else np.float64
    token_count = 0
    for lid in layer_ids:
        tap: LayerTap = taps[lid]
        hidden = tap.hidden_rows()
        routing = tap.routing_rows()
        token_count = hidden.shape[0]
        tensors[f"layer{lid}/hidden"] = hidden.astype(store)
        tensors[f"layer{lid}/routing"] = routing.astype(store)
        stats = _layer_jacobian_means(adapter, lid, hidden, routing)
        total_weight[str(lid)] = [s.total_weight for s in stats]
        sample_count[str(lid)] = [s.count for s in stats]
        for e, s in enumerate(stats):
            tensors[f"layer{lid}/jacobian_mean/{e}"] = s.mean.astype(np.float64)

    corpus_bytes = Path(spec.corpus).read_bytes()
    header = {
        "kind": "capture",
        "layers": [int(l) for l in layer_ids],
        "n_experts": int(adapter.n_experts),
        "d_model": int(adapter.d_model),
        "dtype": spec.dtype,
        "weighting_mode": spec.weighting_mode,
        "jacobian_weighting": "routed",
        "jacobian_total_weight": total_weight,
        "jacobian_sample_count": sample_count,
        "token_count": int(token_count),
        "model_name": spec.model_name or str(spec.model),
        "creator": f"moe-exporter {__version__}",
        "source": str(spec.model),
        "corpus": str(spec.corpus),
        "corpus_sha256": hashlib.sha256(corpus_bytes).hexdigest(),
        "max_tokens": int(spec.max_tokens),
        "batch_tokens": int(spec.batch_tokens),
        "seq_len": int(spec.seq_len),
        "exporter": adapter.describe(),
    }
    mgt1.save(out_path, header, tensors)
    return header


def _layer_jacobian_means(adapter, layer_id: int, hidden: np.ndarray,
                          routing: np.ndarray) -> list[JacobianMean]:
    d = hidden.shape[1]
    stats = [JacobianMean(np.zeros((d, d))) for _ in range(routing.shape[1])]
    for e in range(routing.shape[1]):
        idx = np.flatnonzero(routing[:, e] > 0.0)
        if idx.size == 0:
            continue
        fn = adapter.expert_fn(layer_id, e)
        for i in idx:
            x = torch.from_numpy(hidden[i].astype(np.float64))
            jac = torch_jacobian(fn, x, vectorize=True)
            stats[e].update(jac.numpy(), float(routing[i, e]))
    return stats


def expert_jacobian_at(adapter, layer_id: int, e: int, x: np.ndarray) -> np.ndarray:
    """Exact Jacobian of one expert at one token (for spot checks)."""
    fn = adapter.expert_fn(layer_id, e)
    return torch_jacobian(fn, torch.from_numpy(np.asarray(x, dtype=np.float64)),
                          vectorize=True).numpy()
