"""Small MoE transformer with configurable routing and exact expert Jacobians.

Three pre-norm blocks (causal multi-head attention followed by an 8-expert
MoE feedforward), learned positional embeddings, and a tied output
projection. All arithmetic is float64 numpy; forwards are deterministic
functions of the parameters, and every differentiable piece has a matching
hand-written backward in :mod:`moegeom.train`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import erf

from .errors import BoundsError, ShapeError

LN_EPS = 1e-5
INIT_STD = 0.02

TOP_K = "top_k"
FULLY_SOFT = "fully_soft"

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class RouterKind:
    """Routing rule: sparse top-k with renormalized softmax weights, or a
    full softmax over all experts."""

    kind: str
    k: Optional[int] = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in (TOP_K, FULLY_SOFT):
            raise ValueError(f"unknown router kind {self.kind!r}")
        if self.kind == TOP_K and (self.k is None or self.k < 1):
            raise ValueError("top_k routing requires k >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def top_k(cls, k: int, temperature: float = 1.0) -> "RouterKind":
        return cls(kind=TOP_K, k=k, temperature=temperature)

    @classmethod
    def fully_soft(cls, temperature: float = 1.0) -> "RouterKind":
        return cls(kind=FULLY_SOFT, temperature=temperature)

    @classmethod
    def parse(cls, text: str) -> "RouterKind":
        """Parse a CLI-style router spec: ``topk:K`` or ``soft``."""
        t = text.strip().lower()
        if t == "soft":
            return cls.fully_soft()
        if t.startswith("topk:"):
            return cls.top_k(int(t.split(":", 1)[1]))
        raise ValueError(f"cannot parse router spec {text!r} (expected topk:K or soft)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "RouterKind":
        return cls(kind=d["kind"], k=d.get("k"), temperature=d.get("temperature", 1.0))

    def label(self) -> str:
        return f"topk:{self.k}" if self.kind == TOP_K else "soft"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    n_experts: int = 8
    d_model: int = 128
    d_hidden: int = 256
    block_size: int = 64
    batch_size: int = 32
    n_heads: int = 4
    vocab_size: int = 256
    router: RouterKind = field(default_factory=lambda: RouterKind.top_k(2))
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.router.kind == TOP_K and self.router.k > self.n_experts:
            raise ValueError("router k exceeds expert count")
        for name in ("n_layers", "n_experts", "d_model", "d_hidden", "block_size",
                     "batch_size", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def with_router(self, router: RouterKind) -> "ModelConfig":
        return replace(self, router=router)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "d_model": self.d_model,
            "d_hidden": self.d_hidden,
            "block_size": self.block_size,
            "batch_size": self.batch_size,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "router": self.router.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["router"] = RouterKind.from_dict(d["router"])
        return cls(**d)


@dataclass
class ExpertMlp:
    """Two-layer GELU MLP: ``w2 @ gelu(w1 @ x + b1) + b2``."""

    w1: np.ndarray  # (d_hidden, d_model)
    b1: np.ndarray  # (d_hidden,)
    w2: np.ndarray  # (d_model, d_hidden)
    b2: np.ndarray  # (d_model,)


@dataclass
class MoeLayer:
    router_w: np.ndarray  # (n_experts, d_model)
    experts: list[ExpertMlp]
    kind: RouterKind


def _norm_cdf(x):
    return 0.5 * (1.0 + erf(x / _SQRT2))


def _norm_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x):
    """Exact-erf GELU: x * Phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * _norm_cdf(x)


def gelu_prime(x):
    """Derivative of exact-erf GELU: Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return _norm_cdf(x) + x * _norm_pdf(x)


def route(logits, kind: RouterKind) -> np.ndarray:
    """Routing weights for one logit vector or a stack of logit rows.

    Top-k keeps the k largest logits (ties broken toward the lower expert
    index) and applies a softmax over the kept entries; fully-soft applies
    the softmax over all experts. Logits are divided by the temperature
    first. Rows of the result are nonnegative and sum to 1.
    """
    arr = np.asarray(logits, dtype=np.float64)
    single = arr.ndim == 1
    rows = arr[None, :] if single else arr
    if rows.ndim != 2:
        raise ShapeError(f"logits must be 1-D or 2-D, got shape {arr.shape}")
    rows = rows / kind.temperature
    if kind.kind == FULLY_SOFT:
        shifted = rows - rows.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        g = e / e.sum(axis=1, keepdims=True)
    else:
        k = kind.k
        if k > rows.shape[1]:
            raise ShapeError(f"k={k} exceeds expert count {rows.shape[1]}")
        # Stable argsort of the negated logits: ties keep ascending index.
        order = np.argsort(-rows, axis=1, kind="stable")
        sel = order[:, :k]
        sel_logits = np.take_along_axis(rows, sel, axis=1)
        shifted = sel_logits - sel_logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        w = e / e.sum(axis=1, keepdims=True)
        g = np.zeros_like(rows)
        np.put_along_axis(g, sel, w, axis=1)
    return g[0] if single else g


def expert_forward(expert: ExpertMlp, x) -> np.ndarray:
    """Evaluate the expert MLP on a vector or on rows of a matrix."""
    x = np.asarray(x, dtype=np.float64)
    h = gelu(x @ expert.w1.T + expert.b1)
    return h @ expert.w2.T + expert.b2


def expert_jacobian(expert: ExpertMlp, x) -> np.ndarray:
    """Exact Jacobian of ``expert_forward`` at ``x``:
    ``w2 @ diag(gelu'(w1 @ x + b1)) @ w1``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    a = gelu_prime(expert.w1 @ x + expert.b1)
    return (expert.w2 * a) @ expert.w1


def moe_forward(layer: MoeLayer, x):
    """One MoE layer applied to a single vector: ``y = sum_e g_e f_e(x)``.

    Experts with zero routing weight are skipped; skipping cannot change
    the result because their contribution is exactly zero.
    """
    x = np.asarray(x, dtype=np.float64)
    logits = layer.router_w @ x
    g = route(logits, layer.kind)
    y = np.zeros_like(x)
    for e, weight in enumerate(g):
        if weight > 0.0:
            y += weight * expert_forward(layer.experts[e], x)
    return y, g


class CaptureBuffer:
    """Per-layer record of MoE inputs and routing weights from forwards.

    ``hidden(layer)`` returns the rows actually fed to the router and
    experts (the post-norm hidden states); ``routing(layer)`` the matching
    routing weight rows. When ``store_jacobians`` is set, per-token expert
    Jacobians at routed rows are kept as well (small runs only).
    """

    def __init__(self, store_jacobians: bool = False):
        self.store_jacobians = store_jacobians
        self._hidden: dict[int, list[np.ndarray]] = {}
        self._routing: dict[int, list[np.ndarray]] = {}
        self._jacobians: dict[int, list[dict[int, tuple[np.ndarray, np.ndarray]]]] = {}

    def append(self, layer: int, hidden: np.ndarray, routing: np.ndarray,
               jacobians=None):
        if hidden.shape[0] != routing.shape[0]:
            raise ShapeError("hidden and routing row counts disagree")
        self._hidden.setdefault(layer, []).append(hidden)
        self._routing.setdefault(layer, []).append(routing)
        if jacobians is not None:
            self._jacobians.setdefault(layer, []).append(jacobians)

    def layer_ids(self) -> list[int]:
        return sorted(self._hidden)

    def hidden(self, layer: int) -> np.ndarray:
        return np.concatenate(self._hidden[layer], axis=0)

    def routing(self, layer: int) -> np.ndarray:
        return np.concatenate(self._routing[layer], axis=0)

    def jacobians(self, layer: int) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Per-expert (row indices, stacked Jacobians) for a layer."""
        chunks = self._jacobians.get(layer, [])
        merged: dict[int, tuple[list, list]] = {}
        offset = 0
        for chunk, hid in zip(chunks, self._hidden[layer]):
            for e, (idx, jacs) in chunk.items():
                acc = merged.setdefault(e, ([], []))
                acc[0].append(idx + offset)
                acc[1].append(jacs)
            offset += hid.shape[0]
        return {
            e: (np.concatenate(idx), np.concatenate(jacs))
            for e, (idx, jacs) in merged.items()
        }


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded parameter initialization.

    Weights are normal with std 0.02; the projections that write into the
    residual stream (attention output and expert second layer) are scaled
    down by sqrt(2 * n_layers). Draw order is fixed so a seed pins every
    parameter regardless of router kind.
    """
    rng = np.random.default_rng(config.seed)
    d, h, e_cnt = config.d_model, config.d_hidden, config.n_experts
    resid_std = INIT_STD / math.sqrt(2.0 * config.n_layers)
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = rng.normal(0.0, INIT_STD, (config.vocab_size, d))
    p["pos_emb"] = rng.normal(0.0, INIT_STD, (config.block_size, d))
    for i in range(config.n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v"):
            p[pre + f"attn.w{name}"] = rng.normal(0.0, INIT_STD, (d, d))
            p[pre + f"attn.b{name}"] = np.zeros(d)
        p[pre + "attn.wo"] = rng.normal(0.0, resid_std, (d, d))
        p[pre + "attn.bo"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "router.w"] = rng.normal(0.0, INIT_STD, (e_cnt, d))
        for e in range(e_cnt):
            ep = pre + f"expert{e}."
            p[ep + "w1"] = rng.normal(0.0, INIT_STD, (h, d))
            p[ep + "b1"] = np.zeros(h)
            p[ep + "w2"] = rng.normal(0.0, resid_std, (d, h))
            p[ep + "b2"] = np.zeros(d)
    p["lnf.g"] = np.ones(d)
    p["lnf.b"] = np.zeros(d)
    return p


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv_std
    return xhat * g + b, (xhat, inv_std)


def _softmax_lastdim(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class TransformerModel:
    """Byte-level MoE transformer language model."""

    def __init__(self, config: ModelConfig, params: Optional[dict[str, np.ndarray]] = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def expert(self, layer: int, e: int) -> ExpertMlp:
        pre = f"layer{layer}.expert{e}."
        p = self.params
        return ExpertMlp(p[pre + "w1"], p[pre + "b1"], p[pre + "w2"], p[pre + "b2"])

    def moe_layer(self, layer: int) -> MoeLayer:
        return MoeLayer(
            router_w=self.params[f"layer{layer}.router.w"],
            experts=[self.expert(layer, e) for e in range(self.config.n_experts)],
            kind=self.config.router,
        )

    def _check_tokens(self, tokens: np.ndarray):
        if tokens.ndim != 2:
            raise ShapeError(f"expected a (batch, time) token array, got {tokens.shape}")
        if tokens.shape[1] > self.config.block_size:
            raise BoundsError(
                f"sequence length {tokens.shape[1]} exceeds block size {self.config.block_size}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise BoundsError("token id outside vocabulary")

    def forward(self, tokens: np.ndarray, capture: Optional[CaptureBuffer] = None,
                want_cache: bool = False):
        """Logits of shape (batch, time, vocab); optionally also the
        intermediate cache consumed by the backward pass."""
        cfg = self.config
        p = self.params
        tokens = np.asarray(tokens)
        self._check_tokens(tokens)
        bsz, tlen = tokens.shape
        n = bsz * tlen
        hdim = cfg.d_model // cfg.n_heads
        scale = 1.0 / math.sqrt(hdim)
        mask = np.triu(np.full((tlen, tlen), -np.inf), k=1)

        x = p["tok_emb"][tokens] + p["pos_emb"][:tlen]
        cache = {"tokens": tokens, "layers": []} if want_cache else None

        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            lc = {} if want_cache else None
            if want_cache:
                lc["x_in"] = x

            a_full, ln1c = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            a = a_full.reshape(n, cfg.d_model)
            q = (a @ p[pre + "attn.wq"].T + p[pre + "attn.bq"])
            k = (a @ p[pre + "attn.wk"].T + p[pre + "attn.bk"])
            v = (a @ p[pre + "attn.wv"].T + p[pre + "attn.bv"])
            q = q.reshape(bsz, tlen, cfg.n_heads, hdim).transpose(0, 2, 1, 3)
            k = k.reshape(bsz, tlen, cfg.n_heads, hdim).transpose(0, 2, 1, 3)
            v = v.reshape(bsz, tlen, cfg.n_heads, hdim).transpose(0, 2, 1, 3)
            scores = q @ k.transpose(0, 1, 3, 2) * scale + mask
            att = _softmax_lastdim(scores)
            ctx = att @ v
            ctx_rows = ctx.transpose(0, 2, 1, 3).reshape(n, cfg.d_model)
            attn_out = ctx_rows @ p[pre + "attn.wo"].T + p[pre + "attn.bo"]
            x = x + attn_out.reshape(bsz, tlen, cfg.d_model)

            if want_cache:
                lc.update(ln1=ln1c, a=a, q=q, k=k, v=v, att=att, ctx_rows=ctx_rows,
                          x_mid=x)

            m_full, ln2c = _layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            m = m_full.reshape(n, cfg.d_model)
            y, gates, expert_caches = self._moe_rows(i, m, want_cache)
            x = x + y.reshape(bsz, tlen, cfg.d_model)

            if want_cache:
                lc.update(ln2=ln2c, m=m, g=gates, experts=expert_caches)
            if capture is not None:
                jacs = None
                if capture.store_jacobians:
                    jacs = self._routed_jacobians(i, m, gates)
                capture.append(i, m.copy(), gates.copy(), jacs)
            if want_cache:
                cache["layers"].append(lc)

        hf, lnfc = _layer_norm(x, p["lnf.g"], p["lnf.b"])
        h_rows = hf.reshape(n, cfg.d_model)
        logits = (h_rows @ p["tok_emb"].T).reshape(bsz, tlen, cfg.vocab_size)
        if want_cache:
            cache.update(x_f=x, lnf=lnfc, h_rows=h_rows)
            return logits, cache
        return logits

    def _moe_rows(self, layer: int, m: np.ndarray, want_cache: bool):
        """MoE feedforward over token rows; returns mixed output, gates,
        and per-expert caches (row indices, pre-activations, outputs)."""
        cfg = self.config
        p = self.params
        pre = f"layer{layer}."
        logits = m @ p[pre + "router.w"].T
        gates = route(logits, cfg.router)
        y = np.zeros_like(m)
        caches = []
        for e in range(cfg.n_experts):
            idx = np.flatnonzero(gates[:, e] > 0.0)
            if idx.size == 0:
                caches.append(None)
                continue
            ep = pre + f"expert{e}."
            # An expert fed every token (fully-soft routing) skips the
            # gather/scatter; idx=None marks that in the cache.
            full = idx.size == m.shape[0]
            rows = m if full else m[idx]
            z1 = rows @ p[ep + "w1"].T + p[ep + "b1"]
            cdf = _norm_cdf(z1)
            f = (z1 * cdf) @ p[ep + "w2"].T + p[ep + "b2"]
            if full:
                y += gates[:, e][:, None] * f
            else:
                y[idx] += gates[idx, e][:, None] * f
            if want_cache:
                caches.append({"idx": None if full else idx, "z1": z1,
                               "cdf": cdf, "f": f})
            else:
                caches.append(None)
        return y, gates, caches

    def _routed_jacobians(self, layer: int, m: np.ndarray, gates: np.ndarray):
        out = {}
        for e in range(self.config.n_experts):
            idx = np.flatnonzero(gates[:, e] > 0.0)
            if idx.size == 0:
                continue
            mlp = self.expert(layer, e)
            jacs = np.stack([expert_jacobian(mlp, m[i]) for i in idx])
            out[e] = (idx, jacs)
        return out


def model_forward(model: TransformerModel, tokens, capture: Optional[CaptureBuffer] = None):
    """Logits for a single token sequence, shape (len(tokens), vocab)."""
    t = np.asarray(tokens)
    if t.ndim != 1:
        raise ShapeError(f"expected a 1-D token sequence, got shape {t.shape}")
    return model.forward(t[None, :], capture=capture)[0]


def run_capture(model: TransformerModel, data: np.ndarray, max_tokens: int = 4096,
                batch_size: Optional[int] = None,
                store_jacobians: bool = False) -> CaptureBuffer:
    """Deterministic evaluation pass over a byte corpus.

    Consecutive non-overlapping windows of ``block_size`` tokens are fed
    batch by batch until ``max_tokens`` tokens have been captured. No
    randomness is involved, so the same model and corpus always produce
    the same buffer.
    """
    cfg = model.config
    data = np.asarray(data)
    if data.dtype != np.uint8:
        data = data.astype(np.uint8)
    t = cfg.block_size
    n_windows = min(len(data) // t, max(1, max_tokens // t))
    if n_windows == 0:
        raise ValueError(f"corpus of {len(data)} bytes is shorter than one block ({t})")
    bsz = batch_size or cfg.batch_size
    capture = CaptureBuffer(store_jacobians=store_jacobians)
    for start in range(0, n_windows, bsz):
        stop = min(start + bsz, n_windows)
        batch = np.stack([data[w * t:(w + 1) * t] for w in range(start, stop)])
        model.forward(batch.astype(np.int64), capture=capture)
    return capture
