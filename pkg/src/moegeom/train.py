"""From-scratch training: exact reverse-mode gradients and Adam.

The backward pass mirrors :meth:`TransformerModel.forward` step for step.
Top-k expert selection is treated as constant during backpropagation;
gradients flow through the renormalized softmax over the selected experts
only, which is exact wherever the selected set is locally stable.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .errors import TrainingDivergedError
from .model import _INV_SQRT_2PI, ModelConfig, TransformerModel

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DEFAULT_LR = 3e-4


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross entropy and its gradient w.r.t. the logits."""
    bsz, tlen, vocab = logits.shape
    n = bsz * tlen
    flat = logits.reshape(n, vocab)
    tflat = targets.reshape(n)
    m = flat.max(axis=1, keepdims=True)
    z = np.exp(flat - m)
    sum_z = z.sum(axis=1, keepdims=True)
    lse = (m + np.log(sum_z)).reshape(n)
    loss = float((lse - flat[np.arange(n), tflat]).mean())
    dflat = z / sum_z
    dflat[np.arange(n), tflat] -= 1.0
    dflat /= n
    return loss, dflat.reshape(bsz, tlen, vocab)


def _ln_backward(dy: np.ndarray, ln_cache, gamma: np.ndarray):
    """Gradients through layer norm: returns (dx, dgamma, dbeta)."""
    xhat, inv_std = ln_cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def loss_and_grads(model: TransformerModel, xb: np.ndarray, yb: np.ndarray):
    """Forward + backward over one batch; returns (loss, grads dict)."""
    cfg = model.config
    p = model.params
    logits, cache = model.forward(xb, want_cache=True)
    loss, dlogits = softmax_cross_entropy(logits, yb)

    bsz, tlen = xb.shape
    n = bsz * tlen
    hdim = cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(hdim)
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    # Tied output projection.
    dflat = dlogits.reshape(n, cfg.vocab_size)
    dh_rows = dflat @ p["tok_emb"]
    grads["tok_emb"] += dflat.T @ cache["h_rows"]

    dx, dg, db = _ln_backward(
        dh_rows.reshape(bsz, tlen, cfg.d_model), cache["lnf"], p["lnf.g"]
    )
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    for i in reversed(range(cfg.n_layers)):
        pre = f"layer{i}."
        lc = cache["layers"][i]
        m = lc["m"]
        gates = lc["g"]

        # MoE block: x_out = x_mid + moe(ln2(x_mid)).
        dy_rows = dx.reshape(n, cfg.d_model)
        dm = np.zeros_like(m)
        dgates = np.zeros_like(gates)
        for e, ec in enumerate(lc["experts"]):
            if ec is None:
                continue
            ep = pre + f"expert{e}."
            idx = slice(None) if ec["idx"] is None else ec["idx"]
            z1 = ec["z1"]
            cdf = ec["cdf"]
            f = ec["f"]
            dyr = dy_rows[idx]
            ge = gates[idx, e][:, None]
            dgates[idx, e] = np.einsum("nd,nd->n", f, dyr)
            df = ge * dyr
            h1 = z1 * cdf  # gelu(z1), from the cached normal CDF
            grads[ep + "w2"] += df.T @ h1
            grads[ep + "b2"] += df.sum(axis=0)
            gp = cdf + z1 * (_INV_SQRT_2PI * np.exp(-0.5 * z1 * z1))
            dz1 = (df @ p[ep + "w2"]) * gp
            grads[ep + "w1"] += dz1.T @ m[idx]
            grads[ep + "b1"] += dz1.sum(axis=0)
            dm[idx] += dz1 @ p[ep + "w1"]
        # Softmax (over the selected set for top-k; rows of gates are zero
        # elsewhere, which zeroes those logit gradients automatically).
        inner = (dgates * gates).sum(axis=1, keepdims=True)
        dlogits_r = gates * (dgates - inner) / cfg.router.temperature
        grads[pre + "router.w"] += dlogits_r.T @ m
        dm += dlogits_r @ p[pre + "router.w"]

        dx_mid_ln, dg, db = _ln_backward(
            dm.reshape(bsz, tlen, cfg.d_model), lc["ln2"], p[pre + "ln2.g"]
        )
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dx = dx + dx_mid_ln

        # Attention block: x_mid = x_in + attn(ln1(x_in)).
        dattn = dx.reshape(n, cfg.d_model)
        grads[pre + "attn.wo"] += dattn.T @ lc["ctx_rows"]
        grads[pre + "attn.bo"] += dattn.sum(axis=0)
        dctx_rows = dattn @ p[pre + "attn.wo"]
        dctx = dctx_rows.reshape(bsz, tlen, cfg.n_heads, hdim).transpose(0, 2, 1, 3)

        att = lc["att"]
        datt = dctx @ lc["v"].transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = dscores @ lc["k"] * scale
        dk = dscores.transpose(0, 1, 3, 2) @ lc["q"] * scale

        dq_rows = dq.transpose(0, 2, 1, 3).reshape(n, cfg.d_model)
        dk_rows = dk.transpose(0, 2, 1, 3).reshape(n, cfg.d_model)
        dv_rows = dv.transpose(0, 2, 1, 3).reshape(n, cfg.d_model)
        a = lc["a"]
        grads[pre + "attn.wq"] += dq_rows.T @ a
        grads[pre + "attn.bq"] += dq_rows.sum(axis=0)
        grads[pre + "attn.wk"] += dk_rows.T @ a
        grads[pre + "attn.bk"] += dk_rows.sum(axis=0)
        grads[pre + "attn.wv"] += dv_rows.T @ a
        grads[pre + "attn.bv"] += dv_rows.sum(axis=0)
        da = dq_rows @ p[pre + "attn.wq"] + dk_rows @ p[pre + "attn.wk"] \
            + dv_rows @ p[pre + "attn.wv"]

        dx_in_ln, dg, db = _ln_backward(
            da.reshape(bsz, tlen, cfg.d_model), lc["ln1"], p[pre + "ln1.g"]
        )
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        dx = dx + dx_in_ln

    np.add.at(grads["tok_emb"], cache["tokens"].reshape(-1),
              dx.reshape(n, cfg.d_model))
    grads["pos_emb"][:tlen] += dx.sum(axis=0)
    return loss, grads


class Adam:
    """Adam with bias correction; state keyed like the parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = DEFAULT_LR,
                 betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sample_batch(rng: np.random.Generator, data: np.ndarray, batch_size: int,
                 block_size: int):
    """One batch of (input, next-token target) windows from a byte corpus."""
    starts = rng.integers(0, len(data) - block_size, size=batch_size)
    xb = np.stack([data[s:s + block_size] for s in starts]).astype(np.int64)
    yb = np.stack([data[s + 1:s + block_size + 1] for s in starts]).astype(np.int64)
    return xb, yb


def train(config: ModelConfig, corpus, steps: int, lr: float = DEFAULT_LR,
          on_step: Optional[Callable[[int, float], None]] = None):
    """Train a fresh model on a byte corpus; returns (model, loss trace).

    Initialization and batch order are fully determined by ``config.seed``,
    so two runs with the same config and corpus produce identical traces.
    """
    data = np.frombuffer(bytes(corpus), dtype=np.uint8) if isinstance(
        corpus, (bytes, bytearray)) else np.asarray(corpus, dtype=np.uint8)
    if len(data) < config.block_size + 1:
        raise ValueError(
            f"corpus has {len(data)} bytes; need at least block_size+1 = "
            f"{config.block_size + 1}"
        )
    model = TransformerModel(config)
    adam = Adam(model.params, lr=lr)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(1,))
    )
    losses = np.empty(steps)
    for step in range(steps):
        xb, yb = sample_batch(rng, data, config.batch_size, config.block_size)
        loss, grads = loss_and_grads(model, xb, yb)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        adam.step(model.params, grads)
        losses[step] = loss
        if on_step is not None:
            on_step(step, loss)
    return model, losses
