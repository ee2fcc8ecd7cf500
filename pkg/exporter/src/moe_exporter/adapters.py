"""Model adapters: locate MoE layers, capture their inputs and routing
weights, and expose each expert as a differentiable map.

Two families are supported. Hugging Face sparse-MoE decoders
(Mixtral-style and Qwen2-MoE-style blocks, which share a
``gate``/``experts`` layout with fused 3-D expert parameters), and MGT1
checkpoints of the controlled toolkit model, which are rebuilt here as an
equivalent torch module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import mgt1


class UnsupportedArchitectureError(RuntimeError):
    """No recognizable MoE router in the loaded checkpoint."""


@dataclass
class LayerTap:
    """Capture buffers for one MoE layer."""

    hidden: list = field(default_factory=list)     # (n, d) chunks
    routing: list = field(default_factory=list)    # (n, E) chunks

    def hidden_rows(self) -> np.ndarray:
        return np.concatenate(self.hidden, axis=0)

    def routing_rows(self) -> np.ndarray:
        return np.concatenate(self.routing, axis=0)


class HfSparseMoeAdapter:
    """Adapter for decoder models whose MoE blocks expose a ``gate``
    router and an ``experts`` module with fused ``gate_up_proj`` /
    ``down_proj`` parameters (Mixtral, Qwen2-MoE)."""

    def __init__(self, model):
        self.model = model
        self.blocks = {}
        for name, module in model.named_modules():
            gate = getattr(module, "gate", None)
            experts = getattr(module, "experts", None)
            if gate is None or experts is None:
                continue
            if not hasattr(experts, "gate_up_proj") or not hasattr(experts, "down_proj"):
                continue
            layer_id = self._layer_index(name)
            self.blocks[layer_id] = module
        if not self.blocks:
            raise UnsupportedArchitectureError(
                "no MoE blocks with a gate router and fused experts found"
            )
        first = next(iter(self.blocks.values()))
        self.n_experts = first.experts.gate_up_proj.shape[0]
        self.d_model = first.experts.gate_up_proj.shape[2]

    @staticmethod
    def _layer_index(module_name: str) -> int:
        for part in module_name.split("."):
            if part.isdigit():
                return int(part)
        raise UnsupportedArchitectureError(
            f"cannot infer layer index from module {module_name!r}"
        )

    def layer_ids(self) -> list[int]:
        return sorted(self.blocks)

    def attach(self, layer_ids) -> dict[int, LayerTap]:
        taps = {lid: LayerTap() for lid in layer_ids}
        self._handles = []
        for lid in layer_ids:
            block = self.blocks[lid]
            tap = taps[lid]

            def hook(module, args, output, tap=tap):
                x = args[0].detach()
                rows = x.reshape(-1, x.shape[-1])
                tap.hidden.append(rows.to(torch.float64).cpu().numpy())
                _, weights, indices = module.gate(rows)
                dense = torch.zeros(rows.shape[0], self.n_experts,
                                    dtype=torch.float64)
                dense.scatter_(1, indices.to(torch.int64),
                               weights.to(torch.float64))
                tap.routing.append(dense.cpu().numpy())

            self._handles.append(block.register_forward_hook(hook))
        return taps

    def detach(self):
        for h in getattr(self, "_handles", []):
            h.remove()
        self._handles = []

    def run(self, token_batches):
        with torch.no_grad():
            for batch in token_batches:
                self.model(batch)

    def expert_fn(self, layer_id: int, e: int) -> Callable:
        """The expert's feedforward map as a float64 function of one
        token vector (SwiGLU with fused projections)."""
        experts = self.blocks[layer_id].experts
        gate_up = experts.gate_up_proj[e].detach().to(torch.float64)
        down = experts.down_proj[e].detach().to(torch.float64)

        def fn(x: torch.Tensor) -> torch.Tensor:
            gate, up = F.linear(x, gate_up).chunk(2, dim=-1)
            return F.linear(F.silu(gate) * up, down)

        return fn

    def describe(self) -> dict:
        return {
            "adapter": "hf-sparse-moe",
            "model_type": type(self.model).__name__,
            "n_experts": int(self.n_experts),
            "d_model": int(self.d_model),
        }


# --- controlled-toolkit checkpoints ----------------------------------------


class _ControlledModel(torch.nn.Module):
    """Float64 torch rebuild of the controlled MoE transformer checkpoint:
    pre-norm causal attention and MoE feedforward with erf-GELU experts,
    learned positions, tied output head."""

    def __init__(self, config: dict, params: dict[str, np.ndarray]):
        super().__init__()
        self.cfg = config
        self.p = {k: torch.from_numpy(np.asarray(v, dtype=np.float64))
                  for k, v in params.items()}

    def route(self, logits: torch.Tensor) -> torch.Tensor:
        router = self.cfg["router"]
        logits = logits / router.get("temperature", 1.0)
        if router["kind"] == "fully_soft":
            return torch.softmax(logits, dim=-1)
        k = router["k"]
        idx = torch.topk(logits, k, dim=-1).indices
        sel = torch.gather(logits, 1, idx)
        w = torch.softmax(sel, dim=-1)
        out = torch.zeros_like(logits)
        return out.scatter_(1, idx, w)

    def forward(self, tokens: torch.Tensor, taps: Optional[dict] = None):
        p = self.p
        cfg = self.cfg
        bsz, tlen = tokens.shape
        heads = cfg["n_heads"]
        d = cfg["d_model"]
        hd = d // heads
        x = p["tok_emb"][tokens] + p["pos_emb"][:tlen]
        mask = torch.triu(torch.full((tlen, tlen), float("-inf"),
                                     dtype=torch.float64), diagonal=1)
        for i in range(cfg["n_layers"]):
            pre = f"layer{i}."
            a = F.layer_norm(x, (d,), p[pre + "ln1.g"], p[pre + "ln1.b"], eps=1e-5)
            rows = a.reshape(-1, d)
            q = (rows @ p[pre + "attn.wq"].T + p[pre + "attn.bq"])
            k = (rows @ p[pre + "attn.wk"].T + p[pre + "attn.bk"])
            v = (rows @ p[pre + "attn.wv"].T + p[pre + "attn.bv"])
            q = q.reshape(bsz, tlen, heads, hd).transpose(1, 2)
            k = k.reshape(bsz, tlen, heads, hd).transpose(1, 2)
            v = v.reshape(bsz, tlen, heads, hd).transpose(1, 2)
            att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd) + mask, dim=-1)
            ctx = (att @ v).transpose(1, 2).reshape(-1, d)
            x = x + (ctx @ p[pre + "attn.wo"].T + p[pre + "attn.bo"]).reshape(bsz, tlen, d)

            m = F.layer_norm(x, (d,), p[pre + "ln2.g"], p[pre + "ln2.b"], eps=1e-5)
            rows = m.reshape(-1, d)
            gates = self.route(rows @ p[pre + "router.w"].T)
            y = torch.zeros_like(rows)
            for e in range(cfg["n_experts"]):
                sel = torch.nonzero(gates[:, e] > 0).squeeze(-1)
                if sel.numel() == 0:
                    continue
                ep = pre + f"expert{e}."
                h1 = F.gelu(rows[sel] @ p[ep + "w1"].T + p[ep + "b1"])
                f = h1 @ p[ep + "w2"].T + p[ep + "b2"]
                y[sel] += gates[sel, e, None] * f
            if taps is not None and i in taps:
                taps[i].hidden.append(rows.numpy().copy())
                taps[i].routing.append(gates.numpy().copy())
            x = x + y.reshape(bsz, tlen, d)
        return x


class MgtCheckpointAdapter:
    """Adapter for MGT1 checkpoints written by the analysis toolkit."""

    def __init__(self, path):
        header, tensors = mgt1.load(path)
        if header.get("kind") != "checkpoint":
            raise UnsupportedArchitectureError(
                f"{path}: container kind {header.get('kind')!r} is not a checkpoint"
            )
        self.config = header["model"]
        params = {name[len("param/"):]: t for name, t in tensors.items()
                  if name.startswith("param/")}
        self.model = _ControlledModel(self.config, params)
        self.n_experts = self.config["n_experts"]
        self.d_model = self.config["d_model"]
        self._taps = None

    def layer_ids(self) -> list[int]:
        return list(range(self.config["n_layers"]))

    def attach(self, layer_ids) -> dict[int, LayerTap]:
        self._taps = {lid: LayerTap() for lid in layer_ids}
        return self._taps

    def detach(self):
        self._taps = None

    def run(self, token_batches):
        with torch.no_grad():
            for batch in token_batches:
                self.model(batch, taps=self._taps)

    def expert_fn(self, layer_id: int, e: int) -> Callable:
        p = self.model.p
        ep = f"layer{layer_id}.expert{e}."
        w1, b1 = p[ep + "w1"], p[ep + "b1"]
        w2, b2 = p[ep + "w2"], p[ep + "b2"]

        def fn(x: torch.Tensor) -> torch.Tensor:
            return F.gelu(x @ w1.T + b1) @ w2.T + b2

        return fn

    def describe(self) -> dict:
        return {
            "adapter": "mgt-checkpoint",
            "model_type": "controlled-moe-transformer",
            "n_experts": int(self.n_experts),
            "d_model": int(self.d_model),
            "router": self.config["router"],
        }


def load_adapter(model_path: str, arch: str = "auto"):
    """Build the right adapter for a model path or identifier."""
    if arch == "mgt" or (arch == "auto" and str(model_path).endswith(".mgt")):
        return MgtCheckpointAdapter(model_path)
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(model_path)
    model.eval()
    return HfSparseMoeAdapter(model)
