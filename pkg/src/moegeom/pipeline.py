"""Probe orchestration: routed collection, Jacobian averaging, alignment
and subspace matrices, spectra, and routing comparisons.

A source of activations is either a live controlled model (capture is
re-run deterministically) or an ingested dump; downstream computation is
identical for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import (
    IncompatibleReportsError,
    InsufficientDataError,
    NotFoundError,
)
from .geometry import (
    PcaResult,
    ROW_SCALED,
    SAMPLE_WEIGHTED,
    Stats,
    grassmann_distance,
    offdiag_stats,
    pairwise_metric_matrix,
    vectorized_cosine,
    weighted_pca,
)
from .model import TransformerModel, gelu_prime, run_capture

DEFAULT_COMPONENTS = 5
DEFAULT_MAX_TOKENS = 4096

ROUTED_WEIGHTING = "routed"
UNIFORM_WEIGHTING = "uniform"


@dataclass
class RoutedActivations:
    """Hidden-state rows routed to one expert with their routing weights."""

    expert_id: int
    rows: np.ndarray      # (n_tokens, d)
    weights: np.ndarray   # (n_tokens,), strictly positive

    def __post_init__(self):
        if self.rows.shape[0] != self.weights.shape[0]:
            raise ValueError("rows and weights disagree on token count")
        if self.weights.size and (self.weights <= 0).any():
            raise ValueError("routed weights must be strictly positive")

    @property
    def count(self) -> int:
        return self.rows.shape[0]


@dataclass
class ExpertJacobianStat:
    """Running weighted mean of one expert's per-token Jacobians."""

    expert_id: int
    mean_jacobian: np.ndarray
    total_weight: float = 0.0
    sample_count: int = 0

    @classmethod
    def empty(cls, expert_id: int, d_out: int, d_in: int) -> "ExpertJacobianStat":
        return cls(expert_id, np.zeros((d_out, d_in)))

    def update(self, jacobian: np.ndarray, weight: float):
        """Fold one Jacobian into the running mean. Zero-weight samples
        carry no information and are ignored."""
        if weight < 0:
            raise ValueError("weight must be nonnegative")
        if weight == 0.0:
            return
        new_total = self.total_weight + weight
        self.mean_jacobian += (weight / new_total) * (jacobian - self.mean_jacobian)
        self.total_weight = new_total
        self.sample_count += 1


@dataclass(frozen=True)
class Spectrum:
    """Explained and cumulative variance fractions, leading index first."""

    explained: np.ndarray
    cumulative: np.ndarray

    @classmethod
    def from_pca(cls, pca: PcaResult) -> "Spectrum":
        return cls(pca.explained_variance, pca.cumulative_variance)


@dataclass
class GeometryReport:
    """Per-layer bundle of alignment matrices, subspace distances, spectra,
    and summary statistics."""

    layer_id: int
    n_experts: int
    n_components: int
    pca_mode: str
    jacobian_experts: list[int]
    jacobian_similarity: np.ndarray
    jacobian_offdiag: Stats
    grassmann_experts: list[int]
    grassmann: np.ndarray
    grassmann_offdiag: Stats
    expert_spectra: dict[int, Spectrum]
    dense_spectrum: Optional[Spectrum]
    routing_entropy: Stats
    token_counts: dict
    annotations: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


class ModelActivationSource:
    """Activations captured by a deterministic pass of a live model."""

    def __init__(self, model: TransformerModel, corpus,
                 max_tokens: int = DEFAULT_MAX_TOKENS,
                 jacobian_weighting: str = ROUTED_WEIGHTING,
                 source_name: str = "model"):
        if jacobian_weighting not in (ROUTED_WEIGHTING, UNIFORM_WEIGHTING):
            raise ValueError(f"unknown jacobian weighting {jacobian_weighting!r}")
        self.model = model
        self.max_tokens = max_tokens
        self.jacobian_weighting = jacobian_weighting
        self.source_name = source_name
        self._data = np.frombuffer(bytes(corpus), dtype=np.uint8) if isinstance(
            corpus, (bytes, bytearray)) else np.asarray(corpus, dtype=np.uint8)
        self._capture = None

    @property
    def capture(self):
        if self._capture is None:
            self._capture = run_capture(self.model, self._data, self.max_tokens)
        return self._capture

    def layer_ids(self) -> list[int]:
        return list(range(self.model.config.n_layers))

    def activations(self, layer: int):
        if layer not in self.layer_ids():
            raise NotFoundError(f"layer {layer} not present in model")
        return self.capture.hidden(layer), self.capture.routing(layer)

    def jacobian_stats(self, layer: int) -> list[ExpertJacobianStat]:
        """Weighted-mean expert Jacobians at the captured rows.

        The expert Jacobian is w2 @ diag(gelu'(z1)) @ w1, which is linear
        in the activation-derivative vector, so the weighted mean over
        tokens reduces to one matrix product with the weighted mean of
        gelu'(z1). This is the exact mean, computed in one pass.
        """
        hidden, routing = self.activations(layer)
        out = []
        for e in range(self.model.config.n_experts):
            mlp = self.model.expert(layer, e)
            if self.jacobian_weighting == ROUTED_WEIGHTING:
                idx = np.flatnonzero(routing[:, e] > 0.0)
                rows = hidden[idx]
                weights = routing[idx, e]
            else:
                rows = hidden
                weights = np.ones(hidden.shape[0])
            total = float(weights.sum())
            if rows.shape[0] == 0 or total == 0.0:
                out.append(ExpertJacobianStat.empty(e, mlp.w2.shape[0], mlp.w1.shape[1]))
                continue
            act = gelu_prime(rows @ mlp.w1.T + mlp.b1)
            abar = (weights @ act) / total
            mean_j = (mlp.w2 * abar) @ mlp.w1
            out.append(ExpertJacobianStat(e, mean_j, total, rows.shape[0]))
        return out

    def default_pca_mode(self) -> str:
        return SAMPLE_WEIGHTED

    def provenance(self) -> dict:
        cfg = self.model.config
        return {
            "source": self.source_name,
            "source_kind": "live-model",
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "max_tokens": self.max_tokens,
            "jacobian_weighting": self.jacobian_weighting,
        }


class DumpActivationSource:
    """Activations read from an ingested MGT1 capture container."""

    def __init__(self, container, source_name: str = "dump"):
        header = container.header
        if header.get("kind") != "capture":
            raise NotFoundError(
                f"container kind {header.get('kind')!r} is not a capture dump"
            )
        self.container = container
        self.header = header
        self.source_name = source_name

    def layer_ids(self) -> list[int]:
        return [int(x) for x in self.header["layers"]]

    def activations(self, layer: int):
        if layer not in self.layer_ids():
            raise NotFoundError(f"layer {layer} not present in dump")
        hidden = self.container.tensors[f"layer{layer}/hidden"]
        routing = self.container.tensors[f"layer{layer}/routing"]
        return hidden.astype(np.float64, copy=False), routing.astype(np.float64, copy=False)

    def jacobian_stats(self, layer: int) -> list[ExpertJacobianStat]:
        if layer not in self.layer_ids():
            raise NotFoundError(f"layer {layer} not present in dump")
        totals = self.header["jacobian_total_weight"][str(layer)]
        counts = self.header["jacobian_sample_count"][str(layer)]
        out = []
        for e in range(int(self.header["n_experts"])):
            mean = self.container.tensors[f"layer{layer}/jacobian_mean/{e}"]
            out.append(ExpertJacobianStat(
                e, mean.astype(np.float64, copy=False),
                float(totals[e]), int(counts[e]),
            ))
        return out

    def default_pca_mode(self) -> str:
        return self.header.get("weighting_mode", ROW_SCALED)

    def provenance(self) -> dict:
        keep = {k: self.header[k] for k in
                ("model_name", "seed", "config", "token_count", "jacobian_weighting")
                if k in self.header}
        keep.update(source=self.source_name, source_kind="dump",
                    creator=self.header.get("creator"))
        return keep


def collect(source, layer: int):
    """Routed activations and Jacobian statistics for one layer.

    Every token contributes to each expert it reaches with positive
    routing weight. Experts with zero routed tokens come back with empty
    rows and are excluded (with an annotation) by downstream consumers.
    """
    if layer not in source.layer_ids():
        raise NotFoundError(f"layer {layer} not found; have {source.layer_ids()}")
    hidden, routing = source.activations(layer)
    n_experts = routing.shape[1]
    routed = []
    for e in range(n_experts):
        idx = np.flatnonzero(routing[:, e] > 0.0)
        routed.append(RoutedActivations(e, hidden[idx], routing[idx, e]))
    return routed, source.jacobian_stats(layer)


def jacobian_alignment(stats: Sequence[ExpertJacobianStat]):
    """Pairwise cosine similarity of mean expert Jacobians.

    Experts with no samples or an identically zero mean Jacobian are
    flagged dead and excluded. Returns (matrix, offdiag stats, included
    expert ids, annotations).
    """
    alive = []
    annotations = []
    for s in stats:
        if s.sample_count == 0:
            annotations.append(
                f"expert {s.expert_id} excluded from Jacobian alignment: no routed tokens"
            )
        elif not np.any(s.mean_jacobian):
            annotations.append(
                f"expert {s.expert_id} excluded from Jacobian alignment: zero mean Jacobian"
            )
        else:
            alive.append(s)
    if len(alive) < 2:
        raise InsufficientDataError(
            f"need at least 2 experts with Jacobian data, have {len(alive)}"
        )
    matrix = pairwise_metric_matrix(
        [s.mean_jacobian for s in alive], vectorized_cosine
    )
    return matrix, offdiag_stats(matrix), [s.expert_id for s in alive], annotations


def subspace_report(routed: Sequence[RoutedActivations],
                    n_components: int = DEFAULT_COMPONENTS,
                    mode: str = SAMPLE_WEIGHTED):
    """Per-expert routed PCA and the pairwise Grassmann distance matrix.

    Experts with fewer than ``n_components`` positively weighted rows are
    excluded and annotated; at least two must remain. Returns
    (pca results by expert, matrix, offdiag stats, included ids,
    annotations).
    """
    eligible = []
    annotations = []
    for r in routed:
        if r.count < n_components:
            annotations.append(
                f"expert {r.expert_id} excluded from subspace analysis: "
                f"{r.count} routed tokens < {n_components} components"
            )
        else:
            eligible.append(r)
    if len(eligible) < 2:
        detail = "; ".join(annotations) if annotations else "no experts provided"
        raise InsufficientDataError(
            f"need at least 2 experts with >= {n_components} routed tokens ({detail})"
        )
    pca = {r.expert_id: weighted_pca(r.rows, r.weights, n_components, mode=mode)
           for r in eligible}
    subspaces = [pca[r.expert_id].subspace for r in eligible]
    matrix = pairwise_metric_matrix(subspaces, grassmann_distance)
    return pca, matrix, offdiag_stats(matrix), [r.expert_id for r in eligible], annotations


def spectra_report(dense_rows: np.ndarray, routed: Sequence[RoutedActivations],
                   mode: str = SAMPLE_WEIGHTED, n_components: int = 1):
    """Variance profiles for the dense (pre-MoE) rows and each expert.

    The dense baseline is plain unit-weight PCA of all rows; expert
    profiles use the routed weights under the requested mode. Experts
    without enough rows are skipped.
    """
    if dense_rows.shape[0] == 0:
        raise InsufficientDataError("dense rows are empty")
    dense = weighted_pca(dense_rows, np.ones(dense_rows.shape[0]),
                         n_components, mode=SAMPLE_WEIGHTED)
    per_expert = {}
    for r in routed:
        if r.count >= max(n_components, 1):
            per_expert[r.expert_id] = weighted_pca(
                r.rows, r.weights, n_components, mode=mode)
    return Spectrum.from_pca(dense), {
        e: Spectrum.from_pca(p) for e, p in per_expert.items()
    }


def routing_entropy(routing: np.ndarray) -> Stats:
    """Mean and std of per-token routing entropy (natural log)."""
    g = np.asarray(routing, dtype=np.float64)
    terms = np.where(g > 0.0, g * np.log(np.where(g > 0.0, g, 1.0)), 0.0)
    h = -terms.sum(axis=1)
    return Stats(mean=float(h.mean()), std=float(h.std()))


def analyze_layer(source, layer: int, n_components: int = DEFAULT_COMPONENTS,
                  mode: Optional[str] = None) -> GeometryReport:
    """Full geometric report for one layer of a source."""
    if mode is None:
        mode = source.default_pca_mode()
    hidden, routing = source.activations(layer)
    routed, stats = collect(source, layer)

    jac_matrix, jac_stats, jac_ids, jac_notes = jacobian_alignment(stats)
    pca, gr_matrix, gr_stats, gr_ids, gr_notes = subspace_report(
        routed, n_components, mode)

    dense = weighted_pca(hidden, np.ones(hidden.shape[0]), 1, mode=SAMPLE_WEIGHTED)
    spectra = {e: Spectrum.from_pca(p) for e, p in pca.items()}

    prov = source.provenance()
    prov.update(n_components=n_components, pca_mode=mode,
                toolkit_version=__version__)
    per_expert_counts = [int(r.count) for r in routed]
    return GeometryReport(
        layer_id=layer,
        n_experts=routing.shape[1],
        n_components=n_components,
        pca_mode=mode,
        jacobian_experts=jac_ids,
        jacobian_similarity=jac_matrix,
        jacobian_offdiag=jac_stats,
        grassmann_experts=gr_ids,
        grassmann=gr_matrix,
        grassmann_offdiag=gr_stats,
        expert_spectra=spectra,
        dense_spectrum=Spectrum.from_pca(dense),
        routing_entropy=routing_entropy(routing),
        token_counts={"total": int(hidden.shape[0]),
                      "per_expert": per_expert_counts},
        annotations=jac_notes + gr_notes,
        provenance=prov,
    )


def analyze_source(source, layers: Optional[Sequence[int]] = None,
                   n_components: int = DEFAULT_COMPONENTS,
                   mode: Optional[str] = None) -> list[GeometryReport]:
    """Reports for the requested layers (all MoE layers by default)."""
    ids = source.layer_ids() if layers is None else list(layers)
    return [analyze_layer(source, lid, n_components, mode) for lid in ids]


def compare_routing(a: GeometryReport, b: GeometryReport) -> dict:
    """Paired deltas of off-diagonal means between two reports.

    Flags which side shows the sharper geometric separation (the larger
    mean Grassmann distance). Raises if the reports disagree on expert or
    component count.
    """
    if a.n_experts != b.n_experts:
        raise IncompatibleReportsError(
            f"expert counts differ: {a.n_experts} vs {b.n_experts}"
        )
    if a.n_components != b.n_components:
        raise IncompatibleReportsError(
            f"component counts differ: {a.n_components} vs {b.n_components}"
        )
    ga, gb = a.grassmann_offdiag.mean, b.grassmann_offdiag.mean
    if ga > gb:
        sharper = "a"
    elif gb > ga:
        sharper = "b"
    else:
        sharper = "tie"
    ratio = ga / gb if gb != 0.0 else math.inf if ga > 0 else math.nan
    return {
        "layer_id": a.layer_id,
        "delta": {
            "jacobian_offdiag_mean": a.jacobian_offdiag.mean - b.jacobian_offdiag.mean,
            "grassmann_offdiag_mean": ga - gb,
            "routing_entropy_mean": a.routing_entropy.mean - b.routing_entropy.mean,
        },
        "grassmann_ratio": ratio,
        "sharper_separation": sharper,
    }
