"""File formats binding the toolkit together.

MGT1 container layout (all integers little-endian):

    bytes 0..3      magic ``MGT1``
    bytes 4..11     uint64 header byte length H
    next H bytes    header, a UTF-8 JSON object
    next 8 bytes    uint64 index byte length I
    next I bytes    index, a UTF-8 JSON array of [name, offset, length]
    payload         starts at the first 64-byte-aligned file offset past
                    the index; section offsets in the index are relative
                    to that base and each section start is 64-byte aligned

Tensor sections are little-endian IEEE-754 floats, row-major. The header
key ``sections`` maps each tensor name to ``{"dtype": "f4"|"f8",
"shape": [...]}``. Index entries without a ``sections`` record are opaque:
readers carry their bytes along untouched. Unknown header keys are
preserved verbatim.

Capture dumps (``"kind": "capture"``) carry, per analyzed layer L:

    layer{L}/hidden             (n_tokens, d)  hidden rows fed to the router
    layer{L}/routing            (n_tokens, n_experts)  routing weight rows
    layer{L}/jacobian_mean/{e}  (d, d) f8      weighted-mean expert Jacobian

with header fields ``layers`` (list of layer ids), ``n_experts``,
``weighting_mode`` (default PCA weighting for this dump),
``jacobian_total_weight`` and ``jacobian_sample_count`` (dicts keyed by
the layer id as a string, one list entry per expert). Any tool that
produces this layout can feed the analysis pipeline.

Checkpoints (``"kind": "checkpoint"``) store every model parameter as a
``param/<name>`` f8 section plus the full model config under ``model``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import DumpFormatError
from .geometry import Stats, grassmann_max
from .model import ModelConfig, TransformerModel
from .pipeline import GeometryReport, Spectrum

MAGIC = b"MGT1"
ALIGNMENT = 64
REPORT_SCHEMA = 1

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f4", np.dtype(np.float64): "f8"}


@dataclass
class DumpContainer:
    """In-memory MGT1 container: a JSON header plus named tensors.

    ``tensors`` keeps the stored dtypes (f4 or f8); promotion to float64
    happens where the data is consumed, so write(read(x)) is bit-exact.
    """

    header: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    opaque: dict[str, bytes] = field(default_factory=dict)


def _aligned(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def write_dump(container: DumpContainer) -> bytes:
    """Serialize a container to MGT1 bytes."""
    header = dict(container.header)
    sections = {}
    blobs: list[tuple[str, bytes]] = []
    for name, tensor in container.tensors.items():
        if tensor.dtype not in _DTYPE_NAMES:
            raise DumpFormatError(
                f"unsupported dtype {tensor.dtype} for section {name!r}"
            )
        dname = _DTYPE_NAMES[tensor.dtype]
        sections[name] = {"dtype": dname, "shape": list(tensor.shape)}
        blobs.append((name, np.ascontiguousarray(tensor).astype(
            _DTYPES[dname], copy=False).tobytes()))
    for name, raw in container.opaque.items():
        blobs.append((name, raw))
    header["format"] = "MGT1"
    header["version"] = 1
    header["sections"] = sections

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    index = []
    offset = 0
    for name, raw in blobs:
        offset = _aligned(offset)
        index.append([name, offset, len(raw)])
        offset += len(raw)
    index_bytes = json.dumps(index).encode("utf-8")

    out = bytearray()
    out += MAGIC
    out += struct.pack("<Q", len(header_bytes))
    out += header_bytes
    out += struct.pack("<Q", len(index_bytes))
    out += index_bytes
    payload_base = _aligned(len(out))
    out += b"\0" * (payload_base - len(out))
    for (name, raw), (_, rel, _) in zip(blobs, index):
        pos = payload_base + rel
        out += b"\0" * (pos - len(out))
        out += raw
    return bytes(out)


def read_dump(data: bytes) -> DumpContainer:
    """Parse MGT1 bytes back into a container.

    Sections listed in the index but absent from the header's ``sections``
    map are kept as opaque bytes; unknown header fields are preserved.
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise DumpFormatError("not an MGT1 file")
    if len(data) < 12:
        raise DumpFormatError("truncated container: missing header length")
    (hlen,) = struct.unpack_from("<Q", data, 4)
    hstart = 12
    if hstart + hlen + 8 > len(data):
        raise DumpFormatError("truncated container: header extends past end")
    try:
        header = json.loads(data[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DumpFormatError(f"bad header JSON: {err}") from err
    istart = hstart + hlen
    (ilen,) = struct.unpack_from("<Q", data, istart)
    istart += 8
    if istart + ilen > len(data):
        raise DumpFormatError("truncated container: index extends past end")
    try:
        index = json.loads(data[istart:istart + ilen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DumpFormatError(f"bad index JSON: {err}") from err
    payload_base = _aligned(istart + ilen)

    sections = header.get("sections", {})
    tensors: dict[str, np.ndarray] = {}
    opaque: dict[str, bytes] = {}
    for entry in index:
        name, rel, length = entry[0], int(entry[1]), int(entry[2])
        start = payload_base + rel
        if start + length > len(data):
            raise DumpFormatError(f"truncated section {name!r}")
        raw = data[start:start + length]
        meta = sections.get(name)
        if meta is None:
            opaque[name] = raw
            continue
        dname = meta["dtype"]
        if dname not in _DTYPES:
            raise DumpFormatError(f"unsupported dtype {dname!r} in section {name!r}")
        dtype = _DTYPES[dname]
        shape = tuple(int(s) for s in meta["shape"])
        expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        if expected != length:
            raise DumpFormatError(
                f"section {name!r}: shape {shape} implies {expected} bytes, "
                f"index says {length}"
            )
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return DumpContainer(header=header, tensors=tensors, opaque=opaque)


def save_dump(container: DumpContainer, path) -> None:
    Path(path).write_bytes(write_dump(container))


def load_dump(path) -> DumpContainer:
    return read_dump(Path(path).read_bytes())


# --- model checkpoints ----------------------------------------------------

def checkpoint_container(model: TransformerModel, extra: Optional[dict] = None
                         ) -> DumpContainer:
    header = {
        "kind": "checkpoint",
        "model": model.config.to_dict(),
        "seed": model.config.seed,
        "creator": f"moegeom {__version__}",
    }
    if extra:
        header.update(extra)
    tensors = {f"param/{name}": value for name, value in model.params.items()}
    return DumpContainer(header=header, tensors=tensors)


def save_checkpoint(model: TransformerModel, path, extra: Optional[dict] = None) -> None:
    save_dump(checkpoint_container(model, extra), path)


def model_from_container(container: DumpContainer) -> TransformerModel:
    header = container.header
    if header.get("kind") != "checkpoint":
        raise DumpFormatError(
            f"container kind {header.get('kind')!r} is not a checkpoint"
        )
    config = ModelConfig.from_dict(header["model"])
    params = {}
    for name, tensor in container.tensors.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = tensor.astype(np.float64, copy=False)
    return TransformerModel(config, params)


def load_checkpoint(path) -> TransformerModel:
    return model_from_container(load_dump(path))


# --- capture dumps --------------------------------------------------------

def capture_dump_container(source, dtype: str = "f8",
                           extra: Optional[dict] = None) -> DumpContainer:
    """Materialize a ModelActivationSource into a capture container.

    Hidden states and routing weights are stored at ``dtype`` (the
    controlled toolkit keeps f8 so reading a dump back reproduces live
    analysis bit for bit); Jacobian means are always f8.
    """
    if dtype not in _DTYPES:
        raise DumpFormatError(f"unsupported dtype {dtype!r}")
    layers = source.layer_ids()
    prov = source.provenance()
    header = {
        "kind": "capture",
        "layers": layers,
        "dtype": dtype,
        "weighting_mode": source.default_pca_mode(),
        "jacobian_weighting": source.jacobian_weighting,
        "creator": f"moegeom {__version__}",
        "jacobian_total_weight": {},
        "jacobian_sample_count": {},
    }
    header.update(prov)
    tensors = {}
    token_count = None
    for layer in layers:
        hidden, routing = source.activations(layer)
        token_count = hidden.shape[0]
        np_dtype = _DTYPES[dtype]
        tensors[f"layer{layer}/hidden"] = hidden.astype(np_dtype)
        tensors[f"layer{layer}/routing"] = routing.astype(np_dtype)
        stats = source.jacobian_stats(layer)
        header["jacobian_total_weight"][str(layer)] = [s.total_weight for s in stats]
        header["jacobian_sample_count"][str(layer)] = [s.sample_count for s in stats]
        for s in stats:
            tensors[f"layer{layer}/jacobian_mean/{s.expert_id}"] = (
                s.mean_jacobian.astype(np.float64)
            )
        header["n_experts"] = len(stats)
    header["token_count"] = token_count
    if extra:
        header.update(extra)
    return DumpContainer(header=header, tensors=tensors)


# --- geometry reports -----------------------------------------------------

def stats_to_dict(s: Stats) -> dict:
    return {"mean": s.mean, "std": s.std}


def stats_from_dict(d: dict) -> Stats:
    return Stats(mean=float(d["mean"]), std=float(d["std"]))


def spectrum_to_dict(s: Spectrum) -> dict:
    return {"explained": s.explained.tolist(), "cumulative": s.cumulative.tolist()}


def spectrum_from_dict(d: dict) -> Spectrum:
    return Spectrum(explained=np.asarray(d["explained"], dtype=np.float64),
                    cumulative=np.asarray(d["cumulative"], dtype=np.float64))


def report_to_dict(report: GeometryReport) -> dict:
    return {
        "layer_id": report.layer_id,
        "n_experts": report.n_experts,
        "n_components": report.n_components,
        "pca_mode": report.pca_mode,
        "jacobian_similarity": {
            "experts": list(report.jacobian_experts),
            "matrix": report.jacobian_similarity.tolist(),
            "offdiag": stats_to_dict(report.jacobian_offdiag),
        },
        "grassmann": {
            "experts": list(report.grassmann_experts),
            "matrix": report.grassmann.tolist(),
            "offdiag": stats_to_dict(report.grassmann_offdiag),
        },
        "expert_spectra": {
            str(e): spectrum_to_dict(s) for e, s in report.expert_spectra.items()
        },
        "dense_spectrum": (spectrum_to_dict(report.dense_spectrum)
                           if report.dense_spectrum is not None else None),
        "routing_entropy": stats_to_dict(report.routing_entropy),
        "token_counts": report.token_counts,
        "annotations": list(report.annotations),
        "provenance": report.provenance,
    }


def report_from_dict(d: dict) -> GeometryReport:
    return GeometryReport(
        layer_id=int(d["layer_id"]),
        n_experts=int(d["n_experts"]),
        n_components=int(d["n_components"]),
        pca_mode=d["pca_mode"],
        jacobian_experts=[int(e) for e in d["jacobian_similarity"]["experts"]],
        jacobian_similarity=np.asarray(d["jacobian_similarity"]["matrix"],
                                       dtype=np.float64),
        jacobian_offdiag=stats_from_dict(d["jacobian_similarity"]["offdiag"]),
        grassmann_experts=[int(e) for e in d["grassmann"]["experts"]],
        grassmann=np.asarray(d["grassmann"]["matrix"], dtype=np.float64),
        grassmann_offdiag=stats_from_dict(d["grassmann"]["offdiag"]),
        expert_spectra={int(e): spectrum_from_dict(s)
                        for e, s in d["expert_spectra"].items()},
        dense_spectrum=(spectrum_from_dict(d["dense_spectrum"])
                        if d.get("dense_spectrum") is not None else None),
        routing_entropy=stats_from_dict(d["routing_entropy"]),
        token_counts=d["token_counts"],
        annotations=list(d["annotations"]),
        provenance=d["provenance"],
    )


def write_report(reports, path=None) -> str:
    """Serialize one report or a list of per-layer reports to JSON."""
    if isinstance(reports, GeometryReport):
        reports = [reports]
    doc = {
        "schema": REPORT_SCHEMA,
        "kind": "geometry_report_set",
        "toolkit_version": __version__,
        "reports": [report_to_dict(r) for r in reports],
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def read_report(path) -> list[GeometryReport]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("schema") != REPORT_SCHEMA:
        raise DumpFormatError(f"unsupported report schema {doc.get('schema')!r}")
    return [report_from_dict(r) for r in doc["reports"]]


def format_mean_std(mean: float, std: float, digits: int = 3) -> str:
    """Summary-table rendering of a mean and spread, e.g. ``0.062 ± 0.020``."""
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


# --- CSV plot data --------------------------------------------------------

def _upper_triangle(matrix: np.ndarray) -> np.ndarray:
    e = matrix.shape[0]
    iu = np.triu_indices(e, k=1)
    return matrix[iu]


def _write_csv(path: Path, comment: str, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_plot_csv(report: GeometryReport, out_dir, bins: int = 20) -> list[Path]:
    """Emit per-figure CSV panels for one layer report.

    Produces a Jacobian-similarity histogram, a Grassmann-distance
    histogram, and aligned spectra curves. Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"layer{report.layer_id}_"
    prov = report.provenance
    comment = (f"moegeom {prov.get('toolkit_version', __version__)} "
               f"layer={report.layer_id} seed={prov.get('seed')} "
               f"n_components={report.n_components} mode={report.pca_mode}")
    written = []

    sims = _upper_triangle(report.jacobian_similarity)
    counts, edges = np.histogram(sims, bins=bins, range=(-1.0, 1.0))
    path = out / f"{prefix}jacobian_similarity_hist.csv"
    _write_csv(path, comment, ["bin_left", "bin_right", "count"],
               [(edges[i], edges[i + 1], int(counts[i])) for i in range(bins)])
    written.append(path)

    dists = _upper_triangle(report.grassmann)
    gmax = grassmann_max(report.n_components)
    counts, edges = np.histogram(dists, bins=bins, range=(0.0, gmax))
    path = out / f"{prefix}grassmann_hist.csv"
    _write_csv(path, comment, ["bin_left", "bin_right", "count"],
               [(edges[i], edges[i + 1], int(counts[i])) for i in range(bins)])
    written.append(path)

    experts = sorted(report.expert_spectra)
    columns = ["component"]
    series = []
    if report.dense_spectrum is not None:
        columns += ["dense_explained", "dense_cumulative"]
        series.append(report.dense_spectrum)
    for e in experts:
        columns += [f"expert{e}_explained", f"expert{e}_cumulative"]
        series.append(report.expert_spectra[e])
    depth = max((s.explained.shape[0] for s in series), default=0)
    rows = []
    for i in range(depth):
        row = [i + 1]
        for s in series:
            if i < s.explained.shape[0]:
                row += [s.explained[i], s.cumulative[i]]
            else:
                row += ["", ""]
        rows.append(row)
    path = out / f"{prefix}spectra.csv"
    _write_csv(path, comment, columns, rows)
    written.append(path)
    return written
