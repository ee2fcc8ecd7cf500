from __future__ import annotations

import csv
import json
import struct

import numpy as np
import pytest

from conftest import tiny_config
from moegeom import (
    DumpContainer,
    DumpFormatError,
    RouterKind,
    TransformerModel,
    read_dump,
    read_report,
    report_from_dict,
    report_to_dict,
    write_dump,
    write_plot_csv,
    write_report,
)
from moegeom.interchange import (
    format_mean_std,
    load_checkpoint,
    model_from_container,
    checkpoint_container,
    save_checkpoint,
)
from moegeom.pipeline import ModelActivationSource, analyze_source
from moegeom.textgen import make_corpus


def test_empty_container_roundtrip():
    c = DumpContainer(header={"kind": "capture", "note": "header only"})
    out = read_dump(write_dump(c))
    assert out.header["kind"] == "capture"
    assert out.header["note"] == "header only"
    assert out.tensors == {}


def test_single_value_roundtrip_bit_exact():
    c = DumpContainer(header={"kind": "test"},
                      tensors={"x": np.array([[0.0]])})
    out = read_dump(write_dump(c))
    assert out.tensors["x"].dtype == np.dtype("<f8")
    assert out.tensors["x"].tobytes() == np.array([[0.0]]).tobytes()


def test_random_dump_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    tensors = {
        "layer0/hidden": rng.standard_normal((64, 128)),
        "layer0/routing": rng.random((64, 8)),
        "layer0/jacobian_mean/0": rng.standard_normal((128, 128)),
    }
    c = DumpContainer(header={"kind": "capture", "n_experts": 8}, tensors=tensors)
    out = read_dump(write_dump(c))
    for name, t in tensors.items():
        assert out.tensors[name].tobytes() == t.tobytes()
        assert out.tensors[name].shape == t.shape


def test_f4_roundtrip_preserves_dtype():
    t = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
    c = DumpContainer(header={}, tensors={"t": t})
    out = read_dump(write_dump(c))
    assert out.tensors["t"].dtype == np.dtype("<f4")
    assert out.tensors["t"].tobytes() == t.tobytes()


def test_header_preserves_unknown_fields():
    c = DumpContainer(header={"future_field": {"a": [1, 2]}, "kind": "capture"})
    out = read_dump(write_dump(c))
    assert out.header["future_field"] == {"a": [1, 2]}
    # and a second round trip is stable
    again = read_dump(write_dump(out))
    assert again.header == out.header


def test_unknown_sections_are_carried():
    c = DumpContainer(header={}, tensors={"known": np.ones((2, 2))},
                      opaque={"mystery": b"\x01\x02\x03"})
    out = read_dump(write_dump(c))
    assert out.opaque["mystery"] == b"\x01\x02\x03"
    assert "known" in out.tensors


def test_sections_are_aligned():
    c = DumpContainer(header={}, tensors={"a": np.ones(3), "b": np.ones(5)})
    blob = write_dump(c)
    out = read_dump(blob)
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    istart = 12 + hlen
    (ilen,) = struct.unpack_from("<Q", blob, istart)
    index = json.loads(blob[istart + 8:istart + 8 + ilen])
    base = (istart + 8 + ilen + 63) // 64 * 64
    for name, rel, length in index:
        assert (base + rel) % 64 == 0


def test_little_endian_on_disk():
    c = DumpContainer(header={}, tensors={"x": np.array([1.0])})
    blob = write_dump(c)
    (hlen,) = struct.unpack_from("<Q", blob, 4)
    assert hlen == len(json.dumps(json.loads(blob[12:12 + hlen]),
                                  sort_keys=True).encode())
    assert blob[-8:] == struct.pack("<d", 1.0)  # LE float64 payload tail


def test_bad_magic():
    with pytest.raises(DumpFormatError, match="not an MGT1 file"):
        read_dump(b"NOPE" + b"\0" * 100)


def test_truncated_container():
    blob = write_dump(DumpContainer(header={}, tensors={"x": np.ones((4, 4))}))
    with pytest.raises(DumpFormatError, match="truncated"):
        read_dump(blob[:-17])


def test_shape_length_mismatch():
    # Corrupt the declared shape in place; [3, 3] has the same byte length
    # as [2, 2], so only the shape/length consistency check can object.
    blob = write_dump(DumpContainer(header={}, tensors={"x": np.ones((2, 2))}))
    blob = blob.replace(json.dumps({"dtype": "f8", "shape": [2, 2]}).encode(),
                        json.dumps({"dtype": "f8", "shape": [3, 3]}).encode())
    with pytest.raises(DumpFormatError, match="shape"):
        read_dump(blob)


def test_unsupported_dtype():
    with pytest.raises(DumpFormatError, match="unsupported dtype"):
        write_dump(DumpContainer(header={}, tensors={"x": np.ones(3, dtype=np.int32)}))


def test_checkpoint_roundtrip_bit_exact():
    cfg = tiny_config(router=RouterKind.top_k(2), seed=21)
    model = TransformerModel(cfg)
    container = read_dump(write_dump(checkpoint_container(model)))
    restored = model_from_container(container)
    assert restored.config == cfg
    assert set(restored.params) == set(model.params)
    for k in model.params:
        assert restored.params[k].tobytes() == model.params[k].tobytes()


def test_checkpoint_file_roundtrip(tmp_path):
    model = TransformerModel(tiny_config(seed=3))
    path = tmp_path / "model.mgt"
    save_checkpoint(model, path, extra={"steps": 0})
    restored = load_checkpoint(path)
    for k in model.params:
        assert np.array_equal(restored.params[k], model.params[k])


def _report():
    cfg = tiny_config(router=RouterKind.top_k(1), vocab_size=256,
                      block_size=16, batch_size=4, n_experts=3, seed=5)
    src = ModelActivationSource(TransformerModel(cfg), make_corpus(4_000, seed=6),
                                max_tokens=96)
    return analyze_source(src, n_components=2)[0]


def test_report_json_roundtrip(tmp_path):
    report = _report()
    path = tmp_path / "report.json"
    write_report(report, path)
    loaded = read_report(path)[0]
    assert report_to_dict(loaded) == report_to_dict(report)
    assert np.array_equal(loaded.grassmann, report.grassmann)
    assert loaded.provenance == report.provenance


def test_report_dict_roundtrip_exact_floats():
    report = _report()
    d = json.loads(json.dumps(report_to_dict(report)))
    again = report_from_dict(d)
    assert np.array_equal(again.jacobian_similarity, report.jacobian_similarity)
    assert again.jacobian_offdiag == report.jacobian_offdiag


def test_format_mean_std_table_style():
    assert format_mean_std(0.062, 0.0201) == "0.062 ± 0.020"


def test_plot_csv_bin_counts(tmp_path):
    report = _report()
    paths = write_plot_csv(report, tmp_path)
    assert len(paths) == 3
    n_inc = len(report.jacobian_experts)
    for path in paths:
        if "jacobian_similarity_hist" not in path.name:
            continue
        with open(path) as fh:
            rows = [r for r in csv.reader(line for line in fh
                                          if not line.startswith("#"))]
        assert rows[0] == ["bin_left", "bin_right", "count"]
        total = sum(int(r[2]) for r in rows[1:])
        assert total == n_inc * (n_inc - 1) // 2


def test_plot_csv_lf_line_endings(tmp_path):
    report = _report()
    for path in write_plot_csv(report, tmp_path):
        raw = path.read_bytes()
        assert b"\r" not in raw
