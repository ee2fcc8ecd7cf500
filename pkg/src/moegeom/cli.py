"""Command-line entry point: train, analyze, compare, inspect.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or input
error. Relative output paths resolve against $MOEGEOM_OUT when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import (
    BoundsError,
    DumpFormatError,
    IncompatibleReportsError,
    InsufficientDataError,
    NotFoundError,
    ShapeError,
    ToolkitError,
)
from .geometry import PCA_MODES
from .interchange import (
    capture_dump_container,
    format_mean_std,
    load_checkpoint,
    load_dump,
    read_report,
    save_checkpoint,
    save_dump,
    write_plot_csv,
    write_report,
)
from .model import ModelConfig, RouterKind
from .pipeline import (
    DEFAULT_COMPONENTS,
    DEFAULT_MAX_TOKENS,
    DumpActivationSource,
    ModelActivationSource,
    analyze_source,
    compare_routing,
)
from .train import DEFAULT_LR, train

_INPUT_ERRORS = (
    DumpFormatError,
    NotFoundError,
    IncompatibleReportsError,
    InsufficientDataError,
    BoundsError,
    ShapeError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    ValueError,
)


def _out_path(p: str) -> Path:
    path = Path(p)
    base = os.environ.get("MOEGEOM_OUT")
    if base and not path.is_absolute():
        path = Path(base) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _read_corpus(path: str) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return p.read_bytes()


def _load_config(args) -> ModelConfig:
    base = ModelConfig().to_dict()
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        file_cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
        for key, value in file_cfg.items():
            if key not in base:
                raise ValueError(f"unknown config field {key!r}")
            base[key] = value
    if isinstance(base["router"], str):
        base["router"] = RouterKind.parse(base["router"]).to_dict()
    if args.router:
        base["router"] = RouterKind.parse(args.router).to_dict()
    if args.seed is not None:
        base["seed"] = args.seed
    return ModelConfig.from_dict(base)


def cmd_train(args) -> int:
    corpus = _read_corpus(args.corpus)
    config = _load_config(args)
    verbose = args.verbose

    def on_step(step, loss):
        if verbose and (step % 10 == 0 or step == args.steps - 1):
            print(f"step {step}: loss {loss:.4f}")

    model, losses = train(config, corpus, args.steps, lr=args.lr, on_step=on_step)

    out = _out_path(args.out)
    save_checkpoint(model, out, extra={
        "steps": args.steps,
        "corpus": str(args.corpus),
        "final_loss": float(losses[-1]) if len(losses) else None,
    })
    print(f"checkpoint written to {out}")

    loss_csv = _out_path(args.loss_csv or f"{args.out}.loss.csv")
    with open(loss_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# moegeom {__version__} seed={config.seed} "
                 f"router={config.router.label()} steps={args.steps}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        writer.writerows((i, float(losses[i])) for i in range(len(losses)))
    print(f"loss trace written to {loss_csv}")

    if args.capture:
        source = ModelActivationSource(model, corpus, max_tokens=args.max_tokens)
        dump = capture_dump_container(source, dtype="f8", extra={
            "model_name": f"controlled-{config.router.label()}",
            "corpus": str(args.corpus),
        })
        cap_path = _out_path(args.capture)
        save_dump(dump, cap_path)
        print(f"capture dump written to {cap_path}")
    return 0


def cmd_analyze(args) -> int:
    if bool(args.dump) == bool(args.checkpoint):
        print("error: give exactly one of --dump or --checkpoint", file=sys.stderr)
        return 2
    if args.checkpoint and not args.corpus:
        print("error: --checkpoint requires --corpus", file=sys.stderr)
        return 2

    if args.dump:
        dump_path = Path(args.dump)
        if not dump_path.is_file():
            raise FileNotFoundError(f"dump file not found: {args.dump}")
        source = DumpActivationSource(load_dump(dump_path),
                                      source_name=str(dump_path))
    else:
        ckpt_path = Path(args.checkpoint)
        if not ckpt_path.is_file():
            raise FileNotFoundError(f"checkpoint file not found: {args.checkpoint}")
        model = load_checkpoint(ckpt_path)
        corpus = _read_corpus(args.corpus)
        source = ModelActivationSource(model, corpus, max_tokens=args.max_tokens,
                                       source_name=str(ckpt_path))

    layers = None if args.layer == "all" else [int(args.layer)]
    reports = analyze_source(source, layers=layers,
                             n_components=args.components, mode=args.mode)
    out = _out_path(args.out)
    write_report(reports, out)
    print(f"report written to {out}")
    for r in reports:
        print(f"layer {r.layer_id}: jacobian similarity "
              f"{format_mean_std(r.jacobian_offdiag.mean, r.jacobian_offdiag.std)}  "
              f"grassmann distance "
              f"{format_mean_std(r.grassmann_offdiag.mean, r.grassmann_offdiag.std)}")
        for note in r.annotations:
            print(f"  note: {note}")
    if args.csv:
        csv_dir = _out_path(args.csv)
        for r in reports:
            for path in write_plot_csv(r, csv_dir):
                print(f"csv written to {path}")
    return 0


def _load_report_file(path: str):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"report file not found: {path}")
    try:
        return read_report(p)
    except json.JSONDecodeError as err:
        raise DumpFormatError(
            f"{path}: JSON parse error at byte {err.pos}: {err.msg}"
        ) from err


def cmd_compare(args) -> int:
    reports_a = {r.layer_id: r for r in _load_report_file(args.a)}
    reports_b = {r.layer_id: r for r in _load_report_file(args.b)}
    shared = sorted(set(reports_a) & set(reports_b))
    if not shared:
        raise IncompatibleReportsError("reports share no layer ids")
    layers = [compare_routing(reports_a[lid], reports_b[lid]) for lid in shared]
    doc = {
        "schema": 1,
        "kind": "routing_comparison",
        "toolkit_version": __version__,
        "a": {"path": str(args.a),
              "provenance": reports_a[shared[0]].provenance},
        "b": {"path": str(args.b),
              "provenance": reports_b[shared[0]].provenance},
        "layers": layers,
    }
    out = _out_path(args.out)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    print(f"comparison written to {out}")
    for entry in layers:
        d = entry["delta"]
        print(f"layer {entry['layer_id']}: grassmann delta "
              f"{d['grassmann_offdiag_mean']:+.3f}, jacobian delta "
              f"{d['jacobian_offdiag_mean']:+.3f}, sharper separation: "
              f"{entry['sharper_separation']}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.dump)
    if not path.is_file():
        raise FileNotFoundError(f"dump file not found: {args.dump}")
    container = load_dump(path)
    header = container.header
    print(f"MGT1 container: {path}")
    print(f"kind: {header.get('kind')}  creator: {header.get('creator')}")
    if "token_count" in header:
        print(f"token count: {header['token_count']}")
    if "layers" in header:
        print(f"layers: {header['layers']}")
    meta = {k: v for k, v in header.items() if k not in ("sections",)}
    print("header:")
    print(json.dumps(meta, indent=2, sort_keys=True))
    sections = header.get("sections", {})
    print(f"{len(container.tensors)} tensor section(s):")
    for name in container.tensors:
        info = sections[name]
        print(f"  {name}  dtype={info['dtype']}  shape={tuple(info['shape'])}")
    for name in container.opaque:
        print(f"  {name}  (opaque, {len(container.opaque[name])} bytes)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moegeom",
        description="Geometry diagnostics for Mixture-of-Experts layers.",
    )
    parser.add_argument("--version", action="version",
                        version=f"moegeom {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a controlled MoE transformer")
    p_train.add_argument("--config", help="JSON config file (defaults filled in)")
    p_train.add_argument("--corpus", required=True, help="byte-level text corpus")
    p_train.add_argument("--steps", type=int, required=True)
    p_train.add_argument("--router", help="topk:K or soft")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--lr", type=float, default=DEFAULT_LR)
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--capture", help="also write a capture dump here")
    p_train.add_argument("--max-tokens", type=int, default=DEFAULT_MAX_TOKENS,
                         help="token budget for the capture pass")
    p_train.add_argument("--loss-csv", help="loss trace path (default <out>.loss.csv)")
    p_train.add_argument("--verbose", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_an = sub.add_parser("analyze", help="compute geometry reports")
    p_an.add_argument("--dump", help="capture dump to analyze")
    p_an.add_argument("--checkpoint", help="checkpoint to re-capture and analyze")
    p_an.add_argument("--corpus", help="corpus for checkpoint re-capture")
    p_an.add_argument("--layer", default="all", help="layer id or 'all'")
    p_an.add_argument("--components", type=int, default=DEFAULT_COMPONENTS)
    p_an.add_argument("--mode", choices=list(PCA_MODES),
                      help="PCA weighting (default: source-dependent)")
    p_an.add_argument("--max-tokens", type=int, default=DEFAULT_MAX_TOKENS)
    p_an.add_argument("--out", required=True, help="report JSON output path")
    p_an.add_argument("--csv", help="directory for CSV plot panels")
    p_an.set_defaults(func=cmd_analyze)

    p_cmp = sub.add_parser("compare", help="compare two geometry reports")
    p_cmp.add_argument("--a", required=True)
    p_cmp.add_argument("--b", required=True)
    p_cmp.add_argument("--out", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_ins = sub.add_parser("inspect", help="describe an MGT1 container")
    p_ins.add_argument("--dump", required=True)
    p_ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ToolkitError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
