"""Command-line entry point mirroring ExportSpec."""

from __future__ import annotations

import argparse
import sys

from .adapters import UnsupportedArchitectureError
from .export import DEFAULT_BATCH_TOKENS, DEFAULT_SEQ_LEN, ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="moe-export",
        description="Export MoE hidden states, routing weights, and "
                    "weighted-mean expert Jacobians to an MGT1 dump.",
    )
    p.add_argument("--model", required=True,
                   help="HF model path/id, or an .mgt checkpoint")
    p.add_argument("--arch", default="auto",
                   choices=["auto", "hf", "mgt"])
    p.add_argument("--layers", help="comma-separated MoE layer ids (default all)")
    p.add_argument("--corpus", required=True, help="text file to run inference on")
    p.add_argument("--max-tokens", type=int, default=2048)
    p.add_argument("--batch-tokens", type=int, default=DEFAULT_BATCH_TOKENS)
    p.add_argument("--seq-len", type=int, default=DEFAULT_SEQ_LEN)
    p.add_argument("--dtype", default="f4", choices=["f4", "f8"])
    p.add_argument("--tokenizer", default="byte",
                   help="'byte' or an HF tokenizer id")
    p.add_argument("--weighting-mode", default="row-scaled",
                   choices=["row-scaled", "sample-weighted"])
    p.add_argument("--out", required=True, help="dump output path")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    layers = None
    if args.layers:
        layers = [int(x) for x in args.layers.split(",")]
    spec = ExportSpec(
        model=args.model, layers=layers, corpus=args.corpus,
        max_tokens=args.max_tokens, batch_tokens=args.batch_tokens,
        seq_len=args.seq_len, dtype=args.dtype, arch=args.arch,
        tokenizer=args.tokenizer, weighting_mode=args.weighting_mode,
    )
    try:
        header = export(spec, args.out)
    except (FileNotFoundError, ValueError, UnsupportedArchitectureError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except MemoryError:
        print("error: out of memory while materializing a Jacobian; "
              "reduce --max-tokens or export fewer layers", file=sys.stderr)
        return 1
    print(f"dump written to {args.out}")
    print(f"layers {header['layers']}  experts {header['n_experts']}  "
          f"tokens {header['token_count']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
