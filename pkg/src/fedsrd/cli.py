"""Command-line interface: run simulations, print payload cost tables, inspect payloads.

Exit codes: 0 on success, 1 on runtime errors, 2 on bad arguments or a
bad/missing config file.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, DivergenceError, WireError
from .harness import run_simulation
from .wire import FLAG_DENSE, FLAG_RLE, account, bytes_to_mb, decode


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsrd",
        description="Desk-scale simulator for sparsified federated LoRA fine-tuning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulation and write a metrics CSV")
    run.add_argument("--config", required=True, help="path to a key=value config file")

    acct = sub.add_parser("account", help="print the payload byte cost for a parameter count")
    acct.add_argument("--params", type=int, required=True, help="number of parameters")
    acct.add_argument("--sparsity", type=float, default=0.0, help="fraction of entries dropped")
    acct.add_argument("--dense", action="store_true", help="dense payload (no bitmap, all values)")
    acct.add_argument("--half", action="store_true", help="use half the parameter count")
    acct.add_argument("--bitmap", action="store_true", help="include the position bitmap")

    insp = sub.add_parser("inspect", help="decode a payload file and summarize it")
    insp.add_argument("payload", help="path to an encoded payload file")
    return parser


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not config.output_path:
        config = replace(config, output_path="metrics.csv")
    try:
        metrics = run_simulation(config)
    except DivergenceError as exc:
        print(f"error: {exc} (partial metrics in {config.output_path})", file=sys.stderr)
        return 1
    final = metrics[-1]
    print(f"strategy        {config.strategy}")
    print(f"rounds          {len(metrics)}")
    print(f"final eval loss {final.eval_loss:.9g}")
    print(f"total bytes     {final.cumulative_bytes}")
    print(f"metrics csv     {config.output_path}")
    return 0


def _cmd_account(args) -> int:
    params = args.params
    if params < 0:
        print("error: --params must be >= 0", file=sys.stderr)
        return 2
    if not 0.0 <= args.sparsity <= 1.0:
        print("error: --sparsity must be in [0, 1]", file=sys.stderr)
        return 2
    if args.half:
        params //= 2
    # model the parameter set as a single 1 x params payload
    if args.dense:
        acct = account(1, params, params, dense=True)
        kept = params
    else:
        kept = round(params * (1.0 - args.sparsity))
        acct = account(1, params, kept, include_bitmap=args.bitmap)
    print(f"params   {params}")
    print(f"kept     {kept}")
    print(f"values   {acct.value_bytes} B  ({bytes_to_mb(acct.value_bytes):.3f} MB)")
    print(f"bitmap   {acct.bitmap_bytes} B  ({bytes_to_mb(acct.bitmap_bytes):.3f} MB)")
    print(f"header   {acct.header_bytes} B")
    print(f"total    {acct.total_bytes} B  ({bytes_to_mb(acct.total_bytes):.3f} MB)")
    return 0


def _cmd_inspect(args) -> int:
    try:
        payload = Path(args.payload).read_bytes()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        delta = decode(payload)
    except WireError as exc:
        print(f"error: undecodable payload: {exc}", file=sys.stderr)
        return 1
    flags = payload[5]
    kind = "dense" if flags & FLAG_DENSE else ("rle" if flags & FLAG_RLE else "raw")
    print(f"shape    {delta.rows} x {delta.cols}")
    print(f"nnz      {delta.nnz}")
    print(f"bitmap   {kind}")
    print(f"bytes    {len(payload)}")
    if delta.nnz:
        print(f"values   min {np.min(delta.values):.9g}  max {np.max(delta.values):.9g}  mean {np.mean(delta.values):.9g}")
    return 0


def main(argv=None) -> int:
    """Entry point; returns the process exit code instead of raising SystemExit."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    handlers = {"run": _cmd_run, "account": _cmd_account, "inspect": _cmd_inspect}
    try:
        return handlers[args.command](args)
    except Exception as exc:  # surface everything as exit 1, never a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
