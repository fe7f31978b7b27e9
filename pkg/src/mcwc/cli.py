"""Command-line front end: encode, decode, inspect, diagnose, breakeven, selftest.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import codec, diagnostics
from .config import load_config
from .container import (
    load_activation_summaries,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .errors import McwcError

log = logging.getLogger("mcwc")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="mcwc", description="weight-checkpoint codec")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("-c", "--config", help="TOML config file")
        sp.add_argument("-o", "--output", help="output path")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, default=1,
                        help="decode-side segment workers")

    enc = sub.add_parser("encode", help="compress a checkpoint container")
    common(enc)
    enc.add_argument("input")
    enc.add_argument("--activations", help="activation-summary sidecar container")
    enc.add_argument("--lambda", dest="lambdas", type=float, action="append",
                     help="rate weight; repeat for an operating-point sweep")
    enc.add_argument("--target-bpp", type=float,
                     help="bits/param budget for sweep selection")
    enc.add_argument("--keyframe-interval", type=int)
    enc.add_argument("--no-alignment", action="store_true")
    enc.add_argument("--random-alignment", action="store_true")
    enc.add_argument("--no-predictor", action="store_true")
    enc.add_argument("--fixed-length", action="store_true")
    enc.add_argument("--residual-energy-alignment", action="store_true")

    dec = sub.add_parser("decode", help="reconstruct a checkpoint container")
    common(dec)
    dec.add_argument("input")

    ins = sub.add_parser("inspect", help="print header and rate breakdown")
    ins.add_argument("input")
    ins.add_argument("--dump-model", metavar="NPZ",
                     help="write serialized model arrays to an .npz file")

    dia = sub.add_parser("diagnose", help="alignment predictability report")
    common(dia)
    dia.add_argument("input")
    dia.add_argument("--json", action="store_true", help="also emit JSON")

    brk = sub.add_parser("breakeven", help="deployment amortization")
    brk.add_argument("-c", "--config", help="TOML config with a [scenario] table")
    brk.add_argument("--baseline-gb", type=float)
    brk.add_argument("--compressed-gb", type=float)
    brk.add_argument("--bandwidth-gbps", type=float)
    brk.add_argument("--decode-s", type=float)
    brk.add_argument("--materialize-s", type=float)
    brk.add_argument("--materialize-equals-decode", action="store_true")
    brk.add_argument("--extra-encode-s", type=float)

    sub.add_parser("selftest", help="run the embedded property suite")
    return p


def _load_cfg(args):
    if getattr(args, "config", None):
        cfg, specs, extras = load_config(args.config)
    else:
        cfg, specs, extras = codec.CodecConfig(), [], {}
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.entropy_fit.seed = args.seed
    if getattr(args, "keyframe_interval", None):
        cfg.keyframe_interval = args.keyframe_interval
    for flag, attr in [("no_alignment", "no_alignment"),
                       ("random_alignment", "random_alignment"),
                       ("no_predictor", "no_predictor"),
                       ("fixed_length", "fixed_length_codes"),
                       ("residual_energy_alignment", "residual_energy_alignment")]:
        if getattr(args, flag, False):
            setattr(cfg, attr, True)
    return cfg, specs, extras


def _atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _print_report(report: codec.RateBreakdown):
    comps = report.components()
    fracs = report.fractions_percent()
    print(f"{'component':<24}{'bits':>14}{'fraction %':>12}")
    for key in comps:
        print(f"{key:<24}{comps[key]:>14}{fracs[key]:>12.1f}")
    print(f"{'total':<24}{report.total_bits:>14}{100.0:>12.1f}")
    print(f"model side info (within meta): {report.model_bits} bits")
    print(f"bits/param: {report.bits_per_param:.4f}")


def cmd_encode(args) -> int:
    cfg, specs, _ = _load_cfg(args)
    ckpt = load_checkpoint(args.input)
    acts = load_activation_summaries(args.activations) if args.activations else None
    out_path = args.output or args.input + ".mcwc"
    lambdas = args.lambdas or []
    if len(lambdas) > 1 or args.target_bpp is not None:
        chosen, results = codec.select_operating_point(
            ckpt, specs, cfg, lambdas or [cfg.lam], args.target_bpp, activations=acts)
        for r in results:
            print(f"lambda={r['lambda']:g}  bits/param={r['report'].bits_per_param:.4f}"
                  f"  mse={r['mse']:.3e}")
        data = chosen["bitstream"]
        print(f"selected lambda={chosen['lambda']:g}")
        report = chosen["report"]
    else:
        if lambdas:
            cfg.lam = lambdas[0]
        data = codec.encode_checkpoint(ckpt, specs, cfg, activations=acts)
        report = codec.rate_report(data)
    _atomic_write(out_path, data)
    report_path = out_path + ".report.json"
    with open(report_path, "w") as fh:
        json.dump({"components_bits": report.components(),
                   "fractions_percent": report.fractions_percent(),
                   "model_bits": report.model_bits,
                   "total_bits": report.total_bits,
                   "bits_per_param": report.bits_per_param},
                  fh, indent=2, sort_keys=True)
    print(f"wrote {out_path} ({len(data)} bytes) and {report_path}")
    _print_report(report)
    return 0


def cmd_decode(args) -> int:
    with open(args.input, "rb") as fh:
        data = fh.read()
    out_path = args.output or args.input + ".ckpt"
    t0 = time.perf_counter()
    if args.workers and args.workers > 1:
        ckpt = codec.decode_segments_parallel(data, workers=args.workers)
    else:
        ckpt = codec.decode_checkpoint(data)
    t_dec = time.perf_counter() - t0
    tmp = f"{out_path}.tmp.{os.getpid()}"
    save_checkpoint(ckpt, tmp)
    os.replace(tmp, out_path)
    print(f"wrote {out_path} ({param_count(ckpt)} params, "
          f"{len(ckpt.layers)} layers); decode time {t_dec:.3f}s")
    return 0


def cmd_inspect(args) -> int:
    with open(args.input, "rb") as fh:
        data = fh.read()
    pb = codec.parse_header(data)
    print(f"layers: {pb.n_layers}  keyframe interval: {pb.keyframe_interval}  "
          f"arch id: 0x{pb.arch_id:08X}")
    print(f"segments: {codec.segment_count(pb.n_layers, pb.keyframe_interval)}")
    print(f"block types: {[s.type_id for s in pb.specs]} "
          f"(raw: {[s.type_id for s in pb.specs if s.raw]})")
    print(f"params: {pb.param_count()}")
    flags = {k: v for k, v in pb.flags.items() if v}
    if flags:
        print(f"flags: {flags}")
    _print_report(codec.rate_report(data))
    if args.dump_model:
        np.savez(args.dump_model, **codec.export_model_arrays(data))
        print(f"wrote {args.dump_model}")
    return 0


def cmd_diagnose(args) -> int:
    cfg, specs, _ = _load_cfg(args)
    ckpt = load_checkpoint(args.input)
    acts = None
    extracted, aligned, _ = codec.align_checkpoint(ckpt, specs, cfg, acts)

    def entries(view):
        for (li, tid) in sorted(view):
            if (li - 1, tid) in view:
                yield (li, tid, view[(li - 1, tid)].blocks,
                       view[(li, tid)].blocks, None)

    before = diagnostics.predictability_report(entries(extracted))
    after = diagnostics.predictability_report(entries(aligned))
    out_path = args.output or args.input + ".diagnostics.csv"
    csv_text = "before\n" + before.to_csv() + "after\n" + after.to_csv()
    with open(out_path, "w") as fh:
        fh.write(csv_text)
    print(f"wrote {out_path}")
    agg_b, agg_a = before.aggregate(), after.aggregate()
    print(f"cosine  before {agg_b['cosine_mean']:.3f} -> after {agg_a['cosine_mean']:.3f}")
    print(f"nre     before {agg_b['nre']:.3f} -> after {agg_a['nre']:.3f}")
    if args.json:
        jpath = out_path.rsplit(".", 1)[0] + ".json"
        with open(jpath, "w") as fh:
            json.dump({"before": agg_b, "after": agg_a}, fh, indent=2, sort_keys=True)
        print(f"wrote {jpath}")
    return 0


def cmd_breakeven(args) -> int:
    sc = None
    if args.config:
        _, _, extras = load_config(args.config)
        table = extras.get("scenario")
        if table:
            if table.pop("materialize_equals_decode", False):
                table["materialize_s"] = table["decode_s"]
            sc = diagnostics.DeploymentScenario(**table)
    if sc is None:
        needed = [args.baseline_gb, args.compressed_gb, args.bandwidth_gbps,
                  args.decode_s, args.extra_encode_s]
        if any(v is None for v in needed):
            raise _UsageError("breakeven needs --baseline-gb, --compressed-gb, "
                              "--bandwidth-gbps, --decode-s, --extra-encode-s "
                              "(or a [scenario] config table)")
        mat = args.decode_s if args.materialize_equals_decode else (args.materialize_s or 0.0)
        sc = diagnostics.DeploymentScenario(args.baseline_gb, args.compressed_gb,
                                            args.bandwidth_gbps, args.decode_s,
                                            mat, args.extra_encode_s)
    saving = diagnostics.per_deployment_saving_s(sc)
    print(f"per-deployment saving: {saving:.3f}s")
    try:
        n = diagnostics.break_even(sc)
        print(f"break-even deployments: {n}")
    except McwcError:
        print("break-even deployments: never")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest()
    return 0 if ok else 2


def main(argv=None) -> int:
    level = os.environ.get("MCWC_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise _UsageError("missing subcommand")
        handler = {
            "encode": cmd_encode, "decode": cmd_decode, "inspect": cmd_inspect,
            "diagnose": cmd_diagnose, "breakeven": cmd_breakeven,
            "selftest": cmd_selftest,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except McwcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
