"""``cams`` command line: train, eval, count-params, gradcheck, bench-scan, synth-data.

Exit codes: 0 success, 2 validation failure, 3 acceptance-check failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path


EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 2, 3

log = logging.getLogger("camsnet")


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    return int(os.environ.get("CAMS_SEED", "0"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path, overrides: list[str]):
    """Read a JSON RunConfig and apply ``--key value`` overrides (network fields included)."""
    from .network import NetworkConfig
    from .train import RunConfig

    data: dict = {}
    if path:
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    run_fields = {f.name for f in fields(RunConfig)}
    net_fields = {f.name for f in fields(NetworkConfig)}
    net = dict(data.get("network", {}))
    it = iter(overrides)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"expected --key value, got {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            raw = next(it, None)
            if raw is None:
                raise ConfigError(f"--{key} needs a value")
        key = key.removeprefix("network.")
        value = _parse_value(raw)
        if key in run_fields and key != "network":
            data[key] = value
        elif key in net_fields:
            net[key] = value
        else:
            raise ConfigError(f"unknown config field {key!r}")
    if net:
        data["network"] = net
    try:
        return RunConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or '<defaults>'}: {e}") from None


# -- subcommands -----------------------------------------------------------------

def cmd_synth_data(args) -> int:
    from .data import PhantomSpec, synth_dataset

    spec = PhantomSpec(size=args.size, seed=args.seed, noise_sigma=args.noise)
    out = synth_dataset(spec, args.count, args.out)
    print(f"wrote {args.count} samples to {out}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    from .data import load_dataset
    from .train import train

    run = load_run_config(args.config, extra)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    val = run.val_fold
    folds_train = None if val is None else {f for f in range(5) if f != val}
    samples = load_dataset(args.data, folds_train)
    eval_samples = load_dataset(args.data, {val}) if val is not None else None
    result = train(run, samples, args.out, eval_samples, progress=True)
    final = result.evals[-1] if result.evals else {}
    print(json.dumps({"steps": len(result.records), "final_loss": result.losses[-1], "eval": final}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .network import NetworkConfig, load_checkpoint
    from .train import evaluate_net

    expected = None
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        expected = NetworkConfig.from_dict(cfg.get("network", cfg))
    net = load_checkpoint(args.checkpoint, expected)
    folds = None if args.fold is None else {args.fold}
    samples = load_dataset(args.data, folds)
    if not samples:
        print("no samples selected", file=sys.stderr)
        return EXIT_INVALID
    rep = evaluate_net(net, samples, args.spacing, args.boundary)
    print(rep.to_text())
    if args.json:
        Path(args.json).write_text(rep.to_json())
    return EXIT_OK


def cmd_count_params(args) -> int:
    from .blocks import (PAPER_TARGETS, LIFMBlock, LIFMConfig, NCMambaBlock, count_params,
                         reconcile_layout, reference_configs, residual_table)
    from .network import FULL_CONFIG, PAPER_TOTAL_M, CAMSNet, NetworkConfig, network_param_report
    from .params import ParamStore, format_table

    ok = True
    payload: dict = {}
    refs = list(PAPER_TARGETS) if args.reference == "all" else ([args.reference] if args.reference else [])
    if refs:
        best = reconcile_layout()[0]
        cfgs = reference_configs(best.layout)
        payload["layout"] = best.as_dict()["layout"]
        for key in refs:
            store = ParamStore()
            cfg = cfgs[key]
            block = (LIFMBlock if isinstance(cfg, LIFMConfig) else NCMambaBlock)(store, key, cfg)
            rows, total = count_params(block)
            passed = total == PAPER_TARGETS[key]
            ok &= passed
            if not args.json:
                print(format_table(rows))
                print(f"{key}: {total:,} (target {PAPER_TARGETS[key]:,})  {'PASS' if passed else 'FAIL'}\n")
            payload[key] = {"total": total, "target": PAPER_TARGETS[key], "passed": passed,
                            "table": [[n, list(s), c] for n, s, c in rows]}
        if not args.json:
            print(residual_table(best))
    if args.full or args.config:
        cfg = FULL_CONFIG
        if args.config:
            raw = json.loads(Path(args.config).read_text())
            cfg = NetworkConfig.from_dict(raw.get("network", raw))
        if args.input:
            cfg = replace(cfg, height=args.input, width=args.input)
        target = PAPER_TOTAL_M if args.full else None
        net = CAMSNet(cfg) if args.build else None
        rep = network_param_report(cfg, net, target, sweep=(128, 192, 256, 320, 352, 384) if args.full else ())
        if not args.json:
            print(rep.to_text())
        payload["network"] = rep.to_dict()
        if rep.passed is False:
            ok = False
    if not refs and not (args.full or args.config):
        print("nothing to count: pass --reference, --full or --config", file=sys.stderr)
        return EXIT_INVALID
    if args.json:
        print(json.dumps(payload, indent=2))
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    from .checks import GRADCHECKS, run_gradcheck

    names = [args.name] if args.name else list(GRADCHECKS[args.scope])
    worst_ok = True
    rows = []
    for name in names:
        report, tol = run_gradcheck(args.scope, name, seed=args.seed, max_entries=args.max_entries)
        for group, err in report.items():
            passed = err < tol
            worst_ok &= passed
            rows.append({"scope": args.scope, "name": name, "group": group, "max_rel_error": err,
                         "tolerance": tol, "passed": passed})
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        w = max(len(f"{r['name']}/{r['group']}") for r in rows)
        for r in rows:
            print(f"{r['name'] + '/' + r['group']:<{w}}  {r['max_rel_error']:.3e}  "
                  f"(< {r['tolerance']:.0e})  {'PASS' if r['passed'] else 'FAIL'}")
    return EXIT_OK if worst_ok else EXIT_CHECK


def cmd_bench_scan(args) -> int:
    from .checks import bench_scan, loglog_slope

    lengths = [int(x) for x in args.lengths.split(",")]
    if lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        print("lengths must be strictly ascending", file=sys.stderr)
        return EXIT_INVALID
    rows = bench_scan(lengths, args.repeats, d_inner=args.d_inner, d_state=args.d_state,
                      batch=args.batch, kernel=args.kernel, seed=args.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["L", "mean_ms", "std_ms", "median_ms"])
    for r in rows:
        writer.writerow([r["L"], f"{r['mean_ms']:.4f}", f"{r['std_ms']:.4f}", f"{r['median_ms']:.4f}"])
    text = buf.getvalue()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    slope = loglog_slope([r["L"] for r in rows], [r["median_ms"] for r in rows])
    print(f"log-log slope: {slope:.3f}")
    if args.check and not (0.9 <= slope <= 1.2):
        return EXIT_CHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cams", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train on a synthetic dataset; extra --key value pairs override the config")
    s.add_argument("--config", help="JSON RunConfig")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("eval", help="per-class Dice / HD of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--fold", type=int, default=None)
    s.add_argument("--config", help="expected network config; mismatch aborts")
    s.add_argument("--spacing", type=float, default=1.0)
    s.add_argument("--boundary", action="store_true", help="HD on boundary pixels only")
    s.add_argument("--json", help="also write the report as JSON")

    s = sub.add_parser("count-params", help="parameter accounting against the published counts")
    s.add_argument("--reference", choices=["nc-mamba", "factorized", "lifm", "all"])
    s.add_argument("--full", action="store_true", help="full network vs the published total")
    s.add_argument("--config", help="network or run config JSON to count")
    s.add_argument("--input", type=int, help="input size (square)")
    s.add_argument("--build", action="store_true", help="count a built network instead of the closed form")
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    s.add_argument("--scope", choices=["op", "block", "network"], default="op")
    s.add_argument("--name", help="single op/block to check (default: all in scope)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--max-entries", type=int, default=None)
    s.add_argument("--json", action="store_true")

    s = sub.add_parser("bench-scan", help="time the scan over sequence lengths")
    s.add_argument("--lengths", default="1024,2048,4096,8192")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--d-inner", type=int, default=16)
    s.add_argument("--d-state", type=int, default=16)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--kernel", choices=["sequential", "chunked"], default="chunked")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", help="also write the CSV here")
    s.add_argument("--check", action="store_true", help="exit 3 unless the slope lies in [0.9, 1.2]")

    s = sub.add_parser("synth-data", help="write phantom images/labels and manifest.jsonl")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if extra and args.command != "train":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    if getattr(args, "seed", None) is None and args.command != "train":
        args.seed = default_seed()
    try:
        if args.command == "train":
            if args.seed is None and "CAMS_SEED" in os.environ:
                args.seed = default_seed()
            return cmd_train(args, extra)
        return {
            "eval": cmd_eval,
            "count-params": cmd_count_params,
            "gradcheck": cmd_gradcheck,
            "bench-scan": cmd_bench_scan,
            "synth-data": cmd_synth_data,
        }[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
