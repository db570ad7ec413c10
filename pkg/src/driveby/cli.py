"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from . import io, pipeline
from .errors import ConfigInvalid, DrivebyError, IoFailure
from .vbi_sim import ScenarioConfig


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_scenario_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("scenario overrides")
    for f in fields(ScenarioConfig):
        if f.name == "seed":
            continue
        default = f.default
        if isinstance(default, tuple):
            g.add_argument(_flag(f.name), type=float, nargs=2, metavar=("LO", "HI"), default=None)
        elif f.name == "scenario":
            g.add_argument(_flag(f.name), choices=["direct", "indirect", "driving_test"], default=None)
        else:
            g.add_argument(_flag(f.name), type=type(default), default=None)


def _globals() -> argparse.ArgumentParser:
    # shared by the main parser and every subcommand so flags go anywhere
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    g.add_argument(
        "--set",
        action="append",
        default=argparse.SUPPRESS,
        metavar="SECTION.KEY=VALUE",
        help="override any config field; VALUE is parsed as JSON when possible",
    )
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _globals()
    p = argparse.ArgumentParser(prog="driveby", parents=[common], description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a dataset bundle")
    s.add_argument("--case", choices=sorted(pipeline.CASES), default=None)
    _add_scenario_flags(s)

    f = sub.add_parser("fdd", parents=[common], help="singular spectra and peak report")
    f.add_argument("bundle")
    f.add_argument("--mode", choices=["direct", "indirect"], default="indirect")
    f.add_argument("--band", type=float, nargs=2, metavar=("LO", "HI"), default=None)

    a = sub.add_parser("detect-aae", parents=[common], help="adversarial-autoencoder detection")
    a.add_argument("source", help="dataset bundle or fdd output directory")
    a.add_argument("--epochs", type=int, default=None)

    m = sub.add_parser("detect-mp", parents=[common], help="matrix-profile change detection")
    m.add_argument("source", help="dataset bundle or fdd output directory")
    m.add_argument("--composition", default=None, help="'30' or '20+10'")
    m.add_argument("--trials", type=int, default=None)
    m.add_argument("--subseq-len", type=int, default=None)

    r = sub.add_parser("report", parents=[common], help="merge case-study reports")
    r.add_argument("reports", nargs="+")

    rr = sub.add_parser("rerun", parents=[common], help="replay a run manifest and compare outputs")
    rr.add_argument("manifest")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, items) -> dict:
    for item in items or []:
        if "=" not in item:
            raise ConfigInvalid(f"override {item!r} is not SECTION.KEY=VALUE")
        key, value = item.split("=", 1)
        parts = key.split(".")
        target = doc
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigInvalid(f"config key '{key}' is not inside an object")
        target[parts[-1]] = _parse_value(value)
    return doc


def resolve_config(args) -> tuple[pipeline.RunConfig, set[str]]:
    """Config file, then --set overrides, then dedicated flags."""
    cfg = pipeline.load_config(getattr(args, "config", None))
    doc = apply_overrides(cfg.to_dict(), getattr(args, "set", None))
    explicit = set()
    for item in getattr(args, "set", None) or []:
        key = item.split("=", 1)[0]
        if key.startswith("scenario."):
            explicit.add(key.split(".", 1)[1])
    if getattr(args, "config", None):
        raw = io.read_json(args.config)
        explicit |= set(raw.get("scenario", {}))
    if hasattr(args, "seed"):
        doc["seed"] = args.seed
    if args.command == "simulate":
        if args.case:
            doc["case"] = args.case
        for f in fields(ScenarioConfig):
            v = getattr(args, f.name, None)
            if v is not None and f.name != "seed":
                doc["scenario"][f.name] = list(v) if isinstance(v, list) else v
                explicit.add(f.name)
    elif args.command == "fdd" and args.band:
        doc["fdd"]["band"] = list(args.band)
    elif args.command == "detect-aae" and args.epochs is not None:
        doc["aae"]["epochs"] = args.epochs
    elif args.command == "detect-mp":
        if args.composition is not None:
            doc["mp"]["composition"] = args.composition
        if args.trials is not None:
            doc["mp"]["trials"] = args.trials
        if args.subseq_len is not None:
            doc["mp"]["subseq_len"] = args.subseq_len
    return pipeline.config_from_dict(doc), explicit


def execute(command: str, cfg, out, threads: int, args: dict, inputs: list) -> pipeline.RunManifest:
    if command == "simulate":
        return pipeline.run_simulate(cfg, out, set(args.get("explicit", [])))
    if command == "fdd":
        return pipeline.run_fdd(cfg, inputs[0], out, args.get("mode", "indirect"), threads)
    if command == "detect-aae":
        return pipeline.run_detect_aae(cfg, inputs[0], out, threads)
    if command == "detect-mp":
        return pipeline.run_detect_mp(cfg, inputs[0], out, threads)
    if command == "report":
        return pipeline.run_report(cfg, inputs, out)
    raise ConfigInvalid(f"unknown command {command!r}")


def rerun(manifest_path, out, threads: int = 1) -> dict:
    """Replay a run from its manifest into ``out`` and compare output digests."""
    doc = io.read_json(manifest_path)
    man = pipeline.RunManifest.from_dict(doc)
    cfg = pipeline.config_from_dict(man.config)
    inputs = [v["path"] for _, v in sorted(man.inputs.items(), key=lambda kv: _input_order(kv[0]))]
    new = execute(man.command, cfg, out, threads, man.args, inputs)
    differing = sorted(
        k for k in set(man.outputs) | set(new.outputs) if man.outputs.get(k) != new.outputs.get(k)
    )
    return {"identical": not differing and new.run_id == man.run_id, "differing": differing,
            "run_id": new.run_id}


def _input_order(key: str):
    digits = "".join(ch for ch in key if ch.isdigit())
    return (key.rstrip("0123456789"), int(digits) if digits else 0)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = max(1, getattr(args, "threads", 1))
    try:
        out = getattr(args, "out", None)
        if out is None:
            raise ConfigInvalid("--out is required")
        if args.command == "rerun":
            result = rerun(args.manifest, out, threads)
            print(json.dumps(result, indent=2))
            return 0 if result["identical"] else 3
        cfg, explicit = resolve_config(args)
        run_args, inputs = {}, []
        if args.command == "simulate":
            run_args = {"explicit": sorted(explicit)}
        elif args.command == "fdd":
            run_args, inputs = {"mode": args.mode}, [args.bundle]
        elif args.command in ("detect-aae", "detect-mp"):
            inputs = [args.source]
        elif args.command == "report":
            inputs = list(args.reports)
        man = execute(args.command, cfg, out, threads, run_args, inputs)
        report = Path(out) / pipeline.REPORT_FILE
        if args.command == "fdd" and report.exists():
            print(report.read_text(), end="")
        else:
            print(json.dumps({"run_id": man.run_id, "out": str(out)}))
        return 0
    except DrivebyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IoFailure.exit_code


if __name__ == "__main__":
    sys.exit(main())
