"""Command-line interface: run experiments, check gradients, verify oracles.

Exit codes: 0 on success, 1 on configuration (or usage/IO) errors, 2 when a
run aborts on a numeric failure. The ``METRIC_SURROGATES_OUT`` environment
variable supplies a default output directory; explicit flags win over it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .acceptance import format_result, run_acceptance
from .config import ConfigError, ExperimentConfig, NumericAbort
from .experiments import run

ENV_OUT_DIR = "METRIC_SURROGATES_OUT"


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _resolve_out(explicit: str | None, cfg_out: str | None, default_name: str) -> str | None:
    if explicit:
        return explicit
    if cfg_out:
        return cfg_out
    env_dir = os.environ.get(ENV_OUT_DIR)
    if env_dir:
        return os.path.join(env_dir, default_name)
    return None


def _apply_common(cfg: ExperimentConfig, args) -> ExperimentConfig:
    for text in args.override or []:
        key, value = _parse_override(text)
        cfg = cfg.with_override(key, value)
    if args.seed is not None:
        cfg = cfg.with_override("seed", args.seed)
    return cfg


def _finish_run(cfg: ExperimentConfig, args, default_name: str) -> int:
    out = _resolve_out(args.out, cfg.out, default_name)
    cfg = cfg.with_override("out", out)
    cfg.validate()
    report = run(cfg)
    print(f"kind={cfg.kind} seed={cfg.seed} epochs={report.epochs} "
          f"wall_clock={report.wall_clock_s:.2f}s")
    for name in sorted(report.series):
        vals = report.series[name]
        print(f"  {name}: first={vals[0]:.6g} last={vals[-1]:.6g}")
    if out:
        print(f"report written to {out}.json and {out}.csv")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metric-surrogates",
        description="Training against non-differentiable evaluation metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment described by a JSON config file")
    run_p.add_argument("config", help="path to the config file")

    sub.add_parser("gradcheck", help="finite-difference check of every registered loss")
    sub.add_parser("oracles", help="cross-check exact metrics against independent oracles")
    sub.add_parser("accept", help="run the full acceptance suite (two passes)")

    for p in sub.choices.values():
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--out", default=None, help="output base path for reports")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            try:
                with open(args.config, encoding="utf-8") as fh:
                    raw = json.load(fh)
            except OSError as exc:
                print(f"cannot read config file: {exc}", file=sys.stderr)
                return 1
            except json.JSONDecodeError as exc:
                print(f"config file is not valid JSON: {exc}", file=sys.stderr)
                return 1
            cfg = _apply_common(ExperimentConfig.from_dict(raw), args)
            return _finish_run(cfg, args, f"{cfg.kind}_seed{cfg.seed}")

        if args.command == "gradcheck":
            cfg = _apply_common(ExperimentConfig.from_dict({"kind": "gradcheck"}), args)
            return _finish_run(cfg, args, f"gradcheck_seed{cfg.seed}")

        if args.command == "oracles":
            cfg = _apply_common(ExperimentConfig.from_dict({"kind": "oracle-suite"}), args)
            return _finish_run(cfg, args, f"oracles_seed{cfg.seed}")

        if args.command == "accept":
            seed = args.seed if args.seed is not None else 0
            start = time.perf_counter()
            results, blob = run_acceptance(seed)
            elapsed = time.perf_counter() - start
            for r in results:
                print(format_result(r))
            n_pass = sum(r.passed for r in results)
            print(f"{n_pass}/{len(results)} criteria passed in {elapsed:.1f}s")
            out = _resolve_out(args.out, None, f"accept_seed{seed}")
            if out:
                doc = {
                    "seed": seed,
                    "criteria": [
                        {"number": r.number, "name": r.name, "passed": r.passed,
                         "detail": r.detail}
                        for r in results
                    ],
                    "series": json.loads(blob.decode("utf-8")),
                    "wall_clock_s": elapsed,
                }
                path = f"{out}.json"
                with open(path, "w", encoding="utf-8") as fh:
                    json.dump(doc, fh, sort_keys=True, indent=2)
                    fh.write("\n")
                print(f"acceptance report written to {path}")
            return 0 if n_pass == len(results) else 1

    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
