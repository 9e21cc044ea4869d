"""Command line entry point: ``duallabel {run,sweep,ablate,trace,gen-data}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import experiments as ex
from .datahub import ParseError, SchemaError, gen_synthetic_classification, gen_synthetic_regression, mask_labels, save_csv
from .diffcore import ContractError, NumericError
from .dualtower import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def build_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except OSError as e:
            raise ConfigError(f"--config: cannot read {args.config}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"--config: invalid YAML: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("<root>: expected a mapping")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set: expected KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(doc, key.strip(), yaml.safe_load(raw))
    if args.preset:
        doc["preset"] = args.preset
    if args.seed:
        doc["seeds"] = list(args.seed)
    if getattr(args, "methods", None):
        doc["methods"] = args.methods.split(",")
    return ex.parse_config(doc)


def cmd_run(args) -> int:
    cfg = build_config(args)
    res = ex.run_experiment(cfg, args.out)
    for (method, task, label, metric) in res.table.keys():
        vals = res.table.values((method, task, label, metric))
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        print(f"{method},{task}-{label},{metric},{np.mean(vals):.6f},{sd:.6f}")
    if args.figures and res.histories:
        from .figures import history_figure
        history_figure(res.histories, Path(args.out) / "history.png")
    return EXIT_OK


def _rates(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--rates: expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    rows = ex.sweep_missing_rates(cfg, _rates(args.rates), args.out)
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'sweep.csv'}")
    if args.figures:
        from .figures import sweep_figure
        sweep_figure(rows, Path(args.out) / "sweep.png")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    rows = ex.ablation(cfg, args.out)
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'ablation.csv'}")
    if args.figures:
        from .figures import ablation_figure
        ablation_figure(rows, Path(args.out) / "ablation.png")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = build_config(args)
    report = ex.convergence_report(cfg, args.out)
    for seed, hist in report["iteration_histogram"].items():
        within = sum(c for k, c in hist.items() if k <= 10) / max(sum(hist.values()), 1)
        print(f"seed {seed}: {within:.1%} of samples stopped within 10 iterations")
    if args.figures:
        from .figures import convergence_figure
        convergence_figure(report["rows"], Path(args.out) / "convergence.png")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.n < 1 or args.d < 2:
        raise ConfigError("--n must be >= 1 and --d >= 2")
    seed = args.seed[0] if args.seed else 0
    gen = gen_synthetic_classification if args.kind == "classification" else gen_synthetic_regression
    data, _ = gen(args.n, args.d, seed)
    if args.mask:
        data = mask_labels(data, args.mask, args.mask, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(data, out)
    print(f"wrote {len(data)} samples to {out}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duallabel", description="Dual-label learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_default="results"):
        sp.add_argument("--config", metavar="PATH", help="YAML experiment document")
        sp.add_argument("--seed", type=int, action="append", metavar="N", help="seed (repeatable)")
        sp.add_argument("--out", metavar="DIR", default=out_default, help="output directory")
        sp.add_argument("--preset", choices=sorted(ex.PRESETS))
        sp.add_argument("--methods", help="comma-separated subset of " + ",".join(ex.METHODS))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.lr=0.1")
        sp.add_argument("--figures", action="store_true", help="also render PNG figures next to the CSVs")

    common(sub.add_parser("run", help="train and evaluate the requested methods"))
    sp = sub.add_parser("sweep", help="missing-rate sensitivity")
    common(sp)
    sp.add_argument("--rates", default="0.1,0.2,0.3,0.4,0.5,0.6")
    common(sub.add_parser("ablate", help="training-mode ablation (classification presets)"))
    common(sub.add_parser("trace", help="alternate-inference convergence report"))

    gp = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    gp.add_argument("--kind", choices=("regression", "classification"), default="regression")
    gp.add_argument("--n", type=int, default=1000)
    gp.add_argument("--d", type=int, default=10)
    gp.add_argument("--mask", type=float, default=0.0, help="missing rate applied to both labels")
    gp.add_argument("--seed", type=int, action="append", metavar="N")
    gp.add_argument("--out", metavar="PATH", default="data.csv")
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "ablate": cmd_ablate, "trace": cmd_trace, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, SchemaError, ParseError, ContractError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
