"""Command-line entry point: ``gen``, ``run`` and ``report``.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import acm as acm_mod
from . import numerics as nx
from .datagen import ConfigError, DataFormatError, SyntheticConfig, generate_synthetic, label_statistics, save_dataset
from .losses import LossConfigError, LossWeights
from .metrics import METRICS
from .model import CheckpointFormatError, ModelConfigError
from .trainer import RESULTS_SCHEMA, RunConfig, RunConfigError, RunResult, run

logger = logging.getLogger("lml_agcn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
DISPLAY_THRESHOLD = 0.7


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    rows: tuple[tuple[str, dict], ...]  # (row name, RunConfig overrides)
    schema: str = RESULTS_SCHEMA
    description: str = ""

    @property
    def is_grid(self) -> bool:
        return len(self.rows) > 1


def _w(l1, l2, l3):
    return {"weights": LossWeights(l1, l2, l3)}


PRESETS: dict[str, ExperimentPreset] = {
    p.name: p
    for p in (
        ExperimentPreset("agcn-default", (("agcn-default", {}),), description="desk-scale tuned AGCN"),
        ExperimentPreset("fine-tuning", (("fine-tuning", _w(1.0, 0.0, 0.0)),), description="lower bound: no distillation, no graph loss"),
        ExperimentPreset("published-best", (("published-best", _w(0.07, 0.93, 1e5)),), description="published best loss weights"),
        ExperimentPreset("intra-only", (("intra-only", {"ablate_inter_task": True}),), description="ACM without inter-task blocks"),
        ExperimentPreset(
            "table2-ablation",
            (("intra-only", {"ablate_inter_task": True}), ("intra+inter", {})),
            description="inter-task relationship ablation",
        ),
        ExperimentPreset(
            "table4-grid",
            (
                ("l0.05-0.95-0", _w(0.05, 0.95, 0.0)),
                ("l0.07-0.93-0", _w(0.07, 0.93, 0.0)),
                ("l0.09-0.91-0", _w(0.09, 0.91, 0.0)),
                ("l0.07-0.93-1e4", _w(0.07, 0.93, 1e4)),
                ("l0.07-0.93-1e5", _w(0.07, 0.93, 1e5)),
                ("l0.07-0.93-1e6", _w(0.07, 0.93, 1e6)),
            ),
            description="loss-weight grid",
        ),
    )
}


# -- logging ---------------------------------------------------------------

def configure_logging() -> None:
    name = os.environ.get("LML_LOG_LEVEL", "error").lower()
    if name not in LOG_LEVELS:
        raise RunConfigError("LML_LOG_LEVEL", f"must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


# -- gen -------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    cfg = SyntheticConfig(
        num_tasks=args.tasks,
        classes_per_task=args.classes_per_task,
        feature_dim=args.feature_dim,
        train_per_task=args.train_per_task,
        test_per_task=args.test_per_task,
        cooccurrence_strength=args.cooc,
        noise_std=args.noise,
        seed=args.seed,
    )
    stream = generate_synthetic(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(stream, args.out)
    print(f"wrote {args.out}")
    print(f"sha256 {digest}")
    print("task\tclasses\ttrain\ttest\tlabels/ex\tin-task\tout-of-task")
    for r in label_statistics(stream):
        print(
            f"{r['task'] + 1}\t{r['classes']}\t{r['train']}\t{r['test']}\t"
            f"{r['labels_per_example']:.2f}\t{r['in_task_positives']}\t{r['out_of_task_positives']}"
        )
    return EXIT_OK


# -- run -------------------------------------------------------------------

def build_configs(args: argparse.Namespace) -> list[tuple[str, RunConfig]]:
    preset = PRESETS.get(args.preset)
    if preset is None:
        raise RunConfigError("preset", f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    lambdas = (args.lambda1, args.lambda2, args.lambda3)
    if preset.is_grid and any(v is not None for v in lambdas):
        raise RunConfigError("lambda", f"preset {preset.name} is a loss-weight grid; --lambda flags would override it")

    base = RunConfig(preset=preset.name, seed=args.seed)
    if args.data:
        base = replace(base, synthetic=None, data_path=str(args.data))
    else:
        base = replace(base, synthetic=replace(SyntheticConfig(), seed=args.seed))
    if args.lr is not None:
        base = replace(base, lr=args.lr)
    if args.batch is not None:
        base = replace(base, batch_size=args.batch)

    out = []
    for row, overrides in preset.rows:
        cfg = replace(base, **overrides)
        if any(v is not None for v in lambdas):
            w = cfg.weights
            cfg = replace(
                cfg,
                weights=replace(
                    w,
                    cls=w.cls if args.lambda1 is None else args.lambda1,
                    dst=w.dst if args.lambda2 is None else args.lambda2,
                    gph=w.gph if args.lambda3 is None else args.lambda3,
                ),
            )
        if args.ablate_inter_task:
            cfg = replace(cfg, ablate_inter_task=True)
        cfg.validate()
        out.append((row, cfg))
    return out


def write_results(result: RunResult, row: str, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    header = dict(result.header(), run=row)
    with open(directory / "results.jsonl", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rep in result.reports:
            for line in rep.rows(row):
                fh.write(json.dumps(line, sort_keys=True) + "\n")

    final = result.final
    with open(directory / "final.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "preset", "metric", "value", "forgetting"])
        for m in METRICS:
            fg = "" if final.forgetting is None else repr(final.forgetting[m])
            w.writerow([row, result.config.preset, m, repr(final.aggregate[m]), fg])

    with open(directory / "series.tsv", "w") as fh:
        fh.write("task\tmetric\tvalue\n")
        for rep in result.reports:
            for m in METRICS:
                fh.write(f"{rep.task + 1}\t{m}\t{rep.aggregate[m]!r}\n")

    for rep, acm in zip(result.reports, result.acm_history):
        acm_mod.write_csv(acm, directory / f"acm_t{rep.task + 1:02d}.csv", result.class_names[: acm.num_seen])

    (directory / "predictions.json").write_text(json.dumps(result.samples, indent=1, sort_keys=True))


def cmd_run(args: argparse.Namespace) -> int:
    configs = build_configs(args)
    out = Path(args.out)
    grid = len(configs) > 1
    for row, cfg in configs:
        target = out / row if grid else out
        logger.info("running %s (preset %s)", row, cfg.preset)
        result = run(cfg, checkpoint_dir=target / "checkpoint", resume=args.resume)
        write_results(result, row, target)
        final = result.final
        fg = final.forgetting or {}
        print(
            f"{row}: mAP {final.aggregate['mAP']:.2f} CF1 {final.aggregate['CF1']:.2f} OF1 {final.aggregate['OF1']:.2f}"
            + (f" | forgetting mAP {fg['mAP']:.2f} CF1 {fg['CF1']:.2f} OF1 {fg['OF1']:.2f}" if fg else "")
        )
    return EXIT_OK


# -- report ----------------------------------------------------------------

@dataclass
class LoadedRun:
    run: str
    preset: str
    header: dict
    rows: list[dict]
    samples: list[dict] = field(default_factory=list)

    @property
    def last_t(self) -> int:
        return max(r["t"] for r in self.rows)

    def final(self, metric: str) -> dict:
        return next(r for r in self.rows if r["t"] == self.last_t and r["metric"] == metric)


def find_result_files(paths: list[str]) -> list[Path]:
    """Accept results files, run directories, or grid directories of runs."""
    found = []
    for p in map(Path, paths):
        if p.is_file():
            hits = [p]
        elif (p / "results.jsonl").exists():
            hits = [p / "results.jsonl"]
        else:
            hits = sorted(p.glob("*/results.jsonl"))
        if not hits:
            raise DataFormatError(f"no results.jsonl under {p}")
        found.extend(hits)
    return found


def load_results(path: Path) -> LoadedRun:
    lines = [json.loads(s) for s in path.read_text().splitlines() if s.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty results file")
    header = lines[0]
    schema = header.get("schema")
    if schema != RESULTS_SCHEMA:
        raise SchemaError(f"{path}: results schema {schema!r} does not match supported {RESULTS_SCHEMA!r}")
    samples_path = path.parent / "predictions.json"
    samples = json.loads(samples_path.read_text()) if samples_path.exists() else []
    return LoadedRun(header.get("run", header["preset"]), header["preset"], header, lines[1:], samples)


def label_listing(runs: list[LoadedRun], threshold: float) -> list[str]:
    out = []
    for r in runs:
        for s in r.samples:
            shown = sorted(((p, n) for n, p in s["probs"].items() if p > threshold), reverse=True)
            labels = ", ".join(f"{n} ({p:.2f})" for p, n in shown) or "-"
            out.append(f"{r.run}\ttask {s['task']} example {s['example']}\tpredicted: {labels}\ttruth: {', '.join(s['truth']) or '-'}")
    return out


def cmd_report(args: argparse.Namespace) -> int:
    if not 0.0 < args.display_threshold < 1.0:
        raise RunConfigError("display-threshold", "must lie in (0, 1)")
    runs = [load_results(p) for p in find_result_files(args.inputs)]
    runs.sort(key=lambda r: (r.preset, r.run))

    table = []
    for r in runs:
        row = {"preset": r.preset, "run": r.run, "dataset_checksum": r.header["dataset_checksum"]}
        for m in METRICS:
            f = r.final(m)
            row[m] = f["value"]
            row[f"{m} forgetting"] = f["forgetting"]
        table.append(row)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["preset", "run"] + [m for m in METRICS] + [f"{m} forgetting" for m in METRICS] + ["dataset_checksum"]
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in table:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in cols})

    text = [f"{'preset':<16}{'run':<18}" + "".join(f"{m:>8}" for m in METRICS) + "".join(f"{'fg ' + m:>9}" for m in METRICS)]
    for row in table:
        fg = "".join(f"{'-':>9}" if row[f"{m} forgetting"] is None else f"{row[f'{m} forgetting']:>9.2f}" for m in METRICS)
        text.append(f"{row['preset']:<16}{row['run']:<18}" + "".join(f"{row[m]:>8.2f}" for m in METRICS) + fg)
    out.with_suffix(".txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))

    with open(out.with_name(out.stem + "_series.tsv"), "w") as fh:
        fh.write("run\ttask\tmetric\tvalue\n")
        for r in runs:
            for line in r.rows:
                fh.write(f"{r.run}\t{line['t']}\t{line['metric']}\t{line['value']!r}\n")

    listing = label_listing(runs, args.display_threshold)
    out.with_name(out.stem + "_labels.txt").write_text("".join(s + "\n" for s in listing))
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lml-agcn", description="Lifelong multi-label classification with an augmented GCN.")
    sub = parser.add_subparsers(dest="command", required=True)

    d = SyntheticConfig()
    g = sub.add_parser("gen", help="generate a synthetic task stream")
    g.add_argument("--tasks", type=int, default=d.num_tasks)
    g.add_argument("--classes-per-task", type=int, default=d.classes_per_task)
    g.add_argument("--feature-dim", type=int, default=d.feature_dim)
    g.add_argument("--train-per-task", type=int, default=d.train_per_task)
    g.add_argument("--test-per-task", type=int, default=d.test_per_task)
    g.add_argument("--cooc", type=float, default=d.cooccurrence_strength)
    g.add_argument("--noise", type=float, default=d.noise_std)
    g.add_argument("--seed", type=int, default=d.seed)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="train and evaluate over a task stream")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset file written by gen")
    src.add_argument("--synthetic", action="store_true", help="generate the default synthetic stream (default)")
    r.add_argument("--preset", default="agcn-default", help=f"one of {', '.join(sorted(PRESETS))}")
    r.add_argument("--lambda1", type=float)
    r.add_argument("--lambda2", type=float)
    r.add_argument("--lambda3", type=float)
    r.add_argument("--lr", type=float)
    r.add_argument("--batch", type=int)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--ablate-inter-task", action="store_true")
    r.add_argument("--out", required=True)
    r.add_argument("--resume", action="store_true", help="continue from the last boundary checkpoint in --out")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="merge result files into a comparison table")
    rep.add_argument("--in", dest="inputs", nargs="+", required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--display-threshold", type=float, default=DISPLAY_THRESHOLD)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging()
        return args.func(args)
    except RunConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, LossConfigError, ModelConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointFormatError, SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except nx.NumericsError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
