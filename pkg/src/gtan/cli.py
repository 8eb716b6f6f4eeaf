"""Command-line entry point: ``gtan <subcommand> [flags]``.

Settings resolve in three layers: built-in defaults, then a ``key=value``
config file (``--config``), then explicit flags. Every run prints the
resolved settings, and every artifact it writes carries the command line
and seed in its header.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import shlex
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import IngestError, Preprocessor, SchemaError, TransactionTable, ingest_csv, write_csv
from .experiments import (Dataset, ExperimentPlan, aggregates_csv, ablate, format_table, report_csv,
                          sweep_csv, sweep_ratio, temporal_boundary)
from .graph import GraphError, TemporalGraph, build_graph_from_table, load_graph, save_graph
from .metrics import UndefinedMetricError, evaluate_scores
from .model import GtanConfig, GtanModel, FeatureLayout, load_checkpoint, save_checkpoint
from .synth import SynthConfig, SynthConfigError, describe, generate
from .train import TrainConfig, TrainingDiverged, UsageError, infer, temporal_validation_split, train, write_history

log = logging.getLogger(__name__)

COMMANDS = ("generate", "build-graph", "train", "evaluate", "ablate", "sweep", "predict", "describe")


class CliUsageError(Exception):
    """Bad invocation: reported with the usage text and exit status 2."""


@dataclass
class Protocol:
    split: str = "temporal"
    train_fraction: float = 0.7
    ratio: float = 0.8
    repetitions: int = 10


@dataclass
class Settings:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: GtanConfig = field(default_factory=GtanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: Protocol = field(default_factory=Protocol)

    def lines(self) -> list[str]:
        out = []
        for section in ("synth", "model", "train", "protocol"):
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                out.append(f"{section}.{f.name}={getattr(v, 'value', v)}")
        return out


_SECTIONS = {"synth": SynthConfig, "model": GtanConfig, "train": TrainConfig, "protocol": Protocol}

# flag dest -> (section, field)
_FLAG_FIELDS = {
    "hidden_dim": ("model", "hidden_dim"),
    "heads": ("model", "heads"),
    "layers": ("model", "layers"),
    "max_edges": ("model", "max_edges"),
    "variant": ("model", "variant"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "epochs": ("train", "epochs"),
}


def _convert(section: str, name: str, text: str):
    ftype = {f.name: f.type for f in fields(_SECTIONS[section])}[name]
    ftype = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if "int" in ftype and "float" not in ftype:
            return int(text)
        if "float" in ftype:
            return float(text)
    except ValueError:
        raise CliUsageError(f"{section}.{name}: cannot parse {text!r}") from None
    return text


def parse_config_text(text: str, origin: str = "<config>") -> dict[tuple[str, str], object]:
    """Parse ``key=value`` lines; keys may be bare field names or ``section.field``.

    A bare key applies to every section that has that field (``seed`` sets
    both the generator and the trainer seed).
    """
    out: dict[tuple[str, str], object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliUsageError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if "." in key:
            section, name = key.split(".", 1)
            targets = [(section, name)] if section in _SECTIONS and name in _field_names(section) else []
        else:
            targets = [(s, key) for s in _SECTIONS if key in _field_names(s)]
        if not targets:
            raise CliUsageError(f"{origin}:{lineno}: unknown setting {key!r}")
        for section, name in targets:
            out[(section, name)] = _convert(section, name, value)
    return out


def _field_names(section: str) -> set[str]:
    return {f.name for f in fields(_SECTIONS[section])}


def resolve_settings(args: argparse.Namespace) -> Settings:
    values: dict[tuple[str, str], object] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise CliUsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    for dest, target in _FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[target] = v
    if args.seed is not None:
        values[("synth", "seed")] = args.seed
        values[("train", "seed")] = args.seed
    per_section: dict[str, dict] = {s: {} for s in _SECTIONS}
    for (section, name), v in values.items():
        per_section[section][name] = v
    try:
        return Settings(**{s: cls(**per_section[s]) for s, cls in _SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise CliUsageError(str(exc)) from None


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtan", description="Gated temporal attention fraud detection.")
    p.add_argument("command", choices=COMMANDS, help="subcommand to run")
    p.add_argument("--data", help="transaction CSV")
    p.add_argument("--truth", help="ground-truth label CSV (txn_id,label) for evaluation")
    p.add_argument("--graph", help="prebuilt graph binary (else built from --data)")
    p.add_argument("--checkpoint", help="model checkpoint to read")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--max-edges", type=int, dest="max_edges")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--variant", choices=("full", "no-attention", "no-risk"))
    p.add_argument("--out", help="output path")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    return p


# ---------------------------------------------------------------- artifact helpers


class Run:
    """One invocation: resolved settings plus provenance for artifact headers."""

    def __init__(self, argv: Sequence[str], args: argparse.Namespace, settings: Settings, stdout):
        self.argv = list(argv)
        self.args = args
        self.settings = settings
        self.stdout = stdout

    @property
    def seed(self) -> int:
        if self.args.command == "generate":
            return self.settings.synth.seed
        return self.settings.train.seed

    def provenance(self) -> list[str]:
        return [f"command: gtan {shlex.join(self.argv)}", f"seed: {self.seed}"]

    def say(self, text: str) -> None:
        print(text, file=self.stdout)

    def progress(self, text: str) -> None:
        if not self.args.quiet:
            self.say(text)

    def out_path(self, default: str) -> Path:
        return Path(self.args.out or default)

    def require(self, name: str) -> Path:
        value = getattr(self.args, name)
        if value is None:
            raise CliUsageError(f"{self.args.command} needs --{name}")
        path = Path(value)
        if not path.is_file():
            raise CliUsageError(f"--{name}: file not found: {path}")
        return path

    def optional(self, name: str) -> Path | None:
        return None if getattr(self.args, name) is None else self.require(name)

    def write_text(self, path: Path, text: str) -> None:
        path.write_text(text, encoding="utf-8")
        self.say(f"wrote {path}")


def _csv_text(header, rows, comments) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_truth(path: Path, table: TransactionTable) -> np.ndarray:
    """Ground truth aligned to ``table`` rows; rows absent from the file get -1."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        reader = csv.DictReader(lines)
        if reader.fieldnames is None or not {"txn_id", "label"} <= set(reader.fieldnames):
            raise CliUsageError(f"{path}: truth file needs txn_id and label columns")
        pairs = [(int(r["txn_id"]), int(r["label"])) for r in reader]
    ids = np.array([p[0] for p in pairs], dtype=np.int64)
    labels = np.array([p[1] for p in pairs], dtype=np.int8)
    order = np.argsort(ids)
    ids, labels = ids[order], labels[order]
    pos = np.clip(np.searchsorted(ids, table.txn_id), 0, max(len(ids) - 1, 0))
    found = (ids[pos] == table.txn_id) if len(ids) else np.zeros(len(table), bool)
    return np.where(found, labels[pos] if len(ids) else -1, -1).astype(np.int8)


def _load_dataset(run: Run, need_truth: bool = False) -> Dataset:
    result = ingest_csv(run.require("data"))
    if result.errors:
        run.say(f"skipped {len(result.errors)} malformed row(s)")
    table = result.table
    truth = None
    truth_path = run.optional("truth")
    if truth_path is not None:
        truth = read_truth(truth_path, table)
    elif need_truth:
        if np.any(table.label < 0):
            raise CliUsageError(f"{run.args.command} needs fully labeled data or --truth")
        truth = table.label.copy()
    return Dataset(table, truth)


def _load_graph(run: Run, table: TransactionTable, max_edges: int) -> TemporalGraph:
    path = run.optional("graph")
    if path is None:
        return build_graph_from_table(table, max_edges)
    graph = load_graph(path)
    if not np.array_equal(graph.txn_id, table.txn_id):
        raise CliUsageError(f"--graph {path} was built from different data")
    if graph.max_edges != max_edges:
        raise CliUsageError(f"--graph {path} has max_edges={graph.max_edges}, settings ask for {max_edges}")
    return graph


# ---------------------------------------------------------------- subcommands


def cmd_generate(run: Run) -> None:
    cfg = run.settings.synth
    ds = generate(cfg)
    out = run.out_path("transactions.csv")
    comments = run.provenance() + [f"synth: {k}={v}" for k, v in cfg.to_dict().items()]
    write_csv(ds.table, out, comments)
    run.say(f"wrote {out}")
    truth_path = out.with_name(out.stem + ".truth.csv")
    rows = [[int(t), int(y), p] for t, y, p in zip(ds.table.txn_id, ds.truth, ds.pattern)]
    run.write_text(truth_path, _csv_text(["txn_id", "label", "pattern"], rows, run.provenance()))


def cmd_build_graph(run: Run) -> None:
    table = ingest_csv(run.require("data")).table
    k = run.settings.model.max_edges
    graph = build_graph_from_table(table, k)
    out = run.out_path("graph.bin")
    save_graph(graph, out, "\n".join(run.provenance()))
    run.say(f"wrote {out}: {graph.n_nodes} nodes, {graph.n_temporal_edges} temporal edges (k={k})")


def cmd_train(run: Run) -> None:
    s = run.settings
    dataset = _load_dataset(run)
    table = dataset.table
    boundary = temporal_boundary(table.timestamp, s.protocol.train_fraction)
    early = table.timestamp < boundary
    train_ids = np.flatnonzero(early & (table.label >= 0))
    if train_ids.size < 2:
        raise UsageError("need at least two labeled training-period rows")
    pre = Preprocessor.fit(table, np.flatnonzero(early))
    features = pre.transform(table, dtype=np.dtype(s.model.dtype))
    graph = _load_graph(run, table, s.model.max_edges)
    fit_ids, val_ids = temporal_validation_split(table.timestamp, train_ids, s.train.val_fraction)
    labels = np.where(early, table.label, -1).astype(np.int8)
    model = GtanModel(s.model, FeatureLayout.of(features), seed=s.train.seed)
    run.say(f"training on {fit_ids.size} centers, validating on {val_ids.size}, {model.n_parameters()} parameters")

    def progress(h):
        run.progress(f"epoch {h['epoch']:3d}  loss {h['train_loss']:.5f}  val_auc {h['val_auc']:.4f}  "
                     f"({h['seconds']:.1f}s)")

    try:
        result = train(model, graph, features, labels, fit_ids, val_ids, s.train, progress=progress)
    except TrainingDiverged as exc:
        result = exc.result
        run.say(f"warning: {exc}; keeping the last good parameters")
    out = run.out_path("model.ckpt")
    extra = {"preprocessor": pre.to_dict(), "boundary": boundary, "train_fraction": s.protocol.train_fraction,
             "train": s.train.to_dict(), "best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc,
             "provenance": run.provenance()}
    save_checkpoint(out, model, extra)
    run.say(f"wrote {out} (best epoch {result.best_epoch}, val_auc {result.best_val_auc:.4f})")
    hist = out.with_name(out.stem + ".history.csv")
    write_history(result, hist, run.provenance())
    run.say(f"wrote {hist}")


def _restore(run: Run, table: TransactionTable):
    model, extra = load_checkpoint(run.require("checkpoint"))
    pre = Preprocessor.from_dict(extra["preprocessor"])
    features = pre.transform(table, dtype=np.dtype(model.config.dtype))
    graph = _load_graph(run, table, model.config.max_edges)
    return model, extra, features, graph


def cmd_evaluate(run: Run) -> None:
    dataset = _load_dataset(run)
    table = dataset.table
    model, extra, features, graph = _restore(run, table)
    early = table.timestamp < float(extra["boundary"])
    truth = dataset.truth if dataset.truth is not None else table.label
    test = np.flatnonzero(~early & (truth >= 0))
    if test.size == 0:
        raise UsageError("no labeled rows after the training boundary to evaluate")
    observed = np.where(early, table.label, -1).astype(np.int8)
    scores = infer(model, graph, features, observed, test, run.settings.train.eval_batch_size)
    report = evaluate_scores(scores, truth[test])
    out = run.out_path("metrics.csv")
    run.write_text(out, report_csv(report, model.config.variant.display, run.provenance()))
    run.say(format_table([{"name": model.config.variant.display, **report.to_dict()}],
                         ["name", "auc", "f1_macro", "ap", "tp", "fp", "fn", "tn", "n_evaluated"]))


def cmd_predict(run: Run) -> None:
    table = ingest_csv(run.require("data")).table
    model, _, features, graph = _restore(run, table)
    observed = table.label.astype(np.int8)
    query = np.flatnonzero(observed < 0)
    scores = infer(model, graph, features, observed, query, run.settings.train.eval_batch_size)
    order = np.argsort(table.txn_id[query])
    rows = [[int(table.txn_id[query[i]]), repr(float(scores[i]))] for i in order]
    out = run.out_path("scores.csv")
    run.write_text(out, _csv_text(["txn_id", "score"], rows, run.provenance()))


def _plan(run: Run) -> ExperimentPlan:
    p = run.settings.protocol
    return ExperimentPlan(split=p.split, train_fraction=p.train_fraction, ratio=p.ratio, repetitions=p.repetitions)


def cmd_ablate(run: Run) -> None:
    s = run.settings
    dataset = _load_dataset(run)
    plan = _plan(run)
    seeds = plan.seed_list(s.train.seed)

    def progress(label, seed, report):
        run.progress(f"{label:6s} seed {seed}: auc {report.auc:.4f}  f1 {report.f1_macro:.4f}  ap {report.ap:.4f}")

    rows = ablate(dataset, s.model, s.train, seeds, plan, progress=progress)
    out = run.out_path("ablation.csv")
    run.write_text(out, aggregates_csv(rows, run.provenance()))
    run.say(format_table([r.row() for r in rows], ["name", "runs", "auc_mean", "auc_std", "f1_macro_mean", "ap_mean"]))


def cmd_sweep(run: Run) -> None:
    s = run.settings
    dataset = _load_dataset(run, need_truth=True)

    def progress(point):
        run.progress(f"ratio {point.ratio:.1f}: auc {point.report.auc:.4f}  f1 {point.report.f1_macro:.4f}  "
                     f"ap {point.report.ap:.4f}")

    points = sweep_ratio(dataset, s.model, s.train, seed=s.train.seed, progress=progress)
    out = run.out_path("sweep.csv")
    run.write_text(out, sweep_csv(points, run.provenance()))


def cmd_describe(run: Run) -> None:
    # observed labels, as in a fraud-dataset statistics table
    table = ingest_csv(run.require("data")).table
    stats = describe(table, run.settings.model.max_edges)
    run.say(format_table([stats], list(stats)))
    if run.args.out:
        run.write_text(Path(run.args.out), _csv_text(list(stats), [list(stats.values())], run.provenance()))


HANDLERS = {
    "generate": cmd_generate, "build-graph": cmd_build_graph, "train": cmd_train, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "predict": cmd_predict, "describe": cmd_describe,
}


def main(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve_settings(args)
        run = Run(argv, args, settings, stdout)
        for line in run.provenance() + settings.lines():
            run.say(f"# {line}")
        HANDLERS[args.command](run)
    except CliUsageError as exc:
        parser.print_usage(stderr)
        print(f"gtan {args.command}: error: {exc}", file=stderr)
        return 2
    except (UsageError, SchemaError, IngestError, GraphError, SynthConfigError, UndefinedMetricError,
            ValueError, OSError) as exc:
        print(f"gtan {args.command}: error: {exc}", file=stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
