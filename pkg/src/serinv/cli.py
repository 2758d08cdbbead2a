"""Command-line entry point: data generation, training, evaluation, probing and the full comparison."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import ContractViolation
from .data import (Dataset, SerfError, SplitContractError, SplitManifest, SyntheticSpec, SyntheticSpecError,
                   LayoutError, generate_synthetic, make_cv_folds, pseudo_sessions, read_serf,
                   read_speaker_metadata, split_by_speaker, write_serf, write_speaker_metadata)
from .evaluation import EvaluationError, evaluate, pca_project, speaker_probe, write_confusion_csv, \
    write_projection_csv
from .experiment import STRATEGIES, ExperimentPlan, run_experiment, summarize, summary_json, \
    write_cells_csv, write_summary_csv
from .gradcheck import run_suite
from .layers import TooShortUtteranceError
from .model import PRESETS, CheckpointError, EmbeddingRecord, ModelConfig, embed, load_checkpoint, preset, \
    save_checkpoint
from .training import Strategy, TrainConfig, TrainingError, substream, train

log = logging.getLogger("serinv")

OUTPUT_ENV = "SERINV_OUTPUT_DIR"
DEFAULT_OUTPUT = "serinv_out"
DEFAULT_SPEAKER_COUNTS = (25, 5, 5)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config
def _reject_unknown(obj: dict, allowed, where: str) -> None:
    extra = set(obj) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _expect_dict(obj, where: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    return obj


def model_from_json(obj) -> ModelConfig:
    """A preset name, or a literal object optionally based on ``"preset"``."""
    if isinstance(obj, str):
        return preset(obj)
    obj = dict(_expect_dict(obj, "model"))
    base = preset(obj.pop("preset")) if "preset" in obj else ModelConfig()
    merged = {**base.to_json(), **obj}
    if "regularization" in obj:
        _expect_dict(obj["regularization"], "model.regularization")
        merged["regularization"] = {**base.to_json()["regularization"], **obj["regularization"]}
    return ModelConfig.from_json(merged)


def train_from_json(obj) -> TrainConfig:
    obj = _expect_dict(obj, "train")
    _reject_unknown(obj, TrainConfig.__dataclass_fields__, "train")
    return TrainConfig(**obj)


def synthetic_from_json(obj) -> SyntheticSpec:
    obj = dict(_expect_dict(obj, "synthetic"))
    _reject_unknown(obj, SyntheticSpec.__dataclass_fields__, "synthetic")
    for key in ("length_range", "speaker_channel_gain_range"):
        if key in obj:
            obj[key] = tuple(obj[key])
    return SyntheticSpec(**obj)


@dataclass
class ExperimentConfig:
    """Everything one run needs; parsed from JSON and validated before any work starts."""
    model: ModelConfig = field(default_factory=lambda: preset("small"))
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data_path: str | None = None
    split_path: str | None = None
    output_dir: str | None = None
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[Strategy, ...] = STRATEGIES
    speaker_counts: tuple[int, int, int] = DEFAULT_SPEAKER_COUNTS
    workers: int = 1

    TOP_KEYS = ("model", "train", "data", "output_dir", "experiment")

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = _expect_dict(obj, "config")
        _reject_unknown(obj, cls.TOP_KEYS, "config")
        cfg = cls()
        if "model" in obj:
            cfg.model = model_from_json(obj["model"])
        if "train" in obj:
            cfg.train = train_from_json(obj["train"])
        data = _expect_dict(obj.get("data", {}), "data")
        _reject_unknown(data, ("synthetic", "serf", "split"), "data")
        if "synthetic" in data:
            cfg.synthetic = synthetic_from_json(data["synthetic"])
        cfg.data_path, cfg.split_path = data.get("serf"), data.get("split")
        cfg.output_dir = obj.get("output_dir")
        exp = _expect_dict(obj.get("experiment", {}), "experiment")
        _reject_unknown(exp, ("seeds", "strategies", "speaker_counts", "workers"), "experiment")
        if "seeds" in exp:
            cfg.seeds = tuple(int(s) for s in exp["seeds"])
        if "strategies" in exp:
            cfg.strategies = tuple(Strategy(s) for s in exp["strategies"])
        if "speaker_counts" in exp:
            counts = tuple(int(c) for c in exp["speaker_counts"])
            if len(counts) != 3 or min(counts) < 1:
                raise ConfigError("experiment.speaker_counts must be three positive integers")
            cfg.speaker_counts = counts
        cfg.workers = int(exp.get("workers", cfg.workers))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.train.validate()
        self.synthetic.validate(self.model.min_length)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_json(self) -> dict:
        data = {"synthetic": asdict(self.synthetic)}
        if self.data_path:
            data["serf"] = self.data_path
        if self.split_path:
            data["split"] = self.split_path
        return {"model": self.model.to_json(), "train": self.train.to_json(), "data": data,
                "output_dir": self.output_dir,
                "experiment": {"seeds": list(self.seeds), "strategies": [s.value for s in self.strategies],
                               "speaker_counts": list(self.speaker_counts), "workers": self.workers}}


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_json(obj)


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Command-line flags win over the config file."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("preset") is not None:
        cfg.model = preset(args.preset)
    train_over = {k: get(k) for k in ("strategy", "learning_rate", "epochs", "batch_size", "grl_lambda",
                                      "lambda_schedule", "cgt_epsilon", "cgt_alpha", "seed")
                  if get(k) is not None}
    if train_over:
        cfg.train = replace(cfg.train, **train_over)
    if get("data") is not None:
        cfg.data_path = args.data
    if get("split") is not None:
        cfg.split_path = args.split
    if get("seeds") is not None:
        cfg.seeds = tuple(args.seeds)
    if get("strategies") is not None:
        cfg.strategies = tuple(Strategy(s) for s in args.strategies)
    if get("workers") is not None:
        cfg.workers = args.workers
    if get("output_dir") is not None:
        cfg.output_dir = args.output_dir
    cfg.validate()
    return cfg


def output_dir(explicit: str | None) -> Path:
    return Path(explicit or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


# ------------------------------------------------------------------ output
@contextlib.contextmanager
def atomic_path(path: Path):
    """Yield a temp path beside ``path``; rename onto ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(obj, path: Path) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def write_embeddings_csv(records: Sequence[EmbeddingRecord], dataset: Dataset, path: Path) -> None:
    dim = len(records[0].embedding) if records else 0
    with atomic_path(path) as tmp, open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "emotion", "speaker"] + [f"e{i}" for i in range(dim)])
        for r in records:
            w.writerow([r.id, dataset.emotion_names[r.emotion], dataset.speaker_ids[r.speaker]]
                       + [repr(float(v)) for v in r.embedding])


def read_embeddings_csv(path) -> tuple[list[EmbeddingRecord], list[str], list[str]]:
    """Records with labels re-indexed by sorted name; also returns both name tables."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["id", "emotion", "speaker"]:
        raise ConfigError(f"{path}: not an embeddings CSV (expected header id,emotion,speaker,e0,...)")
    body = rows[1:]
    emotions = sorted({r[1] for r in body})
    speakers = sorted({r[2] for r in body})
    e_idx = {n: i for i, n in enumerate(emotions)}
    s_idx = {n: i for i, n in enumerate(speakers)}
    records = [EmbeddingRecord(r[0], np.array([float(v) for v in r[3:]]), e_idx[r[1]], s_idx[r[2]])
               for r in body]
    return records, emotions, speakers


# ---------------------------------------------------------------- commands
def _load_data(cfg: ExperimentConfig) -> tuple[Dataset, SplitManifest]:
    if cfg.data_path:
        dataset = read_serf(cfg.data_path)
        if not cfg.split_path:
            raise ConfigError("a SERF data file needs a split manifest (--split)")
        return dataset, SplitManifest.load(cfg.split_path)
    dataset = generate_synthetic(cfg.synthetic, cfg.model.min_length)
    if cfg.split_path:
        return dataset, SplitManifest.load(cfg.split_path)
    fractions = tuple(c / sum(cfg.speaker_counts) for c in cfg.speaker_counts)
    return dataset, split_by_speaker(dataset, fractions, seed=substream(cfg.train.seed, "split"))


def cmd_gen_data(args) -> None:
    cfg = load_config(args.config)
    spec = cfg.synthetic
    over = {k: getattr(args, k) for k in ("num_speakers", "utterances_per_speaker", "seed")
            if getattr(args, k) is not None}
    spec = replace(spec, **over)
    spec.validate(cfg.model.min_length if args.check_model else None)
    out = output_dir(args.output_dir or cfg.output_dir)
    dataset = generate_synthetic(spec)
    fractions = tuple(args.fractions) if args.fractions else \
        tuple(c / sum(DEFAULT_SPEAKER_COUNTS) for c in DEFAULT_SPEAKER_COUNTS)
    manifest = split_by_speaker(dataset, fractions, seed=substream(spec.seed, "split"))
    with atomic_path(out / "data.serf") as tmp:
        write_serf(dataset, tmp)
    with atomic_path(out / "split.json") as tmp:
        manifest.save(tmp)
    with atomic_path(out / "speakers.json") as tmp:
        write_speaker_metadata(pseudo_sessions(dataset), tmp)
    write_json(asdict(spec), out / "synthetic_spec.json")
    log.info("event=gen_data utterances=%d speakers=%d out=%s", len(dataset.utterances),
             len(dataset.speaker_ids), out)


def cmd_split(args) -> None:
    dataset = read_serf(args.data)
    out = output_dir(args.output_dir)
    if args.cv_folds:
        meta = read_speaker_metadata(args.metadata) if args.metadata else pseudo_sessions(dataset, args.cv_folds)
        folds = make_cv_folds(dataset, meta, args.cv_folds)
        for m in folds:
            m.check(dataset, require_partition=False)
            with atomic_path(out / f"fold{m.fold}_{m.orientation}.json") as tmp:
                m.save(tmp)
        log.info("event=split folds=%d out=%s", len(folds), out)
        return
    manifest = split_by_speaker(dataset, tuple(args.fractions), seed=args.seed)
    manifest.check(dataset, require_partition=True)
    with atomic_path(out / "split.json") as tmp:
        manifest.save(tmp)
    sets = manifest.speaker_sets(dataset)
    log.info("event=split train_speakers=%d val_speakers=%d test_speakers=%d out=%s",
             len(sets["train"]), len(sets["validation"]), len(sets["test"]), out)


def cmd_train(args) -> None:
    cfg = apply_overrides(load_config(args.config), args)
    out = output_dir(cfg.output_dir)
    dataset, manifest = _load_data(cfg)
    result = train(dataset, manifest, cfg.model, cfg.train)
    with atomic_path(out / "checkpoint.serm") as tmp:
        save_checkpoint(result.params, tmp)
    with atomic_path(out / "history.csv") as tmp:
        result.history.to_csv(tmp)
    if args.timing:
        with atomic_path(out / "timing.csv") as tmp:
            result.history.timing_to_csv(tmp)
    with atomic_path(out / "split.json") as tmp:
        manifest.save(tmp)
    write_json(cfg.to_json(), out / "config.json")
    log.info("event=train_done best_epoch=%d out=%s", result.best_epoch, out)


def _subset(args, dataset: Dataset) -> list:
    manifest = SplitManifest.load(args.split)
    ids = getattr(manifest, args.subset)
    if not ids:
        raise EvaluationError(f"split {args.subset!r} is empty")
    return dataset.select(ids)


def cmd_evaluate(args) -> None:
    params = load_checkpoint(args.checkpoint)
    dataset = read_serf(args.data)
    utts = _subset(args, dataset)
    metrics = evaluate(params, utts)
    out = Path(args.out) if args.out else output_dir(args.output_dir) / f"metrics_{args.subset}.json"
    if args.confusion:
        with atomic_path(Path(args.confusion)) as tmp:
            write_confusion_csv(metrics, dataset.emotion_names, tmp)
    write_json({**metrics.to_json(), "subset": args.subset, "emotion_names": dataset.emotion_names}, out)
    log.info("event=evaluate subset=%s accuracy=%.4f out=%s", args.subset, metrics.accuracy, out)


def cmd_embed(args) -> None:
    params = load_checkpoint(args.checkpoint)
    dataset = read_serf(args.data)
    records, skipped = embed(params, _subset(args, dataset))
    out = Path(args.out) if args.out else output_dir(args.output_dir) / f"embeddings_{args.subset}.csv"
    write_embeddings_csv(records, dataset, out)
    log.info("event=embed records=%d skipped=%d out=%s", len(records), len(skipped), out)


def cmd_probe(args) -> None:
    records, _, speakers = read_embeddings_csv(args.embeddings)
    result = speaker_probe(records, seed=substream(args.seed, "probe"))
    out = Path(args.out) if args.out else output_dir(args.output_dir) / "probe.json"
    write_json(result.to_json(), out)
    log.info("event=probe accuracy=%.4f leakage_ratio=%.3f speakers=%d out=%s", result.probe_accuracy,
             result.leakage_ratio, len(speakers), out)


def cmd_project(args) -> None:
    records, emotions, speakers = read_embeddings_csv(args.embeddings)
    proj = pca_project(records, args.components)
    out = Path(args.out) if args.out else output_dir(args.output_dir) / "projection.csv"
    with atomic_path(out) as tmp:
        write_projection_csv(records, proj, tmp, emotions, speakers)
    log.info("event=project components=%d explained=%s out=%s", args.components,
             ",".join(f"{v:.4f}" for v in proj.explained_variance), out)


def cmd_gradcheck(args) -> int:
    def show(report):
        log.info("event=gradcheck op=%s max_rel_error=%.3e", report.op_name, report.max_rel_error)

    result = run_suite(seed=args.seed, progress=show)
    if args.out:
        write_json({"passed": result.passed, "seconds": result.seconds, "tolerance": result.tolerance,
                    "reports": [{"op_name": r.op_name, "max_rel_error": r.max_rel_error} for r in result.reports]},
                   Path(args.out))
    log.info("event=gradcheck_done checks=%d failures=%d seconds=%.1f", len(result.reports),
             len(result.failures), result.seconds)
    for r in result.failures:
        print(f"error=GradCheckFailed op={r.op_name} max_rel_error={r.max_rel_error:.3e}", file=sys.stderr)
    return 0 if result.passed else 1


def cmd_experiment(args) -> None:
    cfg = apply_overrides(load_config(args.config), args)
    out = output_dir(cfg.output_dir)
    plan = ExperimentPlan(cfg.model, cfg.train, cfg.synthetic, cfg.seeds, cfg.strategies, cfg.speaker_counts,
                          cfg.workers)
    cells = run_experiment(plan)
    summary = summarize(cells)
    with atomic_path(out / "cells.csv") as tmp:
        write_cells_csv(cells, tmp)
    with atomic_path(out / "summary.csv") as tmp:
        write_summary_csv(summary, tmp)
    write_json(summary_json(summary), out / "summary.json")
    write_json(cfg.to_json(), out / "config.json")
    for s in summary.values():
        log.info("event=summary strategy=%s val=%.4f test=%.4f leakage=%.3f", s.strategy, s.val_mean,
                 s.test_mean, s.leakage_mean)


# ------------------------------------------------------------------ parser
def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags below override it")
    p.add_argument("--preset", choices=sorted(PRESETS), help="model preset (replaces the config's model)")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], help="training strategy")
    p.add_argument("--learning-rate", type=float, dest="learning_rate", help="SGD step size")
    p.add_argument("--epochs", type=int, help="number of training epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size", help="utterances per batch")
    p.add_argument("--grl-lambda", type=float, dest="grl_lambda", help="gradient-reversal weight (DAT)")
    p.add_argument("--lambda-schedule", choices=["constant", "ramp"], dest="lambda_schedule",
                   help="DAT weight schedule")
    p.add_argument("--cgt-epsilon", type=float, dest="cgt_epsilon", help="perturbation size (CGT)")
    p.add_argument("--cgt-alpha", type=float, dest="cgt_alpha", help="perturbed-loss weight (CGT)")
    p.add_argument("--seed", type=int, help="top-level seed")
    p.add_argument("--data", help="SERF feature file (default: generate from the config's synthetic spec)")
    p.add_argument("--split", help="split manifest JSON")
    p.add_argument("--output-dir", dest="output_dir", help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")


def _add_subset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True, help="SERM checkpoint file")
    p.add_argument("--data", required=True, help="SERF feature file")
    p.add_argument("--split", required=True, help="split manifest JSON")
    p.add_argument("--subset", choices=["train", "validation", "test"], default="test", help="which split to use")
    p.add_argument("--out", help="output file (default under the output directory)")
    p.add_argument("--output-dir", dest="output_dir", help="output directory for the default file name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serinv", description="Speaker-invariant emotion embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus, split manifest and session tags")
    p.add_argument("--config", help="JSON config whose data.synthetic section is used")
    p.add_argument("--num-speakers", type=int, dest="num_speakers", help="number of speakers")
    p.add_argument("--utterances-per-speaker", type=int, dest="utterances_per_speaker",
                   help="utterances per speaker")
    p.add_argument("--seed", type=int, help="generator seed")
    p.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="speaker split fractions (default 25:5:5)")
    p.add_argument("--check-model", action="store_true", dest="check_model",
                   help="reject lengths below the config model's receptive field")
    p.add_argument("--output-dir", dest="output_dir", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="speaker-disjoint split or session cross-validation folds")
    p.add_argument("--data", required=True, help="SERF feature file")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1], metavar=("TRAIN", "VAL", "TEST"),
                   help="speaker fractions (default 0.8 0.1 0.1)")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.add_argument("--cv-folds", type=int, dest="cv_folds", help="emit leave-one-session-out folds instead")
    p.add_argument("--metadata", help="speaker metadata JSON with session tags (for --cv-folds)")
    p.add_argument("--output-dir", dest="output_dir", help="output directory")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model; writes checkpoint.serm and history.csv")
    _add_common_train_flags(p)
    p.add_argument("--timing", action="store_true", help="also write per-epoch wall-clock seconds to timing.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="emotion metrics JSON for a checkpoint on one split")
    _add_subset_flags(p)
    p.add_argument("--confusion", help="also write the confusion matrix CSV here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="utterance embeddings CSV for one split")
    _add_subset_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="linear speaker probe on an embeddings CSV")
    p.add_argument("--embeddings", required=True, help="embeddings CSV from the embed command")
    p.add_argument("--seed", type=int, default=0, help="probe split seed")
    p.add_argument("--out", help="output JSON")
    p.add_argument("--output-dir", dest="output_dir", help="output directory for the default file name")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("project", help="PCA projection CSV of an embeddings CSV")
    p.add_argument("--embeddings", required=True, help="embeddings CSV from the embed command")
    p.add_argument("--components", type=int, default=2, help="number of principal components")
    p.add_argument("--out", help="output CSV")
    p.add_argument("--output-dir", dest="output_dir", help="output directory for the default file name")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss; exit 1 on failure")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", help="optional JSON report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="all strategies x seeds; writes summary.csv and cells.csv")
    _add_common_train_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to average over")
    p.add_argument("--strategies", nargs="+", choices=[s.value for s in Strategy], help="strategies to run")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_experiment)
    return parser


EXPECTED_ERRORS = (ContractViolation, ConfigError, SerfError, SplitContractError, SyntheticSpecError, LayoutError,
                   TrainingError, CheckpointError, EvaluationError, TooShortUtteranceError, ValueError,
                   FileNotFoundError, IsADirectoryError, KeyError)


def _configure_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s %(message)s"))
    root = logging.getLogger("serinv")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)
    try:
        status = args.func(args)
    except EXPECTED_ERRORS as exc:
        message = str(exc).replace("\n", " ")
        print(f"error={type(exc).__name__} command={args.command} message={json.dumps(message)}", file=sys.stderr)
        return 2
    return int(status or 0)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
