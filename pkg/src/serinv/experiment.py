"""Strategy x seed comparison on synthetic data: unseen-speaker accuracy and embedding leakage."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import SyntheticSpec, generate_synthetic, split_by_speaker
from .evaluation import evaluate, speaker_probe
from .model import ModelConfig, embed
from .training import Strategy, TrainConfig, substream, train

log = logging.getLogger(__name__)

STRATEGIES = (Strategy.SER_ONLY, Strategy.MTL, Strategy.DAT, Strategy.CGT)


@dataclass
class ExperimentPlan:
    model: ModelConfig
    train: TrainConfig
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    seeds: tuple[int, ...] = (0, 1, 2)
    strategies: tuple[Strategy, ...] = STRATEGIES
    speaker_counts: tuple[int, int, int] = (25, 5, 5)  # train, validation, test
    workers: int = 1


@dataclass
class CellResult:
    strategy: str
    seed: int
    best_epoch: int
    val_acc: float
    test_acc: float
    probe_accuracy: float
    leakage_ratio: float
    seconds: float


CELL_COLUMNS = tuple(CellResult.__dataclass_fields__)


def _fractions(counts):
    total = sum(counts)
    return tuple(c / total for c in counts)


def run_cell(plan: ExperimentPlan, strategy: Strategy, seed: int) -> CellResult:
    """One training run. Data, split and training randomness all derive from ``seed``."""
    t0 = time.perf_counter()
    spec = replace(plan.synthetic, num_speakers=sum(plan.speaker_counts), seed=substream(seed, "data"))
    dataset = generate_synthetic(spec, min_length=plan.model.min_length)
    manifest = split_by_speaker(dataset, _fractions(plan.speaker_counts), seed=substream(seed, "split"))
    config = replace(plan.train, strategy=strategy, seed=seed)
    result = train(dataset, manifest, plan.model, config)
    test = dataset.select(manifest.test)
    records, _ = embed(result.params, test)
    probe = speaker_probe(records, seed=substream(seed, "probe"))
    cell = CellResult(strategy.value, seed, result.best_epoch,
                      result.history.epochs[result.best_epoch].val_emotion_acc,
                      evaluate(result.params, test).accuracy, probe.probe_accuracy, probe.leakage_ratio,
                      time.perf_counter() - t0)
    log.info("event=cell strategy=%s seed=%d val_acc=%.4f test_acc=%.4f leakage=%.3f seconds=%.1f",
             cell.strategy, seed, cell.val_acc, cell.test_acc, cell.leakage_ratio, cell.seconds)
    return cell


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(plan: ExperimentPlan) -> list[CellResult]:
    jobs = [(plan, s, seed) for s in plan.strategies for seed in plan.seeds]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            return list(pool.map(_run_cell_args, jobs))
    return [run_cell(*job) for job in jobs]


@dataclass
class StrategySummary:
    strategy: str
    n: int
    val_mean: float
    val_std: float
    test_mean: float
    test_std: float
    leakage_mean: float
    leakage_std: float

    @property
    def gap(self) -> float:
        return self.val_mean - self.test_mean


def _mean_std(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(cells: list[CellResult]) -> dict[str, StrategySummary]:
    out = {}
    for strategy in dict.fromkeys(c.strategy for c in cells):
        mine = [c for c in cells if c.strategy == strategy]
        out[strategy] = StrategySummary(strategy, len(mine),
                                        *_mean_std([c.val_acc for c in mine]),
                                        *_mean_std([c.test_acc for c in mine]),
                                        *_mean_std([c.leakage_ratio for c in mine]))
    return out


def format_cell(mean: float, std: float) -> str:
    """Percent with one decimal, e.g. ``56.5±1.2``."""
    return f"{100 * mean:.1f}±{100 * std:.1f}"


def write_summary_csv(summary: dict[str, StrategySummary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "val", "test"])
        for s in summary.values():
            w.writerow([s.strategy, format_cell(s.val_mean, s.val_std), format_cell(s.test_mean, s.test_std)])


def write_cells_csv(cells: list[CellResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CELL_COLUMNS)
        for c in cells:
            w.writerow([getattr(c, k) if k in ("strategy", "seed", "best_epoch") else repr(float(getattr(c, k)))
                        for k in CELL_COLUMNS])


def summary_json(summary: dict[str, StrategySummary]) -> dict:
    return {k: {**asdict(v), "gap": v.gap} for k, v in summary.items()}
