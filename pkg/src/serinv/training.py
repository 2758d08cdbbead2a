"""Training strategies: emotion-only, multi-task, adversarial (gradient reversal) and cross-gradient."""

from __future__ import annotations

import csv
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractViolation, Tensor, cross_entropy, grad
from .data import Dataset, SplitManifest, make_batches
from .evaluation import evaluate
from .layers import SequenceBatch, TooShortUtteranceError, frame_mask
from .model import ForwardOutput, ModelConfig, ModelParameters, build_model, forward

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    SER_ONLY = "SER_ONLY"
    MTL = "MTL"
    DAT = "DAT"
    CGT = "CGT"


class TrainingError(RuntimeError):
    pass


class NonFiniteGradientError(TrainingError):
    def __init__(self, name: str):
        self.parameter = name
        super().__init__(f"non-finite gradient in parameter {name}")


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.MTL
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 32
    grl_lambda: float = 1.0
    lambda_schedule: str = "constant"  # or "ramp"
    cgt_epsilon: float = 1.0
    cgt_alpha: float = 0.5
    clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.cgt_alpha <= 1.0:
            raise ContractViolation(f"cgt_alpha must be in [0, 1], got {self.cgt_alpha}")
        if self.cgt_epsilon < 0 or self.grl_lambda < 0:
            raise ContractViolation("cgt_epsilon and grl_lambda must be >= 0")
        if self.learning_rate <= 0:
            raise ContractViolation(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.lambda_schedule not in ("constant", "ramp"):
            raise ContractViolation(f"lambda_schedule must be 'constant' or 'ramp', got {self.lambda_schedule!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ContractViolation("epochs >= 1 and batch_size >= 2 required")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ContractViolation("clip_norm must be positive or None")

    def to_json(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        return d

    def lambda_at(self, epoch: int) -> float:
        if self.lambda_schedule == "constant":
            return self.grl_lambda
        half = max(1.0, self.epochs / 2)
        return self.grl_lambda * min(1.0, epoch / half)


def substream(seed: int, name: str) -> int:
    """Independent integer seed for a named consumer of randomness."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


# -------------------------------------------------------------- optimizer
@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params.items()})


def sgd_nesterov_update(params: dict[str, Tensor], state: OptimizerState, lr: float, momentum: float,
                        clip_norm: float | None = None) -> float:
    """Clip to a global norm, then ``v = mu v + g; p -= lr (g + mu v)``; clears grads.

    Parameters without a gradient are left untouched. Returns the pre-clip norm.
    """
    live = {n: t for n, t in params.items() if t.grad is not None}
    for name, t in live.items():
        if not np.all(np.isfinite(t.grad)):
            raise NonFiniteGradientError(name)
    norm = float(np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in live.values())))
    scale = clip_norm / norm if clip_norm is not None and norm > clip_norm else None
    for name, t in live.items():
        g = t.grad * scale if scale is not None else t.grad
        v = state.velocity[name]
        v *= momentum
        v += g
        t.data -= lr * (g + momentum * v)
        t.grad = None
    return norm


# ------------------------------------------------------------------ losses
def emotion_loss(out: ForwardOutput, batch: SequenceBatch) -> Tensor:
    return cross_entropy(out.emotion_logits, batch.emotion_targets)


def speaker_loss(out: ForwardOutput, batch: SequenceBatch) -> Tensor:
    return cross_entropy(out.speaker_logits, batch.speaker_targets)


def loss_mtl(out: ForwardOutput, batch: SequenceBatch) -> Tensor:
    return emotion_loss(out, batch) + speaker_loss(out, batch)


def loss_dat(out: ForwardOutput, batch: SequenceBatch) -> Tensor:
    """Emotion plus speaker loss on gradient-reversed logits.

    The speaker head minimises its loss while the embedding network receives
    the gradient of ``L_emo - lambda * L_spk``.
    """
    if not out.grl_applied:
        raise ContractViolation("loss_dat needs a forward pass with grl_lambda set")
    return emotion_loss(out, batch) + speaker_loss(out, batch)


# ------------------------------------------------------------------ CGT
def _input_gradients(out: ForwardOutput, batch: SequenceBatch, x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    (g_spk,) = grad(speaker_loss(out, batch), [x], retain_graph=True)
    (g_emo,) = grad(emotion_loss(out, batch), [x], retain_graph=True)
    return g_spk, g_emo


def _perturb(batch: SequenceBatch, g_spk: np.ndarray, g_emo: np.ndarray, epsilon: float):
    mask = frame_mask(batch.valid_lengths, batch.features.shape[2])[:, None, :]
    x = batch.features
    return np.where(mask, x + epsilon * g_spk, x), np.where(mask, x + epsilon * g_emo, x)


def cgt_perturb(batch: SequenceBatch, params: ModelParameters, epsilon: float,
                seed: int | None = None, training: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Inputs moved along the speaker-loss and emotion-loss input gradients.

    Returns ``(X_s, X_y)``. Both heads are attached without gradient reversal;
    batch-norm running statistics are not updated. Padded frames are unchanged.
    """
    if epsilon < 0:
        raise ContractViolation("epsilon must be >= 0")
    x = Tensor(batch.features, requires_grad=True)
    out = forward(params, batch, training, seed=seed, inputs=x, update_stats=False)
    g_spk, g_emo = _input_gradients(out, batch, x)
    return _perturb(batch, g_spk, g_emo, epsilon)


@dataclass
class StepResult:
    emotion_loss: float
    speaker_loss: float
    speaker_correct: int


def _speaker_hits(out: ForwardOutput, batch: SequenceBatch) -> int:
    if out.speaker_logits is None:
        return 0
    return int(np.sum(out.speaker_logits.data.argmax(1) == batch.speaker_targets.argmax(1)))


def cgt_objective(params: ModelParameters, batch: SequenceBatch, alpha: float, epsilon: float,
                  seed: int | None) -> tuple[Tensor, ForwardOutput, Tensor, Tensor]:
    """Build the combined clean/perturbed objective; perturbations enter as constants.

    When both perturbed inputs equal the clean input the objective reduces to
    the clean multi-task loss and is built as such.
    """
    x = Tensor(batch.features, requires_grad=True)
    clean = forward(params, batch, True, seed=seed, inputs=x)
    l_emo, l_spk = emotion_loss(clean, batch), speaker_loss(clean, batch)
    if alpha == 0.0:
        return l_emo + l_spk, clean, l_emo, l_spk
    g_spk, g_emo = _input_gradients(clean, batch, x)
    x_s, x_y = _perturb(batch, g_spk, g_emo, epsilon)
    s_same, y_same = np.array_equal(x_s, batch.features), np.array_equal(x_y, batch.features)
    if s_same and y_same:
        return l_emo + l_spk, clean, l_emo, l_spk

    def run(arr, heads):
        return forward(params, batch, True, seed=seed, inputs=Tensor._wrap(arr), update_stats=False, heads=heads)

    out_s = clean if s_same else None
    out_y = clean if y_same else None
    if out_s is None and out_y is None and np.array_equal(x_s, x_y):
        out_s = out_y = run(x_s, ("emotion", "speaker"))
    if out_s is None:
        out_s = run(x_s, ("emotion",))
    if out_y is None:
        out_y = run(x_y, ("speaker",))
    total = (1.0 - alpha) * (l_emo + l_spk) + alpha * (emotion_loss(out_s, batch) + speaker_loss(out_y, batch))
    return total, clean, l_emo, l_spk


def train_step_cgt(batch: SequenceBatch, params: ModelParameters, opt_state: OptimizerState,
                   config: TrainConfig, seed: int | None = None) -> StepResult:
    total, clean, l_emo, l_spk = cgt_objective(params, batch, config.cgt_alpha, config.cgt_epsilon, seed)
    total.backward()
    sgd_nesterov_update(params.named_parameters(), opt_state, config.learning_rate, config.momentum,
                        config.clip_norm)
    return StepResult(l_emo.item(), l_spk.item(), _speaker_hits(clean, batch))


def trainable_parameters(params: ModelParameters, strategy: Strategy) -> dict[str, Tensor]:
    named = params.named_parameters()
    if strategy is Strategy.SER_ONLY:
        return {n: t for n, t in named.items() if not n.startswith("speaker.")}
    return named


def train_step(batch: SequenceBatch, params: ModelParameters, opt_state: OptimizerState,
               config: TrainConfig, seed: int | None = None, grl_lambda: float | None = None) -> StepResult:
    """One optimizer update under ``config.strategy``."""
    strategy = config.strategy
    if strategy is Strategy.CGT:
        return train_step_cgt(batch, params, opt_state, config, seed)
    if strategy is Strategy.SER_ONLY:
        out = forward(params, batch, True, seed=seed, heads=("emotion",))
        l_emo = emotion_loss(out, batch)
        l_emo.backward()
        sgd_nesterov_update(trainable_parameters(params, strategy), opt_state, config.learning_rate,
                            config.momentum, config.clip_norm)
        return StepResult(l_emo.item(), float("nan"), 0)
    if strategy is Strategy.DAT:
        lam = config.grl_lambda if grl_lambda is None else grl_lambda
        out = forward(params, batch, True, grl_lambda=lam, seed=seed)
        l_emo, l_spk = emotion_loss(out, batch), speaker_loss(out, batch)
        total = loss_dat(out, batch)
    else:
        out = forward(params, batch, True, seed=seed)
        l_emo, l_spk = emotion_loss(out, batch), speaker_loss(out, batch)
        total = l_emo + l_spk
    total.backward()
    sgd_nesterov_update(params.named_parameters(), opt_state, config.learning_rate, config.momentum,
                        config.clip_norm)
    return StepResult(l_emo.item(), l_spk.item(), _speaker_hits(out, batch))


# ------------------------------------------------------------------ loop
HISTORY_COLUMNS = ("epoch", "grl_lambda", "train_emotion_loss", "train_speaker_loss",
                   "val_emotion_acc", "train_speaker_acc")


@dataclass
class EpochRecord:
    epoch: int
    grl_lambda: float
    train_emotion_loss: float
    train_speaker_loss: float
    val_emotion_acc: float
    train_speaker_acc: float
    seconds: float = 0.0


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def best_epoch(self) -> int:
        """Epoch index with the highest validation accuracy (earliest on ties)."""
        accs = [e.val_emotion_acc for e in self.epochs]
        return int(np.argmax(accs))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for e in self.epochs:
                w.writerow([e.epoch] + [repr(float(getattr(e, c))) for c in HISTORY_COLUMNS[1:]])

    def timing_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "seconds"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.seconds:.3f}"])


@dataclass
class TrainResult:
    params: ModelParameters
    history: TrainHistory
    best_epoch: int
    speaker_index: dict[int, int]
    final_params: ModelParameters | None = None


def _check_lengths(utts, need: int) -> None:
    for u in utts:
        if u.length < need:
            raise TooShortUtteranceError(u.length, need, u.id)


def train(dataset: Dataset, manifest: SplitManifest, model_config: ModelConfig, config: TrainConfig,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train under ``config.strategy`` and return the best-on-validation checkpoint."""
    manifest.check(dataset)
    train_utts = dataset.select(manifest.train)
    val_utts = dataset.select(manifest.validation)
    if not train_utts or not val_utts:
        raise TrainingError("train and validation splits must be non-empty")
    train_speakers = sorted({u.speaker for u in train_utts})
    speaker_index = {s: i for i, s in enumerate(train_speakers)}
    mcfg = model_config.with_labels(dataset.num_emotions, max(2, len(train_speakers)))
    _check_lengths(train_utts + val_utts, mcfg.min_length)

    params = build_model(mcfg, seed=substream(config.seed, "init"))
    trainable = trainable_parameters(params, config.strategy)
    opt = OptimizerState.zeros(trainable)
    shuffle_seed = substream(config.seed, "shuffle")
    dropout_rng = np.random.default_rng(substream(config.seed, "dropout"))

    history = TrainHistory()
    best, best_acc = params.clone(), -1.0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lam = config.lambda_at(epoch)
        batches = make_batches(train_utts, config.batch_size, shuffle_seed, epoch, mcfg.num_emotions,
                               mcfg.num_speakers, speaker_index, min_batch=2)
        emo_sum = spk_sum = 0.0
        hits = seen = 0
        for b, batch in enumerate(batches):
            step_seed = int(dropout_rng.integers(2**31))
            try:
                res = train_step(batch, params, opt, config, step_seed, grl_lambda=lam)
            except NonFiniteGradientError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(res.emotion_loss) or (
                    config.strategy is not Strategy.SER_ONLY and not np.isfinite(res.speaker_loss)):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            emo_sum += res.emotion_loss * len(batch)
            spk_sum += res.speaker_loss * len(batch)
            hits += res.speaker_correct
            seen += len(batch)
        val_acc = evaluate(params, val_utts).accuracy
        ser_only = config.strategy is Strategy.SER_ONLY
        record = EpochRecord(epoch, lam if config.strategy is Strategy.DAT else 0.0, emo_sum / seen,
                             float("nan") if ser_only else spk_sum / seen, val_acc,
                             float("nan") if ser_only else hits / seen, time.perf_counter() - t0)
        history.epochs.append(record)
        log.info("event=epoch strategy=%s epoch=%d emo_loss=%.4f spk_loss=%.4f val_acc=%.4f seconds=%.1f",
                 config.strategy.value, epoch, record.train_emotion_loss, record.train_speaker_loss,
                 val_acc, record.seconds)
        if on_epoch is not None:
            on_epoch(record)
        if val_acc > best_acc:
            best, best_acc = params.clone(), val_acc
    return TrainResult(best, history, history.best_epoch(), speaker_index, params)
