"""Embedding network (TDNN x2, BiLSTM, frame FC, statistics pooling) with two classifier heads."""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .autodiff import ContractViolation, Tensor, grad_reverse
from .data import Utterance, collate

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SERM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Regularization:
    tdnn_bn: bool = True
    frame_fc_bn: bool = True
    head_bn: bool = True
    lstm_dropout: bool = True
    frame_fc_dropout: bool = False
    head_dropout: bool = True
    keep_prob: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 39
    tdnn1: tuple[int, int, int] = (128, 5, 2)  # channels, kernel, dilation
    tdnn2: tuple[int, int, int] = (64, 3, 4)
    lstm_hidden: int = 64
    fc_embed_dim: int = 256
    emotion_head: tuple[int, int, int] = (64, 64, 4)  # hidden1, hidden2, outputs
    speaker_head: tuple[int, int, int] = (64, 64, 8)
    regularization: Regularization = field(default_factory=Regularization)

    def __post_init__(self):
        dims = [self.feature_dim, *self.tdnn1, *self.tdnn2, self.lstm_hidden, self.fc_embed_dim,
                *self.emotion_head, *self.speaker_head]
        if min(dims) < 1:
            raise ContractViolation(f"model dimensions must be positive: {dims}")

    @property
    def embedding_dim(self) -> int:
        return 2 * self.fc_embed_dim

    @property
    def min_length(self) -> int:
        (_, k1, d1), (_, k2, d2) = self.tdnn1, self.tdnn2
        return 1 + d1 * (k1 - 1) + d2 * (k2 - 1)

    @property
    def num_emotions(self) -> int:
        return self.emotion_head[2]

    @property
    def num_speakers(self) -> int:
        return self.speaker_head[2]

    def with_labels(self, num_emotions: int, num_speakers: int) -> "ModelConfig":
        return replace(self, emotion_head=(*self.emotion_head[:2], num_emotions),
                       speaker_head=(*self.speaker_head[:2], num_speakers))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        reg = obj.pop("regularization", {})
        if isinstance(reg, dict):
            bad = set(reg) - set(Regularization.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown regularization keys: {sorted(bad)}")
            reg = Regularization(**reg)
        for key in ("tdnn1", "tdnn2", "emotion_head", "speaker_head"):
            if key in obj:
                obj[key] = tuple(int(v) for v in obj[key])
        return cls(regularization=reg, **obj)


PRESETS = {
    "iemocap": ModelConfig(),
    "mandarin": ModelConfig(tdnn2=(128, 3, 4), lstm_hidden=128, fc_embed_dim=512,
                            emotion_head=(128, 128, 4), speaker_head=(128, 128, 200)),
    "tiny": ModelConfig(feature_dim=6, tdnn1=(4, 3, 1), tdnn2=(4, 3, 1), lstm_hidden=3, fc_embed_dim=8,
                        emotion_head=(4, 4, 2), speaker_head=(4, 4, 2)),
    "small": ModelConfig(tdnn1=(32, 5, 2), tdnn2=(32, 3, 4), lstm_hidden=16, fc_embed_dim=8,
                         emotion_head=(32, 32, 4), speaker_head=(32, 32, 8)),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None


class ModelParameters:
    """All layers of the three sub-networks, keyed ``<subnet>.<layer>`` in declaration order."""

    def __init__(self, config: ModelConfig, layers: dict[str, object]):
        self.config = config
        self.layers = layers

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.layers.items():
            if lname.startswith(prefix):
                for pname, t in layer.parameters().items():
                    out[f"{lname}.{pname}"] = t
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.layers.items():
            if isinstance(layer, L.BatchNorm1d):
                for bname, arr in layer.buffers().items():
                    out[f"{lname}.{bname}"] = arr
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Every stored array (parameters, then batch-norm buffers, per layer) in declaration order."""
        out = {}
        for lname, layer in self.layers.items():
            for pname, t in layer.parameters().items():
                out[f"{lname}.{pname}"] = t.data
            if isinstance(layer, L.BatchNorm1d):
                for bname, arr in layer.buffers().items():
                    out[f"{lname}.{bname}"] = arr
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    def clone(self) -> "ModelParameters":
        return copy.deepcopy(self)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in self.state().items():
            arr[...] = arrays[name]

    @property
    def min_length(self) -> int:
        return self.config.min_length


def _head(rng: np.random.Generator, n_in: int, dims: tuple[int, int, int], reg: Regularization,
          prefix: str) -> dict[str, object]:
    h1, h2, n_out = dims
    out = {}
    prev = n_in
    for i, width in enumerate((h1, h2), start=1):
        out[f"{prefix}.fc{i}"] = L.init_dense(rng, prev, width, bias=not reg.head_bn)
        if reg.head_bn:
            out[f"{prefix}.bn{i}"] = L.BatchNorm1d.create(width)
        prev = width
    out[f"{prefix}.out"] = L.init_dense(rng, prev, n_out)
    return out


def build_model(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Deterministically initialised parameters. Affine layers followed by batch norm carry no bias."""
    rng = np.random.default_rng(seed)
    reg = config.regularization
    (c1, k1, d1), (c2, k2, d2) = config.tdnn1, config.tdnn2
    layers: dict[str, object] = {}
    layers["embed.tdnn1"] = L.init_tdnn(rng, config.feature_dim, c1, k1, d1, bias=not reg.tdnn_bn)
    if reg.tdnn_bn:
        layers["embed.bn1"] = L.BatchNorm1d.create(c1)
    layers["embed.tdnn2"] = L.init_tdnn(rng, c1, c2, k2, d2, bias=not reg.tdnn_bn)
    if reg.tdnn_bn:
        layers["embed.bn2"] = L.BatchNorm1d.create(c2)
    layers["embed.lstm"] = L.init_bilstm(rng, c2, config.lstm_hidden)
    layers["embed.fc"] = L.init_dense(rng, 2 * config.lstm_hidden, config.fc_embed_dim, bias=not reg.frame_fc_bn)
    if reg.frame_fc_bn:
        layers["embed.bn_fc"] = L.BatchNorm1d.create(config.fc_embed_dim)
    layers.update(_head(rng, config.embedding_dim, config.emotion_head, reg, "emotion"))
    layers.update(_head(rng, config.embedding_dim, config.speaker_head, reg, "speaker"))
    return ModelParameters(config, layers)


@dataclass
class ForwardOutput:
    embedding: Tensor
    emotion_logits: Tensor | None
    speaker_logits: Tensor | None
    grl_applied: bool = False


DROPOUT_STREAMS = ("embed", "emotion", "speaker")


class _Ctx:
    def __init__(self, params, training, seed, update_stats):
        self.p = params.layers
        self.reg = params.config.regularization
        self.training = training
        self.rngs = {name: np.random.default_rng([seed, k]) for k, name in enumerate(DROPOUT_STREAMS)} \
            if seed is not None else {}
        self.stream = "embed"
        self.update_stats = update_stats

    def bn(self, name, x, lengths=None):
        layer = self.p.get(name)
        if layer is None:
            return x
        return L.batchnorm_forward(x, layer, self.training, lengths, self.update_stats)

    def drop(self, x, enabled):
        if not enabled:
            return x
        return L.dropout_forward(x, self.reg.keep_prob, self.training, self.rngs.get(self.stream))


def _check_lengths(params: ModelParameters, batch: L.SequenceBatch) -> None:
    need = params.min_length
    for i, n in enumerate(batch.valid_lengths):
        if n < need:
            uid = batch.ids[i] if i < len(batch.ids) else f"#{i}"
            raise L.TooShortUtteranceError(int(n), need, uid)


def _run_head(ctx: _Ctx, prefix: str, x: Tensor) -> Tensor:
    ctx.stream = prefix
    for i in (1, 2):
        x = L.linear(x, ctx.p[f"{prefix}.fc{i}"])
        x = ctx.bn(f"{prefix}.bn{i}", x).relu()
        x = ctx.drop(x, ctx.reg.head_dropout)
    return L.linear(x, ctx.p[f"{prefix}.out"])


def embed_forward(params: ModelParameters, x: Tensor, lengths, ctx: _Ctx) -> Tensor:
    p = ctx.p
    lengths = np.asarray(lengths)
    for conv, bn in (("embed.tdnn1", "embed.bn1"), ("embed.tdnn2", "embed.bn2")):
        layer = p[conv]
        x = L.conv1d(x, layer.kernels, layer.bias, layer.dilation)
        lengths = lengths - layer.shrink
        x = ctx.bn(bn, x, lengths).relu()
    x = L.bilstm(x, lengths, p["embed.lstm"])
    x = ctx.drop(x, ctx.reg.lstm_dropout)
    x = L.linear(x, p["embed.fc"])
    x = ctx.bn("embed.bn_fc", x, lengths).relu()
    x = ctx.drop(x, ctx.reg.frame_fc_dropout)
    return L.masked_stats_pool(x, lengths)


def forward(params: ModelParameters, batch: L.SequenceBatch, training: bool,
            grl_lambda: float | None = None, seed: int | None = None,
            inputs: Tensor | None = None, update_stats: bool = True,
            heads: Sequence[str] = ("emotion", "speaker")) -> ForwardOutput:
    """Run the network on ``batch``.

    ``inputs`` replaces ``batch.features`` (e.g. a tensor flagged for input
    gradients). Dropout masks come from three generators seeded by ``seed``,
    one per sub-network, so the same seed reproduces the same masks whichever
    heads are run. When ``grl_lambda`` is given the speaker head reads
    ``grad_reverse(embedding, grl_lambda)``.
    """
    _check_lengths(params, batch)
    reg = params.config.regularization
    uses_dropout = reg.keep_prob < 1 and (reg.lstm_dropout or reg.head_dropout or reg.frame_fc_dropout)
    if training and uses_dropout and seed is None:
        raise ContractViolation("training-mode forward with dropout needs a seed")
    x = inputs if inputs is not None else Tensor._wrap(batch.features.astype(np.float64, copy=False))
    ctx = _Ctx(params, training, seed, update_stats)
    emb = embed_forward(params, x, batch.valid_lengths, ctx)
    emo = _run_head(ctx, "emotion", emb) if "emotion" in heads else None
    spk = None
    if "speaker" in heads:
        spk_in = grad_reverse(emb, grl_lambda) if grl_lambda is not None else emb
        spk = _run_head(ctx, "speaker", spk_in)
    return ForwardOutput(emb, emo, spk, grl_lambda is not None)


# ---------------------------------------------------------------- embed
@dataclass
class EmbeddingRecord:
    id: str
    embedding: np.ndarray
    emotion: int
    speaker: int


def eval_batches(utts: Sequence[Utterance], batch_size: int) -> list[list[int]]:
    """Length-sorted fixed partition of indices for eval-mode passes."""
    order = sorted(range(len(utts)), key=lambda i: (utts[i].length, i))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def predict(params: ModelParameters, utts: Sequence[Utterance], batch_size: int = 32,
            heads: Sequence[str] = ("emotion",)) -> ForwardOutput:
    """Eval-mode forward over ``utts``; rows returned in input order."""
    n = len(utts)
    cfg = params.config
    emb = np.zeros((n, cfg.embedding_dim))
    emo = np.zeros((n, cfg.num_emotions)) if "emotion" in heads else None
    spk = np.zeros((n, cfg.num_speakers)) if "speaker" in heads else None
    for idx in eval_batches(utts, batch_size):
        batch = collate([utts[i] for i in idx], cfg.num_emotions, 1, {})
        out = forward(params, batch, training=False, heads=heads)
        emb[idx] = out.embedding.data
        if emo is not None:
            emo[idx] = out.emotion_logits.data
        if spk is not None:
            spk[idx] = out.speaker_logits.data
    wrap = lambda a: None if a is None else Tensor._wrap(a)  # noqa: E731
    return ForwardOutput(Tensor._wrap(emb), wrap(emo), wrap(spk))


def embed(params: ModelParameters, utts: Sequence[Utterance], batch_size: int = 32
          ) -> tuple[list[EmbeddingRecord], list[str]]:
    """Embeddings for every long-enough utterance, plus the ids skipped as too short."""
    need = params.min_length
    keep = [u for u in utts if u.length >= need]
    skipped = [u.id for u in utts if u.length < need]
    for uid in skipped:
        log.warning("event=skip_short_utterance id=%s min_length=%d", uid, need)
    if not keep:
        return [], skipped
    emb = predict(params, keep, batch_size, heads=()).embedding.data
    return [EmbeddingRecord(u.id, emb[i].copy(), u.emotion, u.speaker) for i, u in enumerate(keep)], skipped


# ----------------------------------------------------------- checkpoint
class CheckpointError(ValueError):
    pass


def serialize_checkpoint(params: ModelParameters) -> bytes:
    cfg = json.dumps(params.config.to_json(), sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg]
    for arr in params.state().values():
        parts.append(struct.pack("<Q", arr.size))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_checkpoint(raw: bytes) -> ModelParameters:
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12 + n
    config = ModelConfig.from_json(json.loads(raw[12:pos].decode("utf-8")))
    params = build_model(config, seed=0)
    for name, arr in params.state().items():
        if pos + 8 > len(raw):
            raise CheckpointError(f"truncated checkpoint at {name}")
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if count != arr.size or pos + 8 * count > len(raw):
            raise CheckpointError(f"tensor {name}: expected {arr.size} values, header says {count}")
        arr[...] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(arr.shape)
        pos += 8 * count
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes in checkpoint")
    return params


def save_checkpoint(params: ModelParameters, path) -> None:
    Path(path).write_bytes(serialize_checkpoint(params))


def load_checkpoint(path) -> ModelParameters:
    return deserialize_checkpoint(Path(path).read_bytes())
