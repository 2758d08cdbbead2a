"""Feature-sequence datasets: SERF container, synthetic corpus, splits and batching."""

from __future__ import annotations

import io
import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import SequenceBatch

SERF_MAGIC = b"SERF"
SERF_VERSION = 1


class SerfError(ValueError):
    pass


class SerfFormatError(SerfError):
    """Bad magic or unsupported version."""


class SerfLengthError(SerfError):
    """File ended before the declared content."""


class SerfValidationError(SerfError):
    """Content decodes but violates a dataset invariant."""


class SplitContractError(ValueError):
    """Splits share speakers or do not partition the dataset."""

    def __init__(self, message: str, speakers: Sequence[str] = ()):
        self.speakers = list(speakers)
        super().__init__(message)


class LayoutError(ValueError):
    """Session metadata does not match the two-speakers-per-session layout."""


class SyntheticSpecError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # d x l, float32
    emotion: int
    speaker: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise ValueError(f"utterance {self.id!r}: features must be d x l with l >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"utterance {self.id!r}: non-finite feature values")

    @property
    def length(self) -> int:
        return self.features.shape[1]


@dataclass
class Dataset:
    feature_dim: int
    emotion_names: list[str]
    speaker_ids: list[str]
    utterances: list[Utterance] = field(default_factory=list)

    def validate(self) -> None:
        seen = set()
        E, S = len(self.emotion_names), len(self.speaker_ids)
        for u in self.utterances:
            if u.id in seen:
                raise SerfValidationError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            if not 0 <= u.emotion < E:
                raise SerfValidationError(f"utterance {u.id!r}: emotion label {u.emotion} out of range [0, {E})")
            if not 0 <= u.speaker < S:
                raise SerfValidationError(f"utterance {u.id!r}: speaker label {u.speaker} out of range [0, {S})")
            if u.features.shape[0] != self.feature_dim:
                raise SerfValidationError(
                    f"utterance {u.id!r}: feature dim {u.features.shape[0]} != {self.feature_dim}")

    @property
    def num_emotions(self) -> int:
        return len(self.emotion_names)

    def select(self, ids: Sequence[str]) -> list[Utterance]:
        index = {u.id: u for u in self.utterances}
        missing = [i for i in ids if i not in index]
        if missing:
            raise KeyError(f"unknown utterance ids: {missing[:5]}")
        return [index[i] for i in ids]

    def speakers_of(self, ids: Sequence[str]) -> set[str]:
        return {self.speaker_ids[u.speaker] for u in self.select(ids)}


# ------------------------------------------------------------------ SERF
def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def serialize_serf(dataset: Dataset) -> bytes:
    dataset.validate()
    buf = io.BytesIO()
    buf.write(SERF_MAGIC)
    buf.write(struct.pack("<IIII", SERF_VERSION, dataset.feature_dim,
                          len(dataset.emotion_names), len(dataset.speaker_ids)))
    for name in list(dataset.emotion_names) + list(dataset.speaker_ids):
        buf.write(_pack_str(name))
    buf.write(struct.pack("<I", len(dataset.utterances)))
    for u in dataset.utterances:
        buf.write(_pack_str(u.id))
        buf.write(struct.pack("<III", u.emotion, u.speaker, u.length))
        buf.write(np.ascontiguousarray(u.features.T, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise SerfLengthError(f"truncated SERF file: needed {n} bytes for {what} at offset {self.pos}, "
                                  f"{len(self.raw) - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SerfValidationError(f"{what} is not valid UTF-8") from exc


def deserialize_serf(raw: bytes) -> Dataset:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != SERF_MAGIC:
        raise SerfFormatError(f"bad magic {magic!r}, expected {SERF_MAGIC!r}")
    version = r.u32("version")
    if version != SERF_VERSION:
        raise SerfFormatError(f"unsupported SERF version {version}")
    dim, n_emo, n_spk = r.u32("feature_dim"), r.u32("emotion count"), r.u32("speaker count")
    emotions = [r.text("emotion name") for _ in range(n_emo)]
    speakers = [r.text("speaker id") for _ in range(n_spk)]
    count = r.u32("utterance count")
    utts = []
    for _ in range(count):
        uid = r.text("utterance id")
        emo, spk, frames = r.u32("emotion"), r.u32("speaker"), r.u32("frame count")
        if frames < 1:
            raise SerfValidationError(f"utterance {uid!r} has zero frames")
        block = r.take(4 * dim * frames, f"features of {uid!r}")
        feats = np.frombuffer(block, dtype="<f4").reshape(frames, dim).T.astype(np.float32)
        try:
            utts.append(Utterance(uid, feats, emo, spk))
        except ValueError as exc:
            raise SerfValidationError(str(exc)) from exc
    if r.pos != len(raw):
        raise SerfLengthError(f"{len(raw) - r.pos} trailing bytes after last utterance")
    ds = Dataset(dim, emotions, speakers, utts)
    ds.validate()
    return ds


def write_serf(dataset: Dataset, path) -> None:
    Path(path).write_bytes(serialize_serf(dataset))


def read_serf(path) -> Dataset:
    return deserialize_serf(Path(path).read_bytes())


# ------------------------------------------------------------- synthetic
def _synthetic_defaults() -> dict:
    text = resources.files("serinv").joinpath("fixtures/synthetic_defaults.json").read_text()
    return json.loads(text)


_DEFAULTS = _synthetic_defaults()


@dataclass
class SyntheticSpec:
    num_speakers: int = 35
    utterances_per_speaker: int = 40
    feature_dim: int = _DEFAULTS["feature_dim"]
    num_emotions: int = _DEFAULTS["num_emotions"]
    length_range: tuple[int, int] = tuple(_DEFAULTS["length_range"])
    speaker_offset_scale: float = _DEFAULTS["speaker_offset_scale"]
    speaker_channel_gain_range: tuple[float, float] = tuple(_DEFAULTS["speaker_channel_gain_range"])
    interaction_scale: float = _DEFAULTS["interaction_scale"]
    noise_sigma: float = _DEFAULTS["noise_sigma"]
    template_scale: float = _DEFAULTS["template_scale"]
    seed: int = 0

    def validate(self, min_length: int | None = None) -> None:
        lo, hi = self.length_range
        g_lo, g_hi = self.speaker_channel_gain_range
        if self.num_speakers < 1 or self.utterances_per_speaker < 1:
            raise SyntheticSpecError("need at least one speaker and one utterance per speaker")
        if self.feature_dim < 1 or self.num_emotions < 2:
            raise SyntheticSpecError("feature_dim >= 1 and num_emotions >= 2 required")
        if not 1 <= lo <= hi:
            raise SyntheticSpecError(f"bad length_range {self.length_range}")
        if min(self.speaker_offset_scale, self.interaction_scale, self.noise_sigma,
               self.template_scale, g_lo) < 0 or g_lo > g_hi:
            raise SyntheticSpecError("scales must be non-negative and gain range ordered")
        if min_length is not None and lo < min_length:
            raise SyntheticSpecError(
                f"length_range minimum {lo} is below the model receptive-field minimum {min_length}")


DEFAULT_EMOTIONS = ["happy", "sad", "angry", "neutral"]


def _basis(length: int) -> np.ndarray:
    u = np.arange(length) / length
    return np.stack([np.sin(np.pi * u), np.sin(2 * np.pi * u), u])  # 3 x l


def generate_synthetic(spec: SyntheticSpec, min_length: int | None = None) -> Dataset:
    """Deterministic multi-speaker emotion corpus.

    Speaker identity lives in a per-channel offset and gain, emotion in a
    temporal template, plus a speaker-specific distortion of each template.
    """
    spec.validate(min_length)
    d, E, S = spec.feature_dim, spec.num_emotions, spec.num_speakers
    root = np.random.SeedSequence(spec.seed)
    emo_rng = np.random.default_rng(root.spawn(1)[0])
    templates = emo_rng.normal(0.0, spec.template_scale, (E, d, 3))

    spk_seq, utt_seq = np.random.SeedSequence([spec.seed, 1]), np.random.SeedSequence([spec.seed, 2])
    speakers = []
    for s_seq in spk_seq.spawn(S):
        rng = np.random.default_rng(s_seq)
        offset = rng.normal(0.0, spec.speaker_offset_scale, d)
        gain = rng.uniform(*spec.speaker_channel_gain_range, d)
        interaction = rng.normal(0.0, spec.interaction_scale, (E, d, 3))
        speakers.append((offset, gain, interaction))

    utt_seqs = utt_seq.spawn(S * spec.utterances_per_speaker)
    lo, hi = spec.length_range
    utts = []
    for s, (offset, gain, interaction) in enumerate(speakers):
        for k in range(spec.utterances_per_speaker):
            idx = s * spec.utterances_per_speaker + k
            rng = np.random.default_rng(utt_seqs[idx])
            y = k % E
            length = int(rng.integers(lo, hi + 1))
            phi = _basis(length)
            clean = gain[:, None] * ((templates[y] + interaction[y]) @ phi) + offset[:, None]
            feats = clean + spec.noise_sigma * rng.standard_normal((d, length))
            utts.append(Utterance(f"spk{s:03d}_utt{k:04d}", feats, y, s))

    names = DEFAULT_EMOTIONS[:E] if E <= len(DEFAULT_EMOTIONS) else [f"emotion{k}" for k in range(E)]
    return Dataset(d, names, [f"spk{s:03d}" for s in range(S)], utts)


# ---------------------------------------------------------------- splits
@dataclass
class SplitManifest:
    train: list[str]
    validation: list[str]
    test: list[str]
    fold: int | None = None
    orientation: int | None = None

    def to_json(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitManifest":
        extra = set(obj) - {"train", "validation", "test"}
        if extra:
            raise ValueError(f"unknown split manifest keys: {sorted(extra)}")
        return cls(list(obj["train"]), list(obj["validation"]), list(obj["test"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(json.loads(Path(path).read_text()))

    def speaker_sets(self, dataset: Dataset) -> dict[str, set[str]]:
        return {name: dataset.speakers_of(getattr(self, name)) for name in ("train", "validation", "test")}

    def check(self, dataset: Dataset, require_partition: bool = False) -> None:
        """Raise SplitContractError on shared utterances or speakers across splits."""
        parts = [self.train, self.validation, self.test]
        ids = [i for p in parts for i in p]
        if len(ids) != len(set(ids)):
            raise SplitContractError("an utterance id appears in more than one split")
        if require_partition and set(ids) != {u.id for u in dataset.utterances}:
            raise SplitContractError("splits do not cover the dataset")
        sets = self.speaker_sets(dataset)
        overlap = (sets["train"] & sets["validation"]) | (sets["train"] & sets["test"]) \
            | (sets["validation"] & sets["test"])
        if overlap:
            names = sorted(overlap)
            raise SplitContractError(f"speakers shared across splits: {','.join(names)}", names)


def split_by_speaker(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitManifest:
    S = len(dataset.speaker_ids)
    if S < 3:
        raise SplitContractError(f"need at least 3 speakers to split, got {S}")
    if len(fractions) != 3 or min(fractions) < 0 or not np.isclose(sum(fractions), 1.0):
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(S)
    n_val = max(1, int(round(S * fractions[1])))
    n_test = max(1, int(round(S * fractions[2])))
    n_train = S - n_val - n_test
    if n_train < 1:
        raise SplitContractError(f"{S} speakers cannot fill three splits at {fractions}")
    groups = [set(order[:n_train]), set(order[n_train:n_train + n_val]), set(order[n_train + n_val:])]
    split = [[u.id for u in dataset.utterances if u.speaker in g] for g in groups]
    return SplitManifest(*split)


def read_speaker_metadata(path) -> dict[str, dict]:
    return json.loads(Path(path).read_text())


def write_speaker_metadata(meta: dict[str, dict], path) -> None:
    Path(path).write_text(json.dumps(meta, indent=1, ensure_ascii=False))


def pseudo_sessions(dataset: Dataset, k: int = 5) -> dict[str, dict]:
    """Tag speakers round-robin into ``k`` sessions (``Ses01`` ...)."""
    return {spk: {"session": f"Ses{i % k + 1:02d}"} for i, spk in enumerate(dataset.speaker_ids)}


def make_cv_folds(dataset: Dataset, metadata: dict[str, dict], k: int = 5) -> list[SplitManifest]:
    """Leave-one-session-out folds; each fold yields two manifests (val/test speakers swapped)."""
    sessions: dict[str, list[int]] = defaultdict(list)
    for s, spk in enumerate(dataset.speaker_ids):
        if spk not in metadata or "session" not in metadata[spk]:
            raise LayoutError(f"speaker {spk!r} has no session tag")
        sessions[metadata[spk]["session"]].append(s)
    names = sorted(sessions)
    if len(names) != k:
        raise LayoutError(f"expected {k} sessions, found {len(names)}")
    for name in names:
        if len(sessions[name]) != 2:
            raise LayoutError(f"session {name!r} has {len(sessions[name])} speakers, expected 2")
    folds = []
    for i, name in enumerate(names):
        held = sessions[name]
        train = [u.id for u in dataset.utterances if u.speaker not in held]
        for orient, (val_spk, test_spk) in enumerate([(held[0], held[1]), (held[1], held[0])]):
            val = [u.id for u in dataset.utterances if u.speaker == val_spk]
            test = [u.id for u in dataset.utterances if u.speaker == test_spk]
            folds.append(SplitManifest(train, val, test, fold=i, orientation=orient))
    return folds


# --------------------------------------------------------------- batches
def collate(utts: Sequence[Utterance], num_emotions: int, num_speakers: int,
            speaker_index: dict[int, int] | None = None) -> SequenceBatch:
    """Zero-padded batch; speakers missing from ``speaker_index`` get an all-zero target row."""
    B = len(utts)
    L = max(u.length for u in utts)
    d = utts[0].features.shape[0]
    feats = np.zeros((B, d, L))
    emo = np.zeros((B, num_emotions))
    spk = np.zeros((B, num_speakers))
    for b, u in enumerate(utts):
        feats[b, :, :u.length] = u.features
        emo[b, u.emotion] = 1.0
        col = u.speaker if speaker_index is None else speaker_index.get(u.speaker)
        if col is not None and col < num_speakers:
            spk[b, col] = 1.0
    return SequenceBatch(feats, [u.length for u in utts], emo, spk, [u.id for u in utts])


def batch_order(lengths: Sequence[int], batch_size: int, seed: int, epoch: int,
                min_batch: int = 1) -> list[np.ndarray]:
    """Length-bucketed index batches: shuffle, stable-sort by length, slice, shuffle batches."""
    rng = np.random.default_rng([seed, epoch])
    lengths = np.asarray(lengths)
    perm = rng.permutation(len(lengths))
    order = perm[np.argsort(lengths[perm], kind="stable")]
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_batch:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return [chunks[i] for i in rng.permutation(len(chunks))]


def make_batches(utts: Sequence[Utterance], batch_size: int, seed: int, epoch: int,
                 num_emotions: int, num_speakers: int, speaker_index: dict[int, int] | None = None,
                 min_batch: int = 1) -> list[SequenceBatch]:
    groups = batch_order([u.length for u in utts], batch_size, seed, epoch, min_batch)
    return [collate([utts[i] for i in g], num_emotions, num_speakers, speaker_index) for g in groups]
