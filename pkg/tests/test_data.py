import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from serinv.data import (Dataset, LayoutError, SerfError, SerfFormatError, SerfLengthError, SerfValidationError,
                         SplitContractError, SplitManifest, SyntheticSpec, SyntheticSpecError, Utterance,
                         batch_order, collate, deserialize_serf, generate_synthetic, make_batches, make_cv_folds,
                         pseudo_sessions, read_serf, serialize_serf, split_by_speaker, write_serf)


def hand_written_serf(ds):
    """Byte layout written field by field, independent of serialize_serf."""
    out = [b"SERF", struct.pack("<I", 1), struct.pack("<I", ds.feature_dim),
           struct.pack("<I", len(ds.emotion_names)), struct.pack("<I", len(ds.speaker_ids))]
    for s in ds.emotion_names + ds.speaker_ids:
        raw = s.encode("utf-8")
        out += [struct.pack("<I", len(raw)), raw]
    out.append(struct.pack("<I", len(ds.utterances)))
    for u in ds.utterances:
        raw = u.id.encode("utf-8")
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<III", u.emotion, u.speaker, u.length)]
        for t in range(u.length):
            out += [struct.pack("<f", v) for v in u.features[:, t]]
    return b"".join(out)


def random_dataset(rng, n_utts=None, ids=None):
    d, E, S = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    n = int(rng.integers(0, 6)) if n_utts is None else n_utts
    utts = []
    for i in range(n):
        uid = ids[i] if ids else f"u{i}_{rng.integers(1000)}"
        utts.append(Utterance(uid, rng.standard_normal((d, int(rng.integers(1, 7)))), int(rng.integers(E)),
                              int(rng.integers(S))))
    return Dataset(d, [f"e{k}" for k in range(E)], [f"s{k}" for k in range(S)], utts)


def same_dataset(a, b):
    assert (a.feature_dim, a.emotion_names, a.speaker_ids) == (b.feature_dim, b.emotion_names, b.speaker_ids)
    assert len(a.utterances) == len(b.utterances)
    for x, y in zip(a.utterances, b.utterances):
        assert (x.id, x.emotion, x.speaker) == (y.id, y.emotion, y.speaker)
        assert x.features.tobytes() == y.features.tobytes()


# -------------------------------------------------------------------- SERF
@given(st.integers(0, 2**32 - 1))
def test_serf_round_trip_and_byte_layout(seed):
    ds = random_dataset(np.random.default_rng(seed))
    raw = serialize_serf(ds)
    assert raw == hand_written_serf(ds)
    same_dataset(deserialize_serf(raw), ds)


def test_serf_non_ascii_ids(tmp_path):
    ids = ["çümlé_01", "发言人-2", "🙂"]
    ds = random_dataset(np.random.default_rng(0), n_utts=3, ids=ids)
    ds.speaker_ids = ["Ωmega"] + ds.speaker_ids[1:]
    write_serf(ds, tmp_path / "x.serf")
    back = read_serf(tmp_path / "x.serf")
    assert [u.id for u in back.utterances] == ids and back.speaker_ids[0] == "Ωmega"


def test_serf_empty_dataset():
    ds = Dataset(3, ["a", "b"], [], [])
    same_dataset(deserialize_serf(serialize_serf(ds)), ds)


def test_serf_bad_magic_and_version():
    raw = serialize_serf(random_dataset(np.random.default_rng(1)))
    with pytest.raises(SerfFormatError, match="magic"):
        deserialize_serf(b"XERF" + raw[4:])
    with pytest.raises(SerfFormatError, match="version"):
        deserialize_serf(raw[:4] + struct.pack("<I", 2) + raw[8:])


def test_serf_truncation_at_every_cut():
    raw = serialize_serf(random_dataset(np.random.default_rng(2), n_utts=3))
    for cut in range(len(raw)):
        with pytest.raises(SerfError):
            deserialize_serf(raw[:cut])
    with pytest.raises(SerfLengthError, match="trailing"):
        deserialize_serf(raw + b"\x00")


def test_serf_label_out_of_range():
    ds = Dataset(1, ["a", "b"], ["s"], [Utterance("x", np.ones((1, 2)), 0, 0)])
    raw = bytearray(serialize_serf(ds))
    pos = raw.index(b"x") + 1
    raw[pos:pos + 4] = struct.pack("<I", 7)
    with pytest.raises(SerfValidationError, match="emotion label 7"):
        deserialize_serf(bytes(raw))
    ds.utterances[0].speaker = 3
    with pytest.raises(SerfValidationError, match="speaker label 3"):
        serialize_serf(ds)


def test_serf_rejects_non_finite_and_duplicates():
    ds = Dataset(1, ["a", "b"], ["s"], [Utterance("x", np.ones((1, 2)), 0, 0)])
    raw = bytearray(serialize_serf(ds))
    raw[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(SerfValidationError):
        deserialize_serf(bytes(raw))
    ds.utterances.append(Utterance("x", np.ones((1, 2)), 1, 0))
    with pytest.raises(SerfValidationError, match="duplicate"):
        serialize_serf(ds)


# --------------------------------------------------------------- synthetic
def test_synthetic_counts_and_labels():
    spec = SyntheticSpec(num_speakers=5, utterances_per_speaker=8, feature_dim=4, num_emotions=3,
                         length_range=(10, 12), seed=1)
    ds = generate_synthetic(spec)
    assert len(ds.utterances) == 40 and ds.speaker_ids == [f"spk{s:03d}" for s in range(5)]
    assert ds.emotion_names == ["happy", "sad", "angry"]
    for s in range(5):
        emos = [u.emotion for u in ds.utterances if u.speaker == s]
        assert np.bincount(emos).tolist() == [3, 3, 2]
    assert all(10 <= u.length <= 12 and u.features.shape[0] == 4 for u in ds.utterances)


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(num_speakers=3, utterances_per_speaker=4, seed=9)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert serialize_serf(a) == serialize_serf(b)
    assert serialize_serf(a) != serialize_serf(generate_synthetic(SyntheticSpec(3, 4, seed=10)))


def test_synthetic_speaker_offset_is_frame_mean():
    # no template, interaction or gain spread: every frame is offset + noise
    spec = SyntheticSpec(num_speakers=4, utterances_per_speaker=30, feature_dim=3, length_range=(50, 50),
                         template_scale=0.0, interaction_scale=0.0, speaker_channel_gain_range=(1.0, 1.0),
                         noise_sigma=0.5, seed=4)
    ds = generate_synthetic(spec)
    for s in range(4):
        frames = np.concatenate([u.features for u in ds.utterances if u.speaker == s], axis=1)
        per_utt = np.stack([u.features.mean(1) for u in ds.utterances if u.speaker == s])
        # utterance means scatter around one speaker offset with std noise / sqrt(50)
        se = 0.5 / np.sqrt(50)
        assert np.all(np.abs(per_utt - frames.mean(1)) < 5 * se)
    means = [np.concatenate([u.features for u in ds.utterances if u.speaker == s], 1).mean(1) for s in range(4)]
    assert min(np.linalg.norm(means[i] - means[j]) for i in range(4) for j in range(i)) > 0.1


def test_synthetic_noise_free_emotion_shares_template():
    spec = SyntheticSpec(num_speakers=3, utterances_per_speaker=8, feature_dim=5, length_range=(20, 20),
                         speaker_offset_scale=0.0, speaker_channel_gain_range=(1.0, 1.0),
                         interaction_scale=0.0, noise_sigma=0.0, seed=2)
    ds = generate_synthetic(spec)
    for e in range(4):
        same = [u.features for u in ds.utterances if u.emotion == e]
        for f in same[1:]:
            np.testing.assert_allclose(f, same[0], atol=1e-6)
    assert not np.allclose(ds.utterances[0].features, ds.utterances[1].features)


def test_synthetic_spec_errors():
    with pytest.raises(SyntheticSpecError, match="receptive-field"):
        generate_synthetic(SyntheticSpec(length_range=(5, 10)), min_length=17)
    for bad in ({"length_range": (10, 5)}, {"noise_sigma": -1.0}, {"num_emotions": 1},
                {"speaker_channel_gain_range": (1.3, 0.7)}):
        with pytest.raises(SyntheticSpecError):
            generate_synthetic(SyntheticSpec(num_speakers=2, utterances_per_speaker=2, **bad))


# ------------------------------------------------------------------ splits
def speaker_dataset(S, per=2):
    utts = [Utterance(f"s{s}_{k}", np.zeros((1, 3)), k % 2, s) for s in range(S) for k in range(per)]
    return Dataset(1, ["a", "b"], [f"S{s:03d}" for s in range(S)], utts)


def test_split_250_speakers():
    ds = speaker_dataset(250)
    m = split_by_speaker(ds, (0.8, 0.1, 0.1), seed=0)
    sets = m.speaker_sets(ds)
    assert [len(sets[k]) for k in ("train", "validation", "test")] == [200, 25, 25]
    m.check(ds, require_partition=True)
    assert split_by_speaker(ds, seed=0) == m and split_by_speaker(ds, seed=1) != m


def test_split_errors():
    with pytest.raises(SplitContractError):
        split_by_speaker(speaker_dataset(2))
    with pytest.raises(ValueError):
        split_by_speaker(speaker_dataset(10), (0.5, 0.5, 0.5))


def test_manifest_check_names_shared_speakers():
    ds = speaker_dataset(4)
    m = SplitManifest(["s0_0", "s1_0"], ["s1_1", "s2_0"], ["s3_0"])
    with pytest.raises(SplitContractError, match="S001") as info:
        m.check(ds)
    assert info.value.speakers == ["S001"]
    with pytest.raises(SplitContractError, match="more than one"):
        SplitManifest(["s0_0"], ["s0_0"], []).check(ds)
    with pytest.raises(SplitContractError, match="cover"):
        SplitManifest(["s0_0"], ["s1_0"], ["s2_0"]).check(ds, require_partition=True)


def test_manifest_json(tmp_path):
    m = SplitManifest(["a"], ["b"], ["c"])
    m.save(tmp_path / "m.json")
    assert SplitManifest.load(tmp_path / "m.json") == m
    with pytest.raises(ValueError, match="unknown"):
        SplitManifest.from_json({"train": [], "validation": [], "test": [], "dev": []})


def test_cv_folds_cover_each_speaker_once():
    ds = speaker_dataset(10)
    folds = make_cv_folds(ds, pseudo_sessions(ds), k=5)
    assert len(folds) == 10
    held_val, held_test = [], []
    for m in folds:
        m.check(ds, require_partition=True)
        sets = m.speaker_sets(ds)
        assert len(sets["train"]) == 8 and len(sets["validation"]) == len(sets["test"]) == 1
        held_val += sets["validation"]
        held_test += sets["test"]
    assert sorted(held_val) == sorted(held_test) == ds.speaker_ids
    for i in range(5):
        a, b = folds[2 * i], folds[2 * i + 1]
        assert (a.fold, a.orientation, b.orientation) == (i, 0, 1)
        assert a.validation == b.test and a.test == b.validation and a.train == b.train


def test_cv_layout_errors():
    ds = speaker_dataset(10)
    meta = pseudo_sessions(ds)
    with pytest.raises(LayoutError, match="no session"):
        make_cv_folds(ds, {k: v for k, v in list(meta.items())[1:]})
    meta["S000"] = {"session": "Ses02"}
    with pytest.raises(LayoutError):
        make_cv_folds(ds, meta)
    with pytest.raises(LayoutError, match="expected 4"):
        make_cv_folds(ds, pseudo_sessions(ds), k=4)


# ----------------------------------------------------------------- batches
def test_batch_sizes_and_coverage():
    groups = batch_order(list(range(1, 101)), 32, seed=0, epoch=0)
    assert sorted(len(g) for g in groups) == [4, 32, 32, 32]
    assert sorted(np.concatenate(groups).tolist()) == list(range(100))


def test_batch_tail_merge():
    groups = batch_order([5] * 33, 32, seed=0, epoch=0, min_batch=2)
    assert [len(g) for g in groups] == [33]


def test_batches_reshuffle_per_epoch_and_bucket_lengths():
    lengths = np.random.default_rng(0).integers(10, 300, 200)
    e0, e1 = batch_order(lengths, 16, 5, 0), batch_order(lengths, 16, 5, 1)
    assert [g.tolist() for g in e0] != [g.tolist() for g in e1]
    assert [g.tolist() for g in e0] == [g.tolist() for g in batch_order(lengths, 16, 5, 0)]
    spread = np.mean([np.ptp(lengths[g]) for g in e0])
    assert spread < 0.25 * np.ptp(lengths)


def test_collate_zero_pads_and_one_hot():
    utts = [Utterance("a", np.ones((2, 3)), 1, 0), Utterance("b", 2 * np.ones((2, 5)), 0, 4)]
    batch = collate(utts, 2, 3, speaker_index={0: 2})
    assert batch.features.shape == (2, 2, 5)
    assert np.all(batch.features[0, :, 3:] == 0.0) and np.all(batch.features[1] == 2.0)
    np.testing.assert_array_equal(batch.emotion_targets, [[0, 1], [1, 0]])
    np.testing.assert_array_equal(batch.speaker_targets, [[0, 0, 1], [0, 0, 0]])
    assert list(batch.valid_lengths) == [3, 5]


def test_make_batches_keeps_every_utterance(tiny_dataset):
    utts = tiny_dataset.utterances
    batches = make_batches(utts, 32, 0, 0, 2, 10)
    ids = [i for b in batches for i in b.ids]
    assert sorted(ids) == sorted(u.id for u in utts)


def test_speaker_metadata_json_round_trip(tmp_path):
    from serinv.data import read_speaker_metadata, write_speaker_metadata
    meta = pseudo_sessions(speaker_dataset(4), k=2)
    write_speaker_metadata(meta, tmp_path / "m.json")
    assert read_speaker_metadata(tmp_path / "m.json") == meta == json.loads((tmp_path / "m.json").read_text())
