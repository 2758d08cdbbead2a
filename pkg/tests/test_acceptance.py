"""One test per acceptance criterion; each prints a single PASS/FAIL line.

The criterion-4 run takes most of the 15 minute budget. Skip it with
``-m "not slow"``.
"""

import contextlib
import json
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from serinv import autodiff as ad
from serinv import cli
from serinv import layers as L
from serinv.autodiff import Tensor
from serinv.data import (Dataset, SerfError, SerfFormatError, SerfLengthError, Utterance, deserialize_serf,
                         make_cv_folds, pseudo_sessions, serialize_serf, split_by_speaker)
from serinv.experiment import ExperimentPlan, run_experiment, summarize
from serinv.gradcheck import run_suite
from serinv.model import forward
from serinv.training import OptimizerState, TrainConfig, cgt_perturb, emotion_loss, loss_dat, speaker_loss, train_step

ROOT = Path(__file__).resolve().parents[1]
FIXTURE = json.loads((ROOT / "tests" / "fixtures" / "acceptance_thresholds.json").read_text())


@contextlib.contextmanager
def criterion(n, title):
    notes = []
    try:
        yield notes
    except BaseException as exc:
        line = f"CRITERION {n}: FAIL {title} :: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"CRITERION {n}: PASS {title}" + (f" :: {'; '.join(notes)}" if notes else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


# ------------------------------------------------------------------------ 1
def test_criterion_1_gradient_correctness():
    with criterion(1, "gradient checks below 1e-4 in under 60 s") as notes:
        result = run_suite(seed=0)
        worst = max(result.reports, key=lambda r: r.max_rel_error)
        notes.append(f"{len(result.reports)} checks, worst {worst.op_name}={worst.max_rel_error:.2e}, "
                     f"{result.seconds:.1f}s")
        names = {r.op_name for r in result.reports}
        assert {"dat_lambda=0", "dat_lambda=0.5", "dat_lambda=1", "mtl"} <= names
        assert sum(n.startswith("cgt_alpha=") for n in names) == 6
        assert result.passed, [(r.op_name, r.max_rel_error) for r in result.failures]
        assert result.seconds < 60.0


# ------------------------------------------------------------------------ 2
def _conv_loop(x, k, b, dil):
    c_out, c_in, K = k.shape
    out = np.zeros((c_out, x.shape[1] - dil * (K - 1)))
    for c in range(c_out):
        for t in range(out.shape[1]):
            out[c, t] = b[c] + sum(k[c, j, i] * x[j, t + i * dil] for j in range(c_in) for i in range(K))
    return out


def _step(params, batch, **cfg):
    p = params.clone()
    train_step(batch, p, OptimizerState.zeros(p.named_parameters()), TrainConfig(**cfg), seed=11)
    return {n: t.data.copy() for n, t in p.named_parameters().items()}


def test_criterion_2_oracle_equivalences(tiny):
    with criterion(2, "oracle equivalences at 1e-10") as notes:
        params, batch = tiny
        emb = list(params.named_parameters("embed.").values())
        worst = 0.0
        for lam in (0.5, 1.0):
            out = forward(params, batch, True, grl_lambda=lam, seed=4, update_stats=False)
            g_dat = ad.grad(loss_dat(out, batch), emb)
            g_emo = ad.grad(emotion_loss(forward(params, batch, True, seed=4, update_stats=False), batch), emb)
            g_spk = ad.grad(speaker_loss(forward(params, batch, True, seed=4, update_stats=False), batch), emb)
            worst = max(worst, max(float(np.abs(a - (e - lam * s)).max()) for a, e, s in zip(g_dat, g_emo, g_spk)))
        assert worst <= 1e-10, f"DAT gradient deviates by {worst:.2e}"
        notes.append(f"DAT {worst:.1e}")

        alpha, eps, lr, mu = 0.5, 1.0, 0.05, 0.9
        x_s, x_y = cgt_perturb(batch, params, eps, seed=11)
        names = list(params.named_parameters())
        tensors = list(params.named_parameters().values())

        def term(inputs, fn):
            out = forward(params, batch, True, seed=11, update_stats=False,
                          inputs=None if inputs is None else Tensor(inputs))
            return ad.grad(fn(out, batch), tensors)

        parts = [term(None, emotion_loss), term(None, speaker_loss), term(x_s, emotion_loss), term(x_y, speaker_loss)]
        w = (1 - alpha, 1 - alpha, alpha, alpha)
        grads = [sum(wk * p[i] for wk, p in zip(w, parts)) for i in range(len(names))]
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        scale = min(1.0, 5.0 / norm)
        stepped = _step(params, batch, strategy="CGT", cgt_alpha=alpha, cgt_epsilon=eps, learning_rate=lr)
        dev = max(float(np.abs(stepped[n] - (t.data - lr * (1 + mu) * scale * g)).max())
                  for n, t, g in zip(names, tensors, grads))
        assert dev <= 1e-10, f"CGT update deviates by {dev:.2e}"
        notes.append(f"CGT {dev:.1e}")

        rng = np.random.default_rng(0)
        conv_dev = 0.0
        for dil, K in ((1, 3), (2, 5), (4, 3)):
            x, k, b = rng.standard_normal((3, 20)), rng.standard_normal((2, 3, K)), rng.standard_normal(2)
            out = L.conv1d_dilated(Tensor(x), L.TdnnLayer(Tensor(k), Tensor(b), dil)).data
            conv_dev = max(conv_dev, float(np.abs(out - _conv_loop(x, k, b, dil)).max()))
        assert conv_dev <= 1e-10, f"conv deviates by {conv_dev:.2e}"
        notes.append(f"conv {conv_dev:.1e}")

        mtl = _step(params, batch, strategy="MTL", learning_rate=lr)
        for a, e in ((0.0, 1.0), (0.5, 0.0), (1.0, 0.0)):
            cgt = _step(params, batch, strategy="CGT", cgt_alpha=a, cgt_epsilon=e, learning_rate=lr)
            assert all(cgt[n].tobytes() == mtl[n].tobytes() for n in mtl), f"alpha={a} eps={e} differs from MTL"
        notes.append("alpha=0/eps=0 bit-identical to MTL")


# ------------------------------------------------------------------------ 3
def test_criterion_3_determinism(tmp_path):
    with criterion(3, "identical train runs are bit-identical") as notes:
        cfg = {"model": "small", "train": {"strategy": "CGT", "epochs": 2, "learning_rate": 0.01, "batch_size": 16},
               "data": {"synthetic": {"num_speakers": 6, "utterances_per_speaker": 12, "length_range": [40, 80]}}}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        outputs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert cli.run(["train", "--config", str(path), "--seed", "3", "--output-dir", str(out)]) == 0
            outputs.append({f: (out / f).read_bytes() for f in ("history.csv", "checkpoint.serm")})
        assert outputs[0] == outputs[1]
        notes.append(f"history {len(outputs[0]['history.csv'])} B, checkpoint {len(outputs[0]['checkpoint.serm'])} B")


# ------------------------------------------------------------------------ 4
@pytest.mark.slow
def test_criterion_4_directional_reproduction():
    with criterion(4, "synthetic directional reproduction") as notes:
        cfg = cli.load_config(str(ROOT / FIXTURE["config"]))
        plan = ExperimentPlan(cfg.model, cfg.train, cfg.synthetic, cfg.seeds, cfg.strategies, cfg.speaker_counts,
                              cfg.workers)
        t0 = time.perf_counter()
        summary = summarize(run_experiment(plan))
        seconds = time.perf_counter() - t0
        ser, mtl, dat, cgt = (summary[k] for k in ("SER_ONLY", "MTL", "DAT", "CGT"))
        th = FIXTURE["thresholds"]
        reduction = 1.0 - dat.leakage_mean / ser.leakage_mean
        checks = {
            "a": (reduction >= th["min_relative_leakage_reduction"],
                  f"leakage SER {ser.leakage_mean:.2f} DAT {dat.leakage_mean:.2f} reduction {reduction:.1%}"),
            "b": (dat.test_mean >= ser.test_mean - th["max_accuracy_drop"] and dat.gap <= ser.gap,
                  f"test SER {ser.test_mean:.3f} DAT {dat.test_mean:.3f}, gap SER {ser.gap:.3f} DAT {dat.gap:.3f}"),
            "c": (cgt.test_mean >= mtl.test_mean - th["max_accuracy_drop"],
                  f"test MTL {mtl.test_mean:.3f} CGT {cgt.test_mean:.3f}"),
            "runtime": (seconds < th["max_seconds"], f"{seconds:.0f}s"),
        }
        for key, (ok, detail) in checks.items():
            notes.append(f"({key}) {'ok' if ok else 'FAILED'} {detail}")
        failed = [k for k, (ok, _) in checks.items() if not ok]
        assert not failed, "; ".join(notes)


# ------------------------------------------------------------------------ 5
def _speakers(S, per=3):
    utts = [Utterance(f"s{s}_{k}", np.zeros((1, 2)), k % 2, s) for s in range(S) for k in range(per)]
    return Dataset(1, ["a", "b"], [f"Spk{s:03d}" for s in range(S)], utts)


def test_criterion_5_protocol_fidelity():
    with criterion(5, "session folds and 250-speaker split") as notes:
        ds = _speakers(10)
        meta = pseudo_sessions(ds, 5)
        folds = make_cv_folds(ds, meta, 5)
        assert len(folds) == 10
        for m in folds:
            m.check(ds, require_partition=True)
            sets = m.speaker_sets(ds)
            held = {meta[s]["session"] for s in sets["validation"] | sets["test"]}
            assert len(held) == 1 and len(sets["validation"]) == 1 and len(sets["test"]) == 1
            assert len({meta[s]["session"] for s in sets["train"]}) == 4 and not held & {
                meta[s]["session"] for s in sets["train"]}
        notes.append("10 manifests, 4 train sessions, 1+1 held-out speakers")
        big = _speakers(250, per=1)
        m = split_by_speaker(big, (0.8, 0.1, 0.1), seed=0)
        counts = [len(v) for v in m.speaker_sets(big).values()]
        assert counts == [200, 25, 25], counts
        notes.append("250 -> 200/25/25")


# ------------------------------------------------------------------------ 6
def _fuzz_dataset(rng):
    d, E, S = int(rng.integers(1, 6)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
    alphabet = "abcxyz_-0123456789éü中"
    utts = []
    for i in range(int(rng.integers(0, 8))):
        name = "".join(rng.choice(list(alphabet), int(rng.integers(1, 10))))
        feats = rng.standard_normal((d, int(rng.integers(1, 9)))) * 10.0 ** rng.integers(-3, 4)
        utts.append(Utterance(f"{i}:{name}", feats, int(rng.integers(E)), int(rng.integers(S))))
    return Dataset(d, [f"emo{k}" for k in range(E)], [f"speaker-{k}" for k in range(S)], utts)


def test_criterion_6_format_robustness():
    with criterion(6, "SERF fuzz round trip and corruption handling") as notes:
        rng = np.random.default_rng(2024)
        total_bytes = 0
        for _ in range(100):
            ds = _fuzz_dataset(rng)
            raw = serialize_serf(ds)
            back = deserialize_serf(raw)
            assert serialize_serf(back) == raw
            assert [u.id for u in back.utterances] == [u.id for u in ds.utterances]
            assert all(a.features.tobytes() == b.features.tobytes() for a, b in zip(ds.utterances, back.utterances))
            total_bytes += len(raw)
        notes.append(f"100 datasets, {total_bytes} bytes")

        raw = serialize_serf(_fuzz_dataset(np.random.default_rng(7)))
        with pytest.raises(SerfFormatError):
            deserialize_serf(b"SERX" + raw[4:])
        with pytest.raises(SerfFormatError):
            deserialize_serf(raw[:4] + struct.pack("<I", 99) + raw[8:])
        for cut in range(len(raw)):
            with pytest.raises(SerfLengthError):
                deserialize_serf(raw[:cut])
        flips = 0
        for _ in range(300):
            bad = bytearray(raw)
            pos = int(rng.integers(len(bad)))
            bad[pos] ^= 1 << int(rng.integers(8))
            try:
                deserialize_serf(bytes(bad))
            except SerfError:
                flips += 1
        notes.append(f"{len(raw)} truncations, {flips}/300 bit flips rejected with SerfError")
