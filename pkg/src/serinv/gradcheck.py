"""Finite-difference gradient checks for every primitive, layer and composite training loss."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import GradCheckReport, Tensor, check_gradients, numeric_gradient, relative_error
from .data import Utterance, collate
from .model import ModelParameters, build_model, forward, preset
from .training import cgt_objective, cgt_perturb, emotion_loss, loss_dat, loss_mtl, speaker_loss

TOLERANCE = 1e-4


@dataclass
class SuiteResult:
    reports: list[GradCheckReport] = field(default_factory=list)
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def failures(self) -> list[GradCheckReport]:
        return [r for r in self.reports if not r.max_rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _onehot_targets(rng, b, c):
    return np.eye(c)[rng.integers(c, size=b)]


def primitive_checks(seed: int = 0) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    targets = _onehot_targets(rng, 5, 4)
    cases: list[tuple[str, Callable, list[tuple], dict]] = [
        ("add", lambda a, b: a + b, [(3, 4), (4,)], {}),
        ("sub", lambda a, b: a - b, [(3, 4), (3, 1)], {}),
        ("mul", lambda a, b: a * b, [(3, 4), (3, 4)], {}),
        ("div", lambda a, b: a / b, [(3, 4), (3, 4)], {"sampler": _positive}),
        ("neg", lambda a: -a, [(5,)], {}),
        ("power", lambda a: a ** 3, [(5,)], {}),
        ("exp", ad.exp, [(3, 4)], {}),
        ("log", ad.log, [(3, 4)], {"sampler": _positive}),
        ("sqrt", ad.sqrt, [(3, 4)], {"sampler": _positive}),
        ("tanh", ad.tanh, [(3, 4)], {}),
        ("sigmoid", ad.sigmoid, [(3, 4)], {}),
        ("relu", ad.relu, [(3, 4)], {"avoid_kinks": True}),
        ("matmul", ad.matmul, [(3, 4), (4, 2)], {}),
        ("sum", lambda a: ad.tsum(a, axis=1), [(3, 4)], {}),
        ("mean", lambda a: ad.tmean(a, axis=0, keepdims=True), [(3, 4)], {}),
        ("reshape", lambda a: ad.reshape(a, (4, 3)), [(3, 4)], {}),
        ("transpose", lambda a: ad.transpose(a, (1, 0)), [(3, 4)], {}),
        ("getitem", lambda a: ad.getitem(a, (slice(1, 3), [0, 2, 2])), [(3, 4)], {}),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(3, 4), (3, 2)], {}),
        ("cross_entropy", lambda z: ad.cross_entropy(z, targets), [(5, 4)], {}),
    ]
    reports = [check_gradients(op, shapes, seed=seed, op_name=name, **kw) for name, op, shapes, kw in cases]
    return reports + [check_grad_reverse(lam, seed) for lam in (0.0, 0.5, 1.0)]


def check_grad_reverse(lam: float, seed: int = 0) -> GradCheckReport:
    """The reversal node is deliberately not the derivative of its forward map: its
    reference is ``-lam`` times the numeric derivative of the (identity) forward."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    leaf = Tensor(x.copy(), requires_grad=True)
    (ad.grad_reverse(leaf, lam) * Tensor(w)).sum().backward()
    numeric = -lam * numeric_gradient(lambda: float(np.sum(ad.grad_reverse(Tensor(x), lam).data * w)), x)
    err = float(relative_error(leaf.grad, numeric).max())
    return GradCheckReport(f"grad_reverse_lambda={lam:g}", err, [err])


def _masked_input(rng, shape, lengths):
    x = rng.standard_normal(shape)
    return np.where(L.frame_mask(lengths, shape[2])[:, None, :], x, 0.0)


def layer_checks(seed: int = 0) -> list[GradCheckReport]:
    lengths = np.array([7, 5, 6])

    def conv(x, k, b):
        return L.conv1d(x, k, b, 2)

    def lstm(x, a1, b1, c1, a2, b2, c2):
        layer = L.BiLstmLayer(L.LstmDirection(a1, b1, c1), L.LstmDirection(a2, b2, c2))
        return L.bilstm(x, [4, 3], layer)

    def lstm_single(x, a1, b1, c1, a2, b2, c2):
        layer = L.BiLstmLayer(L.LstmDirection(a1, b1, c1), L.LstmDirection(a2, b2, c2))
        return L.bilstm_forward(x, layer)

    def pool(x):
        return L.masked_stats_pool(x, lengths)

    def pool_single(x):
        return L.stats_pool(x, 3)

    def bn_train(x, g, b):
        layer = L.BatchNorm1d(g, b, np.zeros(3), np.ones(3))
        return L.batchnorm_forward(x, layer, True, lengths)

    def bn_train_2d(x, g, b):
        return L.batchnorm_forward(x, L.BatchNorm1d(g, b, np.zeros(3), np.ones(3)), True)

    def bn_eval(x, g, b):
        layer = L.BatchNorm1d(g, b, np.array([0.1, -0.2, 0.3]), np.array([0.5, 1.5, 2.0]))
        return L.batchnorm_forward(x, layer, False, lengths)

    def dropout(x):
        return L.dropout_forward(x, 0.5, True, np.random.default_rng(7))

    def dense(x, w, b):
        return L.linear(x, L.DenseLayer(w, b))

    def dense_frames(x, w):
        return L.linear(x, L.DenseLayer(w, None))

    H, F = 3, 2
    lstm_shapes = [(4 * H, F), (4 * H, H), (4 * H,)] * 2
    masked = lambda r, s: _masked_input(r, s, lengths) if len(s) == 3 else r.standard_normal(s)  # noqa: E731
    cases = [
        ("conv1d_dilated", conv, [(2, 3, 9), (4, 3, 3), (4,)], {}),
        ("bilstm", lstm, [(2, F, 4)] + lstm_shapes, {}),
        ("bilstm_single", lstm_single, [(F, 4)] + lstm_shapes, {}),
        ("stats_pool", pool, [(3, 4, 7)], {"sampler": masked}),
        ("stats_pool_single", pool_single, [(4, 5)], {}),
        ("batchnorm_train", bn_train, [(3, 3, 7), (3,), (3,)], {"sampler": masked}),
        ("batchnorm_train_2d", bn_train_2d, [(5, 3), (3,), (3,)], {}),
        ("batchnorm_eval", bn_eval, [(3, 3, 7), (3,), (3,)], {"sampler": masked}),
        ("dropout", dropout, [(4, 6)], {}),
        ("linear", dense, [(5, 4), (3, 4), (3,)], {}),
        ("linear_frames", dense_frames, [(2, 4, 6), (3, 4)], {}),
    ]
    return [check_gradients(op, shapes, seed=seed, op_name=name, **kw) for name, op, shapes, kw in cases]


# -------------------------------------------------------------- composites
def tiny_setup(seed: int = 0, batch: int = 4, max_len: int = 12):
    """Tiny model plus a padded batch of ``batch`` utterances (lengths max_len, max_len-1, ...)."""
    cfg = preset("tiny").with_labels(2, 3)
    params = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    utts = [Utterance(f"u{i}", rng.standard_normal((cfg.feature_dim, max_len - i)).astype(np.float32),
                      i % 2, i % 3) for i in range(batch)]
    return params, collate(utts, 2, 3, {0: 0, 1: 1, 2: 2})


def _compare(name: str, params: ModelParameters, analytic: dict[str, np.ndarray],
             objectives: Callable[[str], Callable[[], float]]) -> GradCheckReport:
    errors = []
    for pname, t in params.named_parameters().items():
        num = numeric_gradient(objectives(pname), t.data)
        errors.append(float(relative_error(analytic[pname], num).max()))
    return GradCheckReport(name, max(errors), errors)


def _analytic(params: ModelParameters, loss: Tensor) -> dict[str, np.ndarray]:
    named = params.named_parameters()
    grads = ad.grad(loss, list(named.values()))
    return dict(zip(named, grads))


def check_mtl(params: ModelParameters, batch: L.SequenceBatch, seed: int = 3) -> GradCheckReport:
    def value() -> float:
        return loss_mtl(forward(params, batch, True, seed=seed, update_stats=False), batch).item()

    loss = loss_mtl(forward(params, batch, True, seed=seed, update_stats=False), batch)
    return _compare("mtl", params, _analytic(params, loss), lambda _: value)


def check_dat(params: ModelParameters, batch: L.SequenceBatch, lam: float, seed: int = 3) -> GradCheckReport:
    """Embedding weights see ``L_emo - lam * L_spk``; each head sees only its own loss."""
    def part(pname: str) -> Callable[[], float]:
        def value() -> float:
            out = forward(params, batch, True, seed=seed, update_stats=False)
            le, ls = emotion_loss(out, batch).item(), speaker_loss(out, batch).item()
            if pname.startswith("embed."):
                return le - lam * ls
            return ls if pname.startswith("speaker.") else le
        return value

    loss = loss_dat(forward(params, batch, True, grl_lambda=lam, seed=seed, update_stats=False), batch)
    return _compare(f"dat_lambda={lam:g}", params, _analytic(params, loss), part)


def check_cgt(params: ModelParameters, batch: L.SequenceBatch, alpha: float, epsilon: float,
              seed: int = 3) -> GradCheckReport:
    """Perturbed inputs are frozen at the current parameters, as in the update rule."""
    x_s, x_y = cgt_perturb(batch, params, epsilon, seed=seed)

    def value() -> float:
        clean = forward(params, batch, True, seed=seed, update_stats=False)
        out_s = forward(params, batch, True, seed=seed, inputs=Tensor(x_s), update_stats=False,
                        heads=("emotion",))
        out_y = forward(params, batch, True, seed=seed, inputs=Tensor(x_y), update_stats=False,
                        heads=("speaker",))
        clean_term = emotion_loss(clean, batch).item() + speaker_loss(clean, batch).item()
        pert_term = emotion_loss(out_s, batch).item() + speaker_loss(out_y, batch).item()
        return (1.0 - alpha) * clean_term + alpha * pert_term

    total, *_ = cgt_objective(params, batch, alpha, epsilon, seed)
    return _compare(f"cgt_alpha={alpha:g}_eps={epsilon:g}", params, _analytic(params, total), lambda _: value)


def composite_checks(seed: int = 0) -> list[GradCheckReport]:
    params, batch = tiny_setup(seed)
    reports = [check_mtl(params, batch)]
    reports += [check_dat(params, batch, lam) for lam in (0.0, 0.5, 1.0)]
    reports += [check_cgt(params, batch, a, e) for a in (0.0, 0.5, 1.0) for e in (0.0, 1.0)]
    return reports


def run_suite(seed: int = 0, tolerance: float = TOLERANCE,
              progress: Callable[[GradCheckReport], None] | None = None) -> SuiteResult:
    t0 = time.perf_counter()
    result = SuiteResult(tolerance=tolerance)
    for group in (primitive_checks, layer_checks, composite_checks):
        for report in group(seed):
            result.reports.append(report)
            if progress is not None:
                progress(report)
    result.seconds = time.perf_counter() - t0
    return result
