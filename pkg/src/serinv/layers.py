"""Building blocks of the embedding network and classifier heads.

Sequence tensors are laid out ``B x C x L`` (batch, channels, frames) with a
per-utterance valid length; frames at or beyond the valid length are padding
and never enter a statistic or a valid output frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation, Tensor, function

BN_EPS = 1e-5
POOL_EPS = 1e-5


class TooShortUtteranceError(ValueError):
    def __init__(self, length: int, minimum: int, utterance_id: str | None = None):
        self.length = length
        self.minimum = minimum
        self.utterance_id = utterance_id
        who = f"utterance {utterance_id!r}" if utterance_id is not None else "sequence"
        super().__init__(f"{who} has {length} frames; at least {minimum} required")


def frame_mask(lengths, max_len: int) -> np.ndarray:
    """Boolean ``B x max_len`` mask of valid frames."""
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return function("unsqueeze", x.data[None], (x,), lambda g: (g[0],)), True
    return x, False


def _unbatch(y: Tensor) -> Tensor:
    return function("squeeze", y.data[0], (y,), lambda g: (g[None],))


# ------------------------------------------------------------------ conv
def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None, dilation: int) -> Tensor:
    """Valid dilated convolution of a ``B x C_in x L`` tensor."""
    B, c_in, L = x.shape
    c_out, k_in, K = kernels.shape
    if k_in != c_in:
        raise ContractViolation(f"conv expects {k_in} input channels, got {c_in}")
    span = dilation * (K - 1)
    if L <= span:
        raise TooShortUtteranceError(L, span + 1)
    L_out = L - span
    cols = np.stack([x.data[:, :, k * dilation:k * dilation + L_out] for k in range(K)], axis=2)
    cols = cols.reshape(B, c_in * K, L_out)
    W = kernels.data.reshape(c_out, c_in * K)
    out = np.matmul(W, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def back(g):
        gx = None
        if x.requires_grad:
            gcols = np.matmul(W.T, g).reshape(B, c_in, K, L_out)
            gx = np.zeros_like(x.data)
            for k in range(K):
                gx[:, :, k * dilation:k * dilation + L_out] += gcols[:, :, k, :]
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernels.shape) if kernels.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return function("conv1d", out, inputs, back)


@dataclass
class TdnnLayer:
    kernels: Tensor
    bias: Tensor | None
    dilation: int = 1

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    @property
    def shrink(self) -> int:
        return self.dilation * (self.kernel_size - 1)

    def parameters(self) -> dict[str, Tensor]:
        p = {"kernels": self.kernels}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


def conv1d_dilated(x: Tensor, layer: TdnnLayer) -> Tensor:
    """Apply ``layer`` to a single ``C_in x L`` sequence or a ``B x C_in x L`` batch."""
    xb, single = _batched(x)
    out = conv1d(xb, layer.kernels, layer.bias, layer.dilation)
    return _unbatch(out) if single else out


def init_tdnn(rng: np.random.Generator, c_in: int, c_out: int, kernel: int, dilation: int,
              bias: bool = True) -> TdnnLayer:
    fan_in, fan_out = c_in * kernel, c_out * kernel
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return TdnnLayer(Tensor(rng.uniform(-bound, bound, (c_out, c_in, kernel)), requires_grad=True),
                     Tensor(np.zeros(c_out), requires_grad=True) if bias else None, dilation)


# ------------------------------------------------------------------ LSTM
@dataclass
class LstmDirection:
    w_ih: Tensor  # 4H x F
    w_hh: Tensor  # 4H x H
    bias: Tensor  # 4H


@dataclass
class BiLstmLayer:
    forward: LstmDirection
    backward: LstmDirection

    @property
    def hidden(self) -> int:
        return self.forward.w_hh.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for tag, d in (("fwd", self.forward), ("bwd", self.backward)):
            out[f"{tag}_w_ih"] = d.w_ih
            out[f"{tag}_w_hh"] = d.w_hh
            out[f"{tag}_bias"] = d.bias
        return out


def init_bilstm(rng: np.random.Generator, n_in: int, hidden: int) -> BiLstmLayer:
    bound = 1.0 / np.sqrt(hidden)

    def direction():
        bias = rng.uniform(-bound, bound, 4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        return LstmDirection(Tensor(rng.uniform(-bound, bound, (4 * hidden, n_in)), requires_grad=True),
                             Tensor(rng.uniform(-bound, bound, (4 * hidden, hidden)), requires_grad=True),
                             Tensor(bias, requires_grad=True))

    return BiLstmLayer(direction(), direction())


def lstm_direction(x: Tensor, lengths, params: LstmDirection, reverse: bool) -> Tensor:
    """One LSTM direction over ``B x F x L``; returns ``B x H x L``, zero on padding.

    Gate order (input, forget, candidate, output). The reverse direction
    starts from a zero state at each utterance's last valid frame.
    """
    B, F, L = x.shape
    H = params.w_hh.shape[1]
    Wih, Whh, b = params.w_ih.data, params.w_hh.data, params.bias.data
    mask = frame_mask(lengths, L)
    xs = np.ascontiguousarray(x.data.transpose(2, 0, 1))  # L x B x F
    proj = xs @ Wih.T + b  # L x B x 4H
    steps = range(L - 1, -1, -1) if reverse else range(L)
    # sigmoid(z) = (tanh(z/2) + 1) / 2, so one tanh serves all four gates
    half = np.full(4 * H, 0.5)
    half[2 * H:3 * H] = 1.0

    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((L, B, H))
    saved = []
    for t in steps:
        m = mask[:, t][:, None]
        z = proj[t] + h @ Whh.T
        act = np.tanh(z * half)
        gg = act[:, 2 * H:3 * H]
        gates = 0.5 * act + 0.5
        i, f, o = gates[:, :H], gates[:, H:2 * H], gates[:, 3 * H:]
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        h_new = o * tc
        saved.append((t, m, i, f, gg, o, tc, h, c))
        c = np.where(m, c_new, c)
        h = np.where(m, h_new, h)
        out[t] = np.where(m, h_new, 0.0)

    def back(gout):
        go = gout.transpose(2, 0, 1)  # L x B x H
        dproj = np.zeros((L, B, 4 * H))
        dWhh = np.zeros_like(Whh)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t, m, i, f, gg, o, tc, h_prev, c_prev in reversed(saved):
            dh_total = dh + go[t]
            dh_new = np.where(m, dh_total, 0.0)
            dc_new = np.where(m, dc + dh_new * o * (1.0 - tc * tc), 0.0)
            dz = np.concatenate([dc_new * gg * i * (1.0 - i),
                                 dc_new * c_prev * f * (1.0 - f),
                                 dc_new * i * (1.0 - gg * gg),
                                 dh_new * tc * o * (1.0 - o)], axis=1)
            dproj[t] = dz
            dWhh += dz.T @ h_prev
            dh = np.where(m, 0.0, dh) + dz @ Whh
            dc = np.where(m, dc_new * f, dc)
        flat = dproj.reshape(L * B, 4 * H)
        gx = (dproj @ Wih).transpose(1, 2, 0) if x.requires_grad else None
        gWih = flat.T @ xs.reshape(L * B, F)
        return gx, gWih, dWhh, flat.sum(axis=0)

    return function("lstm", out.transpose(1, 2, 0), (x, params.w_ih, params.w_hh, params.bias), back)


def bilstm(x: Tensor, lengths, layer: BiLstmLayer) -> Tensor:
    """Bidirectional LSTM over ``B x F x L``; per-frame output ``[h_fwd; h_bwd]``."""
    fwd = lstm_direction(x, lengths, layer.forward, reverse=False)
    bwd = lstm_direction(x, lengths, layer.backward, reverse=True)
    H = layer.hidden

    def back(g):
        return g[:, :H], g[:, H:]

    return function("concat_channels", np.concatenate([fwd.data, bwd.data], axis=1), (fwd, bwd), back)


def bilstm_forward(x: Tensor, layer: BiLstmLayer, valid_length: int | None = None) -> Tensor:
    """Single-sequence form: ``F x L`` in, ``2H x L`` out."""
    if x.shape[1] < 1:
        raise ContractViolation("LSTM input needs at least one frame")
    xb, single = _batched(x)
    lengths = [valid_length or xb.shape[2]] * xb.shape[0]
    out = bilstm(xb, lengths, layer)
    return _unbatch(out) if single else out


# ----------------------------------------------------------- stats pool
def masked_stats_pool(x: Tensor, lengths, eps: float = POOL_EPS) -> Tensor:
    """Per-channel mean and ``sqrt(var + eps)`` over valid frames: ``B x C x L`` to ``B x 2C``."""
    B, C, L = x.shape
    lengths = np.asarray(lengths)
    if np.any(lengths < 1):
        raise ContractViolation("statistics pooling needs valid_length >= 1")
    m = frame_mask(lengths, L)[:, None, :]
    n = lengths[:, None].astype(np.float64)
    xm = np.where(m, x.data, 0.0)
    mean = xm.sum(axis=2) / n
    centered = np.where(m, x.data - mean[:, :, None], 0.0)
    var = (centered * centered).sum(axis=2) / n
    std = np.sqrt(var + eps)

    def back(g):
        gmean, gstd = g[:, :C], g[:, C:]
        gvar = gstd / (2.0 * std)
        gx = (gmean / n)[:, :, None] + (2.0 * gvar / n)[:, :, None] * centered
        return (np.where(m, gx, 0.0),)

    return function("stats_pool", np.concatenate([mean, std], axis=1), (x,), back)


def stats_pool(seq: Tensor, valid_length: int) -> Tensor:
    """Single-sequence form: ``F x L`` in, ``2F`` vector out (mean first)."""
    if valid_length < 1:
        raise ContractViolation("statistics pooling needs valid_length >= 1")
    xb, _ = _batched(seq)
    pooled = masked_stats_pool(xb, [valid_length])
    return function("squeeze", pooled.data[0], (pooled,), lambda g: (g[None],))


# ----------------------------------------------------------- batch norm
@dataclass
class BatchNorm1d:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int) -> "BatchNorm1d":
        return cls(Tensor(np.ones(channels), requires_grad=True), Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels))

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batchnorm_forward(x: Tensor, layer: BatchNorm1d, training: bool, lengths=None,
                      update_stats: bool = True) -> Tensor:
    """Per-channel normalization of ``B x C`` or ``B x C x L`` (valid frames only)."""
    seq = x.ndim == 3
    if seq:
        B, C, L = x.shape
        lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
        m = frame_mask(lengths, L)[:, None, :]
        axes = (0, 2)
        shape = (1, C, 1)
    else:
        B, C = x.shape
        m = np.ones((B, 1), dtype=bool)
        axes = (0,)
        shape = (1, C)
    gamma, beta = layer.gamma.data.reshape(shape), layer.beta.data.reshape(shape)

    if training:
        n = float(np.broadcast_to(m, x.shape).sum() / C)
        if n < 2:
            raise ContractViolation(f"batch norm in training mode needs >= 2 samples per channel, got {n:g}")
        mean = np.where(m, x.data, 0.0).sum(axis=axes, keepdims=True) / n
        centered = np.where(m, x.data - mean, 0.0)
        var = (centered * centered).sum(axis=axes, keepdims=True) / n
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = centered * inv
        if update_stats:
            mom = layer.momentum
            layer.running_mean[:] = (1 - mom) * layer.running_mean + mom * mean.reshape(C)
            layer.running_var[:] = (1 - mom) * layer.running_var + mom * var.reshape(C) * n / (n - 1)
    else:
        inv = 1.0 / np.sqrt(layer.running_var.reshape(shape) + layer.eps)
        xhat = np.where(m, (x.data - layer.running_mean.reshape(shape)) * inv, 0.0)
    out = np.where(m, gamma * xhat + beta, 0.0)

    def back(g):
        g = np.where(m, g, 0.0)
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma
            if training:
                gx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
                gx = np.where(m, gx, 0.0)
            else:
                gx = dxhat * inv
        return gx, ggamma, gbeta

    return function("batchnorm", out, (x, layer.gamma, layer.beta), back)


# -------------------------------------------------------------- dropout
def dropout_forward(x: Tensor, keep_prob: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ContractViolation(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    scale = np.where(rng.random(x.shape) < keep_prob, 1.0 / keep_prob, 0.0)
    return function("dropout", x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------- dense
@dataclass
class DenseLayer:
    weight: Tensor  # D_out x D_in
    bias: Tensor | None
    activation: bool = False

    def parameters(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


def init_dense(rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
               activation: bool = False) -> DenseLayer:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return DenseLayer(Tensor(rng.uniform(-bound, bound, (d_out, d_in)), requires_grad=True),
                      Tensor(np.zeros(d_out), requires_grad=True) if bias else None, activation)


def linear(x: Tensor, layer: DenseLayer) -> Tensor:
    """``B x D_in`` to ``B x D_out``, or frame-wise ``B x D_in x L`` to ``B x D_out x L``."""
    W = layer.weight.data
    seq = x.ndim == 3
    out = np.matmul(W, x.data) if seq else x.data @ W.T
    if layer.bias is not None:
        out += layer.bias.data[None, :, None] if seq else layer.bias.data
    inputs = (x, layer.weight) if layer.bias is None else (x, layer.weight, layer.bias)

    def back(g):
        if seq:
            gx = np.matmul(W.T, g) if x.requires_grad else None
            gw = np.tensordot(g, x.data, axes=([0, 2], [0, 2]))
            gb = g.sum(axis=(0, 2))
        else:
            gx = g @ W if x.requires_grad else None
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return (gx, gw) if layer.bias is None else (gx, gw, gb)

    return function("linear", out, inputs, back)


def dense_forward(x: Tensor, layer: DenseLayer) -> Tensor:
    out = linear(x, layer)
    return out.relu() if layer.activation else out


@dataclass
class SequenceBatch:
    features: np.ndarray  # B x F x L_max, zero padded
    valid_lengths: np.ndarray
    emotion_targets: np.ndarray  # B x E one-hot
    speaker_targets: np.ndarray  # B x S one-hot
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.valid_lengths = np.asarray(self.valid_lengths, dtype=np.int64)
        if np.any(self.valid_lengths > self.features.shape[2]):
            raise ContractViolation("valid length exceeds padded length")

    def __len__(self) -> int:
        return self.features.shape[0]
