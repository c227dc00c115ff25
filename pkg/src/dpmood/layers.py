"""Convolution block, batch norm, GRU / bidirectional GRU, vanilla RNN cell,
dropout and the fully-connected output layer.

Every function accepts an optional leading batch axis so that a whole
mini-batch of padded sessions can be pushed through one tape.  Padded
positions are excluded from batch statistics and never reach a valid output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import ShapeError, Tensor

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_output_length(length: int, kernel: int, stride: int) -> int:
    """Temporal extent after one strided convolution: floor((l - k) / d) + 1."""
    return (length - kernel) // stride + 1


# ------------------------------------------------------------------- conv + bn

@dataclass
class ConvSpec:
    weight: Tensor  # [m, n, k]
    bias: Tensor    # [m]
    stride: int = 1

    def __post_init__(self):
        if self.weight.ndim != 3 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv weights {self.weight.shape} / bias {self.bias.shape} do not conform")
        if self.stride < 1 or self.kernel_length < 1:
            raise ValueError("kernel length and stride must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_length(self) -> int:
        return self.weight.shape[2]

    @classmethod
    def init(cls, n: int, m: int, k: int, stride: int, rng: np.random.Generator, name: str = "conv"):
        w = de.parameter(_uniform(rng, n * k, (m, n, k)), name=f"{name}.weight")
        b = de.parameter(_uniform(rng, n * k, (m,)), name=f"{name}.bias")
        return cls(w, b, stride)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class BatchNormSpec:
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, m: int, name: str = "bn", momentum: float = 0.1, eps: float = 1e-5):
        return cls(de.parameter(np.ones(m), name=f"{name}.scale"),
                   de.parameter(np.zeros(m), name=f"{name}.shift"),
                   np.zeros(m), np.ones(m), momentum, eps)

    def parameters(self) -> list[Tensor]:
        return [self.scale, self.shift]


def batch_norm(y: Tensor, bn: BatchNormSpec, mode: str, mask: np.ndarray | None = None) -> Tensor:
    """Normalize [B, m, L] per channel.

    Train mode uses statistics over every unmasked (session, time) position and
    updates the running estimates in place; eval mode uses the running estimates.
    """
    _check_mode(mode)
    if y.ndim != 3 or y.shape[1] != bn.scale.shape[0]:
        raise ShapeError(f"batch_norm: input {y.shape} does not match {bn.scale.shape[0]} channels")
    scale = de.reshape(bn.scale, (1, -1, 1))
    shift = de.reshape(bn.shift, (1, -1, 1))
    if mode == EVAL:
        inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
        return (y - bn.running_mean[None, :, None]) * inv[None, :, None] * scale + shift
    if mask is None:
        mask = np.ones((y.shape[0], 1, y.shape[2]))
    mask = np.broadcast_to(mask, (y.shape[0], 1, y.shape[2])).astype(np.float64)
    n = mask.sum()
    mu = de.sum(y * mask, axis=(0, 2), keepdims=True) * (1.0 / n)
    centered = y - mu
    var = de.sum(de.square(centered) * mask, axis=(0, 2), keepdims=True) * (1.0 / n)
    out = centered * de.power(var + bn.eps, -0.5) * scale + shift
    m = bn.momentum
    unbiased = var.data.reshape(-1) * (n / (n - 1.0)) if n > 1 else var.data.reshape(-1)
    bn.running_mean = (1.0 - m) * bn.running_mean + m * mu.data.reshape(-1)
    bn.running_var = (1.0 - m) * bn.running_var + m * unbiased
    return out


def time_mask(lengths: np.ndarray, total: int) -> np.ndarray:
    """[B, total] boolean mask, true on the first ``lengths[b]`` positions."""
    return np.arange(total)[None, :] < np.asarray(lengths)[:, None]


def conv_block(x: Tensor, conv: ConvSpec, bn: BatchNormSpec, mode: str,
               lengths: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Convolution -> batch norm -> relu on a padded batch [B, n, l].

    Returns the output [B, m, L_out] and each session's valid output length.
    """
    B, n, l = x.shape
    if n != conv.in_channels:
        raise ShapeError(f"conv block expects {conv.in_channels} channels, got {n}")
    lengths = np.full(B, l) if lengths is None else np.asarray(lengths)
    k, d = conv.kernel_length, conv.stride
    if lengths.min() < k:
        raise ShapeError(f"sequence of length {int(lengths.min())} too short: need at least {k}")
    y = de.conv1d(x, conv.weight, conv.bias, d)
    out_len = (lengths - k) // d + 1
    mask = time_mask(out_len, y.shape[2])[:, None, :]
    y = batch_norm(y, bn, mode, mask)
    return de.relu(y), out_len


def segment_mask(offsets, lengths, total: int) -> np.ndarray:
    """[total] boolean mask, true on rows ``offsets[b] : offsets[b] + lengths[b]``."""
    delta = np.zeros(total + 1, dtype=np.int64)
    np.add.at(delta, offsets, 1)
    np.add.at(delta, np.asarray(offsets) + np.asarray(lengths), -1)
    return np.cumsum(delta[:-1]) > 0


def conv_block_packed(x: Tensor, conv: ConvSpec, bn: BatchNormSpec, mode: str,
                      offsets: np.ndarray, lengths: np.ndarray) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Convolution -> batch norm -> relu on sessions packed along time in [1, n, N].

    Every offset must be a multiple of the stride so that output position
    ``offsets[b] // d + j`` only reads session b's rows for ``j < L_out[b]``.
    Returns the output and the sessions' new offsets and lengths.
    """
    k, d = conv.kernel_length, conv.stride
    offsets, lengths = np.asarray(offsets), np.asarray(lengths)
    if (offsets % d).any():
        raise ValueError("conv_block_packed: offsets must be multiples of the stride")
    if lengths.min() < k:
        raise ShapeError(f"sequence of length {int(lengths.min())} too short: need at least {k}")
    y = de.conv1d(x, conv.weight, conv.bias, d)
    offsets, lengths = offsets // d, (lengths - k) // d + 1
    mask = segment_mask(offsets, lengths, y.shape[2])[None, None, :]
    y = batch_norm(y, bn, mode, mask)
    return de.relu(y), offsets, lengths


def conv_block_forward(x, conv: ConvSpec, bn: BatchNormSpec, mode: str) -> Tensor:
    """Single session: [n, l] -> [m, floor((l - k) / d) + 1]."""
    x = x if isinstance(x, Tensor) else de.tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"conv_block_forward expects [n, l], got {x.shape}")
    if x.shape[1] < conv.kernel_length:
        raise ShapeError(f"sequence of length {x.shape[1]} too short: need at least {conv.kernel_length}")
    y, _ = conv_block(de.reshape(x, (1,) + x.shape), conv, bn, mode)
    return de.reshape(y, y.shape[1:])


# --------------------------------------------------------------------- GRU

@dataclass
class GruWeights:
    W_r: Tensor
    W_z: Tensor
    W: Tensor
    U_r: Tensor
    U_z: Tensor
    U: Tensor

    def __post_init__(self):
        H, D = self.W.shape
        for name in ("W_r", "W_z"):
            if getattr(self, name).shape != (H, D):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(H, D)}")
        for name in ("U_r", "U_z", "U"):
            if getattr(self, name).shape != (H, H):
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {(H, H)}")

    @property
    def hidden_size(self) -> int:
        return self.W.shape[0]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator, name: str = "gru"):
        mats = {}
        for key in ("W_r", "W_z", "W"):
            mats[key] = de.parameter(_uniform(rng, input_size, (hidden, input_size)), name=f"{name}.{key}")
        for key in ("U_r", "U_z", "U"):
            mats[key] = de.parameter(_uniform(rng, hidden, (hidden, hidden)), name=f"{name}.{key}")
        return cls(**mats)

    @classmethod
    def zeros(cls, input_size: int, hidden: int):
        z = lambda *s: de.parameter(np.zeros(s))  # noqa: E731
        return cls(z(hidden, input_size), z(hidden, input_size), z(hidden, input_size),
                   z(hidden, hidden), z(hidden, hidden), z(hidden, hidden))

    def parameters(self) -> list[Tensor]:
        return [self.W_r, self.W_z, self.W, self.U_r, self.U_z, self.U]


def gru_step(x_t, h_prev, w: GruWeights) -> Tensor:
    """One GRU update.  ``x_t``: [..., D_in], ``h_prev``: [..., H]."""
    x_t = x_t if isinstance(x_t, Tensor) else de.tensor(x_t)
    h_prev = h_prev if isinstance(h_prev, Tensor) else de.tensor(h_prev)
    if x_t.shape[-1] != w.input_size or h_prev.shape[-1] != w.hidden_size:
        raise ShapeError(f"gru_step: x {x_t.shape} / h {h_prev.shape} do not fit "
                         f"D_in={w.input_size}, H={w.hidden_size}")
    r = de.sigmoid(x_t @ w.W_r.T + h_prev @ w.U_r.T)
    z = de.sigmoid(x_t @ w.W_z.T + h_prev @ w.U_z.T)
    cand = de.tanh(x_t @ w.W.T + (r * h_prev) @ w.U.T)
    return z * h_prev + (1.0 - z) * cand


def gru_packed(seq: Tensor, w: GruWeights, offsets, lengths, reverse: bool = False) -> Tensor:
    """Final GRU states for sessions stored back to back in ``seq`` [N, D_in].

    Session b occupies rows ``offsets[b] : offsets[b] + lengths[b]``.  Sessions
    are visited longest first so that each step only touches the rows still
    running; with ``reverse`` each session is read from its own last step back
    to its first.  Returns [B, H] in the original session order.
    """
    if seq.ndim != 2 or seq.shape[1] != w.input_size:
        raise ShapeError(f"gru_packed expects [N, {w.input_size}], got {seq.shape}")
    offsets, lengths = np.asarray(offsets), np.asarray(lengths)
    B, H = len(lengths), w.hidden_size
    if B == 0 or lengths.min() < 1:
        raise ShapeError("gru_packed: every session needs at least one step")
    if (offsets + lengths).max() > seq.shape[0]:
        raise ShapeError("gru_packed: sessions extend past the packed buffer")
    T = int(lengths.max())
    order = np.argsort(-lengths, kind="stable")
    start = offsets[order]
    active = (lengths[order][None, :] > np.arange(T)[:, None]).sum(axis=1)  # rows running at step t
    # one gather of every (step, running session) row, step-major: the rows of
    # step t are contiguous, and each row of ``seq`` appears at most once
    rows = np.concatenate([start[:n] + t for t, n in enumerate(active)])
    bounds = np.concatenate([[0], np.cumsum(active)])
    proj = de.take(seq, rows) @ de.concat([w.W_r.T, w.W_z.T, w.W.T], axis=1)
    urz = de.concat([w.U_r.T, w.U_z.T], axis=1)
    ut = w.U.T

    def step_input(t: int) -> Tensor:
        return proj[int(bounds[t]):int(bounds[t + 1])]

    if reverse:
        h = None
        for t in range(T - 1, -1, -1):
            n = int(active[t])
            cur = 0 if h is None else h.shape[0]
            if n > cur:  # sessions whose last step is t join with a zero state
                fresh = de.tensor(np.zeros((n - cur, H)))
                h = fresh if h is None else de.concat([h, fresh], axis=0)
            h = de.gru_cell(step_input(t), h, urz, ut)
    else:
        h = de.tensor(np.zeros((B, H)))
        done = []
        for t in range(T):
            n = int(active[t])
            if n < h.shape[0]:  # sessions that ended before step t keep their state
                done.append(h[n:])
                h = h[:n]
            h = de.gru_cell(step_input(t), h, urz, ut)
        if done:
            h = de.concat([h] + done[::-1], axis=0)
    if not np.array_equal(order, np.arange(B)):
        h = de.take(h, np.argsort(order), axis=0)
    return h


def gru_sequence(xs: Tensor, w: GruWeights, lengths: np.ndarray | None = None,
                 reverse: bool = False) -> Tensor:
    """Final hidden state over a padded batch [B, T, D_in] -> [B, H]; session b
    uses its first ``lengths[b]`` steps."""
    if xs.ndim != 3 or xs.shape[2] != w.input_size:
        raise ShapeError(f"gru_sequence expects [B, T, {w.input_size}], got {xs.shape}")
    B, T, D = xs.shape
    if T == 0:
        raise ShapeError("gru_sequence: empty sequence")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    if lengths.min() < 1 or lengths.max() > T:
        raise ShapeError(f"gru_sequence: lengths must lie in [1, {T}]")
    return gru_packed(de.reshape(xs, (B * T, D)), w, np.arange(B) * T, lengths, reverse)


def bigru(xs: Tensor, w_fwd: GruWeights, w_bwd: GruWeights,
          lengths: np.ndarray | None = None) -> Tensor:
    """Batched bidirectional GRU: concat of both directions' final states, [B, 2H]."""
    return de.concat([gru_sequence(xs, w_fwd, lengths),
                      gru_sequence(xs, w_bwd, lengths, reverse=True)], axis=1)


def bigru_packed(seq: Tensor, w_fwd: GruWeights, w_bwd: GruWeights, offsets, lengths) -> Tensor:
    return de.concat([gru_packed(seq, w_fwd, offsets, lengths),
                      gru_packed(seq, w_bwd, offsets, lengths, reverse=True)], axis=1)


def bigru_forward(seq, w_fwd: GruWeights, w_bwd: GruWeights) -> Tensor:
    """Unbatched form over a list of [D_in] steps, built from :func:`gru_step`."""
    steps = [s if isinstance(s, Tensor) else de.tensor(s) for s in seq]
    if not steps:
        raise ShapeError("bigru_forward: empty sequence")
    h_f = de.tensor(np.zeros(w_fwd.hidden_size))
    for x in steps:
        h_f = gru_step(x, h_f, w_fwd)
    h_b = de.tensor(np.zeros(w_bwd.hidden_size))
    for x in reversed(steps):
        h_b = gru_step(x, h_b, w_bwd)
    return de.concat([h_f, h_b], axis=0)


class BiGRU:
    def __init__(self, input_size: int, hidden: int, rng: np.random.Generator, name: str = "bigru"):
        self.fwd = GruWeights.init(input_size, hidden, rng, f"{name}.fwd")
        self.bwd = GruWeights.init(input_size, hidden, rng, f"{name}.bwd")

    def __call__(self, xs: Tensor, lengths=None) -> Tensor:
        return bigru(xs, self.fwd, self.bwd, lengths)

    def parameters(self) -> list[Tensor]:
        return self.fwd.parameters() + self.bwd.parameters()


# ------------------------------------------------------------- vanilla RNN

@dataclass
class RnnWeights:
    W: Tensor
    U: Tensor
    b: Tensor

    def __post_init__(self):
        H, _ = self.W.shape
        if self.U.shape != (H, H) or self.b.shape != (H,):
            raise ShapeError(f"RNN weights W{self.W.shape} U{self.U.shape} b{self.b.shape} do not conform")

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator, name: str = "rnn"):
        return cls(de.parameter(_uniform(rng, input_size, (hidden, input_size)), name=f"{name}.W"),
                   de.parameter(_uniform(rng, hidden, (hidden, hidden)), name=f"{name}.U"),
                   de.parameter(_uniform(rng, hidden, (hidden,)), name=f"{name}.b"))

    def parameters(self) -> list[Tensor]:
        return [self.W, self.U, self.b]


def rnn_step(x_t, h_prev, w: RnnWeights) -> Tensor:
    """h_t = tanh(W x_t + U h_prev + b)."""
    x_t = x_t if isinstance(x_t, Tensor) else de.tensor(x_t)
    h_prev = h_prev if isinstance(h_prev, Tensor) else de.tensor(h_prev)
    if x_t.shape[-1] != w.W.shape[1] or h_prev.shape[-1] != w.W.shape[0]:
        raise ShapeError(f"rnn_step: x {x_t.shape} / h {h_prev.shape} do not fit W {w.W.shape}")
    return de.tanh(x_t @ w.W.T + h_prev @ w.U.T + w.b)


# ------------------------------------------------------- dropout and linear

def dropout_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``ratio``, else 1/(1-ratio)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    if ratio == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= ratio) / (1.0 - ratio)


def dropout_forward(x, ratio: float, mode: str, rng: np.random.Generator | None = None,
                    mask: np.ndarray | None = None) -> Tensor:
    _check_mode(mode)
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must lie in [0, 1), got {ratio}")
    x = x if isinstance(x, Tensor) else de.tensor(x)
    if mode == EVAL or ratio == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng or an explicit mask")
        mask = dropout_mask(x.shape, ratio, rng)
    return x * mask


@dataclass
class LinearSpec:
    weight: Tensor  # [1, D]
    bias: Tensor    # [1]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, name: str = "linear"):
        return cls(de.parameter(_uniform(rng, d, (1, d)), name=f"{name}.weight"),
                   de.parameter(_uniform(rng, d, (1,)), name=f"{name}.bias"))

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def linear_forward(x, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map to a scalar: [D] -> scalar, or [B, D] -> [B]."""
    x = x if isinstance(x, Tensor) else de.tensor(x)
    if weight.ndim != 2 or weight.shape[0] != 1 or bias.shape != (1,):
        raise ShapeError(f"linear: weight {weight.shape} / bias {bias.shape} must be [1, D] / [1]")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight width {weight.shape[1]}")
    y = x @ de.reshape(weight, (-1,)) + de.reshape(bias, ())
    return y

