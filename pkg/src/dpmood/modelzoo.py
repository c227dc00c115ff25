"""The nine model variants: fusion choice, backbone, and sine calibration head."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffengine as de
from . import layers as L
from .datamodel import LabeledSession, RawSession, atomic_write_bytes
from .diffengine import Tensor
from .fusion import fuse

log = logging.getLogger(__name__)

# tag -> (fusion, backbone, calibration)
VARIANTS: dict[str, tuple[str, str, str]] = {
    "RNN": ("late", "rnn", "none"),
    "CNN": ("late", "cnn", "none"),
    "CNNRNN": ("late", "cnnrnn", "none"),
    "CNNRNN-Cr": ("late", "cnnrnn", "shared"),
    "CNNRNN-PsCr": ("late", "cnnrnn", "per-subject"),
    "CNNRNN-fillna": ("ef-fillna", "cnnrnn", "none"),
    "CNNRNN-dropna": ("ef-dropna", "cnnrnn", "none"),
    "dpMood-fillna": ("ef-fillna", "cnnrnn", "per-subject"),
    "dpMood-dropna": ("ef-dropna", "cnnrnn", "per-subject"),
}

CALIBRATION_INIT = (0.1, 2 * math.pi / 24, 0.0, 1.0)  # alpha, beta, gamma, delta


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    hidden: int = 20
    dropout: float = 0.1
    conv_channels: tuple[int, ...] = (10, 20)
    cnn_channels: tuple[int, ...] = (10, 20, 30)
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def fusion(self) -> str:
        return VARIANTS[self.variant][0]

    @property
    def backbone(self) -> str:
        return VARIANTS[self.variant][1]

    @property
    def calibration(self) -> str:
        return VARIANTS[self.variant][2]

    @property
    def view_channels(self) -> tuple[int, ...]:
        return (4, 3) if self.fusion == "late" else (7,)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "hidden": self.hidden, "dropout": self.dropout,
                "conv_channels": list(self.conv_channels), "cnn_channels": list(self.cnn_channels),
                "kernel": self.kernel, "stride": self.stride}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("conv_channels", "cnn_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# -------------------------------------------------------------- calibration

@dataclass(frozen=True)
class CalibrationParams:
    alpha: float
    beta: float
    gamma: float
    delta: float

    def factor(self, t0_hours):
        return self.alpha * np.sin(self.beta * np.asarray(t0_hours) + self.gamma) + self.delta

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.gamma, self.delta)


def calibrate(x, t0_hours, p: CalibrationParams):
    """s = x * (alpha * sin(beta * t0 + gamma) + delta).

    Plain numbers give a float; any Tensor argument (including the fields of
    ``p``) gives a differentiable Tensor.
    """
    parts = (x, t0_hours, p.alpha, p.beta, p.gamma, p.delta)
    if not any(isinstance(v, Tensor) for v in parts):
        return float(x) * (p.alpha * math.sin(p.beta * t0_hours + p.gamma) + p.delta)
    return x * (p.alpha * de.sin(p.beta * t0_hours + p.gamma) + p.delta)


class CalibrationTable:
    """Calibration parameters: none, one shared row, or one row per subject.

    ``params`` is a trainable [rows, 4] tensor of (alpha, beta, gamma, delta).
    """

    def __init__(self, mode: str, subjects: Sequence[str] = (), params: np.ndarray | None = None):
        if mode not in ("none", "shared", "per-subject"):
            raise ValueError(f"unknown calibration mode {mode!r}")
        self.mode = mode
        self.subjects = tuple(subjects) if mode == "per-subject" else ()
        if mode == "per-subject" and not self.subjects:
            raise ValueError("per-subject calibration needs at least one subject")
        self._index = {s: i for i, s in enumerate(self.subjects)}
        rows = {"none": 0, "shared": 1, "per-subject": len(self.subjects)}[mode]
        if params is None:
            params = np.tile(np.array(CALIBRATION_INIT), (rows, 1))
        params = np.asarray(params, dtype=np.float64).reshape(rows, 4)
        self.params = de.parameter(params, name="calibration") if rows else None

    def parameters(self) -> list[Tensor]:
        return [] if self.params is None else [self.params]

    def __contains__(self, subject: str) -> bool:
        return self.mode == "shared" or subject in self._index

    def get(self, subject: str | None = None) -> CalibrationParams:
        if self.mode == "none":
            return CalibrationParams(0.0, 0.0, 0.0, 1.0)
        if self.mode == "shared":
            return CalibrationParams(*map(float, self.params.data[0]))
        if subject in self._index:
            return CalibrationParams(*map(float, self.params.data[self._index[subject]]))
        return CalibrationParams(*map(float, self.params.data.mean(axis=0)))

    def as_dict(self) -> dict[str, CalibrationParams]:
        if self.mode == "shared":
            return {"*": self.get()}
        return {s: self.get(s) for s in self.subjects}

    def rows_for(self, subject_ids: Sequence[str]) -> np.ndarray:
        """Row index per subject; unseen subjects map to the extra mean row."""
        if self.mode == "shared":
            return np.zeros(len(subject_ids), dtype=np.intp)
        idx = np.array([self._index.get(s, len(self.subjects)) for s in subject_ids], dtype=np.intp)
        unseen = sorted({s for s in subject_ids if s not in self._index})
        if unseen:
            log.warning("calibration: subjects %s unseen in training; using mean parameters", unseen)
        return idx

    def factor(self, subject_ids: Sequence[str], t0_hours: np.ndarray) -> Tensor | None:
        """Differentiable per-session factor alpha*sin(beta*t0+gamma)+delta, [B]."""
        if self.mode == "none":
            return None
        idx = self.rows_for(subject_ids)
        table = self.params
        if self.mode == "per-subject" and (idx == len(self.subjects)).any():
            table = de.concat([table, de.mean(table, axis=0, keepdims=True)], axis=0)
        rows = de.take(table, idx, axis=0)
        alpha, beta, gamma, delta = (rows[:, j] for j in range(4))
        return alpha * de.sin(beta * np.asarray(t0_hours, dtype=np.float64) + gamma) + delta


# -------------------------------------------------------------------- paths

class ConvStack:
    def __init__(self, in_channels: int, channels: Sequence[int], kernel: int, stride: int,
                 rng: np.random.Generator, name: str):
        self.blocks = []
        n = in_channels
        for i, m in enumerate(channels, start=1):
            self.blocks.append((L.ConvSpec.init(n, m, kernel, stride, rng, f"{name}.conv{i}"),
                                L.BatchNormSpec.init(m, f"{name}.bn{i}")))
            n = m
        self.out_channels = n
        self.kernel, self.stride = kernel, stride

    @property
    def min_length(self) -> int:
        need = 1
        for _ in self.blocks:
            need = (need - 1) * self.stride + self.kernel
        return need

    def out_length(self, length: int) -> int:
        for _ in self.blocks:
            length = L.conv_output_length(length, self.kernel, self.stride)
        return length

    @property
    def alignment(self) -> int:
        """Session offsets in a packed buffer must be multiples of this."""
        return self.stride ** len(self.blocks)

    def __call__(self, x: Tensor, offsets: np.ndarray, lengths: np.ndarray,
                 mode: str) -> tuple[Tensor, np.ndarray, np.ndarray]:
        for conv, bn in self.blocks:
            x, offsets, lengths = L.conv_block_packed(x, conv, bn, mode, offsets, lengths)
        return x, offsets, lengths

    def parameters(self) -> list[Tensor]:
        return [p for conv, bn in self.blocks for p in conv.parameters() + bn.parameters()]

    def batch_norms(self) -> list[L.BatchNormSpec]:
        return [bn for _, bn in self.blocks]


class Path:
    """One view's feature extractor: packed sessions -> [B, out_dim]."""

    def __init__(self, backbone: str, in_channels: int, spec: ModelSpec, rng: np.random.Generator, name: str):
        self.backbone = backbone
        self.name = name
        self.convs = None
        self.gru = None
        if backbone == "cnnrnn":
            self.convs = ConvStack(in_channels, spec.conv_channels, spec.kernel, spec.stride, rng, name)
            self.gru = L.BiGRU(self.convs.out_channels, spec.hidden, rng, f"{name}.bigru")
            self.out_dim = 2 * spec.hidden
        elif backbone == "rnn":
            self.gru = L.BiGRU(in_channels, spec.hidden, rng, f"{name}.bigru")
            self.out_dim = 2 * spec.hidden
        elif backbone == "cnn":
            self.convs = ConvStack(in_channels, spec.cnn_channels, spec.kernel, spec.stride, rng, name)
            self.out_dim = self.convs.out_channels
        else:
            raise ValueError(f"unknown backbone {backbone!r}")

    @property
    def min_length(self) -> int:
        return self.convs.min_length if self.convs is not None else 1

    @property
    def alignment(self) -> int:
        return self.convs.alignment if self.convs is not None else 1

    def __call__(self, view: "PackedView", mode: str) -> Tensor:
        h = de.tensor(view.data)
        offsets, lengths = view.offsets, view.lengths
        if self.convs is None:
            return L.bigru_packed(h, self.gru.fwd, self.gru.bwd, offsets, lengths)
        h, offsets, lengths = self.convs(de.transpose(h, (1, 0))[None], offsets, lengths, mode)
        h = de.transpose(h[0], (1, 0))  # [N', C]
        if self.gru is not None:
            return L.bigru_packed(h, self.gru.fwd, self.gru.bwd, offsets, lengths)
        # global max over each session's valid steps
        T = int(lengths.max())
        steps = np.arange(T)
        idx = offsets[:, None] + np.minimum(steps[None, :], lengths[:, None] - 1)
        rows = de.reshape(de.take(h, idx.ravel(), axis=0), (len(lengths), T, h.shape[1]))
        return de.masked_max(rows, (steps[None, :] < lengths[:, None])[:, :, None], axis=1)

    def parameters(self) -> list[Tensor]:
        ps = self.convs.parameters() if self.convs is not None else []
        return ps + (self.gru.parameters() if self.gru is not None else [])

    def batch_norms(self) -> list[L.BatchNormSpec]:
        return self.convs.batch_norms() if self.convs is not None else []


# -------------------------------------------------------------------- model

@dataclass(frozen=True, eq=False)
class Example:
    """A session reduced to what the network consumes."""
    views: tuple[np.ndarray, ...]
    subject_id: str
    t0_hours: float
    label: float = math.nan


@dataclass
class PackedView:
    """Sessions of one view stored back to back: session b is
    ``data[offsets[b] : offsets[b] + lengths[b]]``; the gaps are zero."""
    data: np.ndarray     # [N, C]
    offsets: np.ndarray  # [B]
    lengths: np.ndarray  # [B]

    def session(self, b: int) -> np.ndarray:
        return self.data[self.offsets[b]:self.offsets[b] + self.lengths[b]]


def pack(arrays: Sequence[np.ndarray], channels: int, min_length: int = 1, alignment: int = 1) -> PackedView:
    """Pack sessions into one buffer with offsets that are multiples of
    ``alignment``; sessions shorter than ``min_length`` are zero padded."""
    lengths = np.array([max(len(a), min_length) for a in arrays], dtype=np.int64)
    slots = -(-lengths // alignment) * alignment
    offsets = np.concatenate([[0], np.cumsum(slots)[:-1]]).astype(np.int64)
    data = np.zeros((int(slots.sum()) + alignment, channels))
    for a, off in zip(arrays, offsets):
        data[off:off + len(a)] = a
    return PackedView(data, offsets, lengths)


@dataclass
class Batch:
    views: list[PackedView]
    subject_ids: list[str]
    t0_hours: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_ids)


def make_examples(spec: ModelSpec, sessions: Sequence[LabeledSession | RawSession]) -> list[Example]:
    out = []
    for s in sessions:
        raw = s.session if isinstance(s, LabeledSession) else s
        label = s.label if isinstance(s, LabeledSession) else math.nan
        out.append(Example(tuple(fuse(raw, spec.fusion)), raw.subject_id, raw.t0_hours, label))
    return out


class Model:
    def __init__(self, spec: ModelSpec, subjects: Sequence[str], seed: int = 0):
        self.spec = spec
        self.subjects = tuple(sorted(set(subjects)))
        rng = np.random.default_rng(seed)
        self.paths = [Path(spec.backbone, c, spec, rng, f"view{i}")
                      for i, c in enumerate(spec.view_channels)]
        self.head = L.LinearSpec.init(sum(p.out_dim for p in self.paths), rng, "head")
        self.calibration = CalibrationTable(spec.calibration, self.subjects)
        self.feature_scale = [np.ones(c) for c in spec.view_channels]

    # parameters ---------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        ps = [p for path in self.paths for p in path.parameters()]
        return ps + self.head.parameters() + self.calibration.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def named_batch_norms(self) -> dict[str, L.BatchNormSpec]:
        return {bn.scale.name.rsplit(".", 1)[0]: bn for path in self.paths for bn in path.batch_norms()}

    def parameter_count(self, include_norm: bool = True) -> int:
        names = {id(p) for bn in self.named_batch_norms().values() for p in bn.parameters()}
        return sum(p.size for p in self.parameters() if include_norm or id(p) not in names)

    # data -----------------------------------------------------------------
    @property
    def min_lengths(self) -> list[int]:
        return [p.min_length for p in self.paths]

    def collate(self, examples: Sequence[Example]) -> Batch:
        views = [pack([e.views[v] / scale for e in examples], len(scale), path.min_length, path.alignment)
                 for v, (scale, path) in enumerate(zip(self.feature_scale, self.paths))]
        return Batch(views, [e.subject_id for e in examples],
                     np.array([e.t0_hours for e in examples], dtype=np.float64),
                     np.array([e.label for e in examples], dtype=np.float64))

    # forward ----------------------------------------------------------------
    def forward(self, batch: Batch, mode: str = L.EVAL, rng: np.random.Generator | None = None,
                dropout_mask: np.ndarray | None = None) -> Tensor:
        """Predicted scores for a batch, [B]."""
        feats = [path(view, mode) for path, view in zip(self.paths, batch.views)]
        h = feats[0] if len(feats) == 1 else de.concat(feats, axis=1)
        h = L.dropout_forward(h, self.spec.dropout, mode, rng, dropout_mask)
        x = L.linear_forward(h, self.head.weight, self.head.bias)
        factor = self.calibration.factor(batch.subject_ids, batch.t0_hours)
        return x if factor is None else x * factor

    def uncalibrated(self, batch: Batch) -> np.ndarray:
        """Network output x before calibration (eval mode)."""
        feats = [path(view, L.EVAL) for path, view in zip(self.paths, batch.views)]
        h = feats[0] if len(feats) == 1 else de.concat(feats, axis=1)
        return L.linear_forward(h, self.head.weight, self.head.bias).data.copy()

    def predict(self, sessions: Sequence[LabeledSession | RawSession | Example], batch_size: int = 256) -> np.ndarray:
        """Eval-mode predictions, computed without recording a tape."""
        examples = [s if isinstance(s, Example) else make_examples(self.spec, [s])[0] for s in sessions]
        out = np.empty(len(examples))
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            out[i:i + len(chunk)] = self.forward(self.collate(chunk), L.EVAL).data
        return out


def build_model(spec: ModelSpec | str, subjects: Sequence[str] = (), seed: int = 0) -> Model:
    spec = ModelSpec(spec) if isinstance(spec, str) else spec
    return Model(spec, subjects, seed)


def forward_session(model: Model, session: LabeledSession | RawSession, mode: str = L.EVAL,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Scalar prediction for a single session."""
    batch = model.collate(make_examples(model.spec, [session]))
    return de.reshape(model.forward(batch, mode, rng), ())


# --------------------------------------------------------------- checkpoint

MAGIC = b"DPMOOD1\n"


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Binary container: magic, u64 header length, JSON header, float64 LE payload."""
    params = model.named_parameters()
    header = {
        "spec": model.spec.to_dict(),
        "subjects": list(model.subjects),
        "calibration_mode": model.calibration.mode,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
        "batch_norm": {n: {"running_mean": bn.running_mean.tolist(), "running_var": bn.running_var.tolist(),
                           "momentum": bn.momentum, "eps": bn.eps}
                       for n, bn in model.named_batch_norms().items()},
        "feature_scale": [s.tolist() for s in model.feature_scale],
        "calibration": {s: list(p.as_tuple()) for s, p in model.calibration.as_dict().items()},
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.values())
    atomic_write_bytes(path, MAGIC + struct.pack("<Q", len(head)) + head + payload)


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path} is not a DPMOOD1 checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    header = json.loads(blob[off:off + n].decode("utf-8"))
    off += n
    model = build_model(ModelSpec.from_dict(header["spec"]), header["subjects"])
    params = model.named_parameters()
    for entry in header["parameters"]:
        p = params.get(entry["name"])
        shape = tuple(entry["shape"])
        if p is None or p.shape != shape:
            raise ValueError(f"checkpoint parameter {entry['name']} {shape} does not fit the model")
        count = int(np.prod(shape, dtype=np.int64))
        p.data[...] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    for name, stats in header["batch_norm"].items():
        bn = model.named_batch_norms()[name]
        bn.running_mean = np.array(stats["running_mean"], dtype=np.float64)
        bn.running_var = np.array(stats["running_var"], dtype=np.float64)
        bn.momentum, bn.eps = stats["momentum"], stats["eps"]
    model.feature_scale = [np.array(s, dtype=np.float64) for s in header["feature_scale"]]
    return model, header.get("extra", {})


# ----------------------------------------------------------- gradient suite

def toy_session(length: int = 10, seed: int = 0, subject_id: str = "s0") -> RawSession:
    """A small plausible session: keypresses ~200 ms apart, accel every 60 ms."""
    rng = np.random.default_rng(seed)
    tsl = np.round(rng.gamma(2.0, 100.0, size=length)) + 1
    ts = 1_450_000_000_000.0 + np.cumsum(tsl)
    kp = np.column_stack([ts, np.round(rng.gamma(8.0, 12.0, size=length)) + 1, tsl,
                          rng.normal(0, 2.5, length), rng.normal(0, 1.0, length)])
    ats = np.arange(ts[0] - tsl[0], ts[-1] + 60.0, 60.0)
    ac = np.column_stack([ats, rng.normal(0, 0.05, len(ats)), rng.normal(0.6, 0.05, len(ats)),
                          rng.normal(0.75, 0.05, len(ats))])
    return RawSession(subject_id, f"{subject_id}-toy", kp, ac, t0_hours=float(rng.uniform(0, 100)))


def _layer_checks(rng: np.random.Generator, eps: float) -> list[tuple[str, de.GradCheckResult]]:
    out = []

    def check(name, fn, params):
        out.append((name, de.grad_check(fn, params, eps)))

    x = de.tensor(rng.normal(size=(2, 3, 12)))
    conv = L.ConvSpec.init(3, 4, 3, 2, rng, "conv")
    bn = L.BatchNormSpec.init(4, "bn")
    bn.scale.data[:] = rng.uniform(0.5, 1.5, 4)
    bn.shift.data[:] = rng.normal(size=4)
    proj = rng.normal(size=(2, 4, 5))
    # train-mode batch norm cancels the conv bias, whose gradient is then exactly
    # zero and its finite difference pure round-off; check it in eval mode only
    for mode in (L.TRAIN, L.EVAL):
        params = ([conv.weight] if mode == L.TRAIN else conv.parameters()) + bn.parameters()
        check(f"conv_block[{mode}]", lambda m=mode: de.sum(L.conv_block(x, conv, bn, m, np.array([12, 9]))[0] * proj),
              params)
    xp = de.tensor(rng.normal(size=(1, 3, 26)))
    offs, lens = np.array([0, 12]), np.array([11, 9])
    proj_p = rng.normal(size=(1, 4, 12))
    check("conv_block_packed", lambda: de.sum(L.conv_block_packed(xp, conv, bn, L.TRAIN, offs, lens)[0] * proj_p),
          [conv.weight] + bn.parameters())

    gw = L.GruWeights.init(4, 3, rng, "gru")
    gb = L.GruWeights.init(4, 3, rng, "gru_b")
    xs = de.tensor(rng.normal(size=(3, 5, 4)))
    lens = np.array([5, 3, 1])
    proj = rng.normal(size=(3, 6))
    check("bigru[batched]", lambda: de.sum(L.bigru(xs, gw, gb, lens) * proj), gw.parameters() + gb.parameters())
    packed = de.tensor(rng.normal(size=(9, 4)))
    check("bigru_packed", lambda: de.sum(L.bigru_packed(packed, gw, gb, np.array([0, 4, 6]), np.array([4, 1, 3])) * proj),
          gw.parameters() + gb.parameters())
    seq = [rng.normal(size=4) for _ in range(3)]
    proj6 = rng.normal(size=6)
    check("bigru_forward", lambda: de.sum(L.bigru_forward(seq, gw, gb) * proj6), gw.parameters() + gb.parameters())
    h0 = rng.normal(size=3) * 0.5
    check("gru_step", lambda: de.sum(L.gru_step(seq[0], h0, gw) * proj6[:3]), gw.parameters())

    rw = L.RnnWeights.init(4, 3, rng, "rnn")
    check("rnn_step", lambda: de.sum(L.rnn_step(seq[0], h0, rw) * proj6[:3]), rw.parameters())

    lin = L.LinearSpec.init(6, rng, "linear")
    v = rng.normal(size=(4, 6))
    mask = L.dropout_mask((4, 6), 0.3, rng)
    check("dropout+linear", lambda: de.sum(de.square(
        L.linear_forward(L.dropout_forward(v, 0.3, L.TRAIN, mask=mask), lin.weight, lin.bias))), lin.parameters())

    table = CalibrationTable("per-subject", ["a", "b"], rng.normal(size=(2, 4)))
    xcal = de.parameter(rng.normal(size=3), "x")
    t0 = rng.uniform(0, 48, size=3)
    check("calibration", lambda: de.sum(xcal * table.factor(["a", "b", "a"], t0)), table.parameters() + [xcal])
    return out


def model_grad_check(variant: str, seed: int = 0, length: int = 10,
                     eps: float = 1e-5) -> de.GradCheckResult:
    """Full forward on one session, dropout off, batch norm in eval mode."""
    session = toy_session(length, seed)
    model = build_model(ModelSpec(variant, dropout=0.0), [session.subject_id], seed)
    views = fuse(session, model.spec.fusion)
    model.feature_scale = [np.sqrt(np.mean(v * v, axis=0)) for v in views]
    if model.calibration.params is not None:
        rng = np.random.default_rng(seed)
        model.calibration.params.data[:] += rng.normal(0, 0.1, model.calibration.params.shape)
    batch = model.collate(make_examples(model.spec, [session]))
    return de.grad_check(lambda: de.sum(model.forward(batch, L.EVAL)), model.parameters(), eps)


def gradient_suite(variants: Sequence[str] = ("dpMood-dropna",), seed: int = 0,
                   eps: float = 1e-5) -> list[tuple[str, de.GradCheckResult]]:
    """Gradient checks for every layer plus full models of the given variants."""
    results = _layer_checks(np.random.default_rng(seed), eps)
    for v in variants:
        results.append((f"model[{v}]", model_grad_check(v, seed, eps=eps)))
    return results
