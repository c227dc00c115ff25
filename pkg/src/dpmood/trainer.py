"""RMSProp training loop, RMSE evaluation, convergence history and the
train-ratio sweep."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffengine as de
from . import layers as L
from .datamodel import LabeledSession, atomic_write_text, split_by_subject
from .diffengine import Tensor
from .modelzoo import Example, Model, ModelSpec, build_model, make_examples

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    epochs: int = 200
    dropout: float = 0.1
    min_seq: int = 10
    max_seq: int = 100
    gru_hidden: int = 20
    seed: int = 0
    train_fraction: float = 0.8
    target: str = "hdrs"
    cohort: str = "with-controls"
    rho: float = 0.99
    eps: float = 1e-8
    normalize_inputs: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate must be > 0, batch_size >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not 1 <= self.min_seq <= self.max_seq:
            raise ValueError("need 1 <= min_seq <= max_seq")
        if self.target not in ("hdrs", "ymrs"):
            raise ValueError(f"target must be hdrs or ymrs, got {self.target!r}")
        if self.cohort not in ("with-controls", "bipolar-only", "all", "bipolar"):
            raise ValueError(f"unknown cohort {self.cohort!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- RMSProp

@dataclass
class RmspropState:
    rho: float = 0.99
    eps: float = 1e-8
    v: dict[int, np.ndarray] = field(default_factory=dict)
    rejected: int = 0


def rmsprop_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: RmspropState,
                 lr: float) -> None:
    """In-place update: v <- rho v + (1 - rho) g^2; theta <- theta - lr g / (sqrt(v) + eps).

    A parameter whose gradient has any non-finite entry is left untouched for
    this step and the event is counted in ``state.rejected``.
    """
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise de.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            state.rejected += 1
            log.warning("non-finite gradient for %s; step skipped", p.name)
            continue
        v = state.v.get(id(p))
        v = (1.0 - state.rho) * g * g if v is None else state.rho * v + (1.0 - state.rho) * g * g
        state.v[id(p)] = v
        p.data -= lr * g / (np.sqrt(v) + state.eps)


# ---------------------------------------------------------------- history

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_rmse: float
    test_rmse: float
    seconds: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    rejected_steps: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    @property
    def test_rmse(self) -> np.ndarray:
        return np.array([r.test_rmse for r in self.records])

    @property
    def train_rmse(self) -> np.ndarray:
        return np.array([r.train_rmse for r in self.records])

    def best(self) -> tuple[int, float]:
        """(epoch, test RMSE) of the lowest test RMSE; (0, nan) when empty."""
        finite = [r for r in self.records if math.isfinite(r.test_rmse)]
        if not finite:
            return 0, math.nan
        r = min(finite, key=lambda r: r.test_rmse)
        return r.epoch, r.test_rmse

    def to_csv(self, wall_time: bool = False) -> str:
        """epoch,train_rmse,test_rmse,seconds.  Wall time is left blank unless
        requested so that reruns are byte-identical."""
        lines = ["epoch,train_rmse,test_rmse,seconds"]
        for r in self.records:
            secs = f"{r.seconds:.3f}" if wall_time else ""
            lines.append(f"{r.epoch},{r.train_rmse!r},{r.test_rmse!r},{secs}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path, wall_time: bool = False) -> None:
        atomic_write_text(path, self.to_csv(wall_time))


# ------------------------------------------------------------- evaluation

def worker_count(default: int | None = None) -> int:
    env = os.environ.get("DPMOOD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"DPMOOD_THREADS must be an integer, got {env!r}") from None
    return default or os.cpu_count() or 1


def _canonical(examples: Sequence[Example]) -> list[Example]:
    # a fixed order makes chunking, and hence every float, independent of input order
    return sorted(examples, key=lambda e: (e.subject_id, e.t0_hours, len(e.views[0]), e.label))


def predict_examples(model: Model, examples: Sequence[Example], batch_size: int = 256,
                     workers: int | None = None) -> np.ndarray:
    """Eval-mode predictions, parallel over chunks, in the order given."""
    chunks = [list(examples[i:i + batch_size]) for i in range(0, len(examples), batch_size)]
    run = lambda c: model.forward(model.collate(c), L.EVAL).data.copy()  # noqa: E731
    n = min(worker_count(workers), len(chunks)) if chunks else 1
    if n <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            parts = list(pool.map(run, chunks))
    return np.concatenate(parts) if parts else np.zeros(0)


def rmse(pred, labels) -> float:
    pred, labels = np.asarray(pred, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("RMSE of an empty set")
    return float(np.sqrt(np.mean((pred - labels) ** 2)))


def evaluate(model: Model, sessions: Sequence[LabeledSession | Example], workers: int | None = None) -> float:
    """Root-mean-square error with dropout off and batch norm in eval mode."""
    if len(sessions) == 0:
        raise ValueError("cannot evaluate on an empty session set")
    examples = [s if isinstance(s, Example) else make_examples(model.spec, [s])[0] for s in sessions]
    examples = _canonical(examples)
    pred = predict_examples(model, examples, workers=workers)
    return rmse(pred, [e.label for e in examples])


# --------------------------------------------------------------- training

def feature_scales(examples: Sequence[Example], n_views: int) -> list[np.ndarray]:
    """Per-channel root-mean-square of the training inputs (1 where zero)."""
    scales = []
    for v in range(n_views):
        rows = np.concatenate([e.views[v] for e in examples], axis=0)
        rms = np.sqrt(np.mean(rows * rows, axis=0))
        scales.append(np.where(rms > 0, rms, 1.0))
    return scales


def batch_loss(model: Model, batch, rng: np.random.Generator | None = None,
               dropout_mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error of one batch in train mode."""
    pred = model.forward(batch, L.TRAIN, rng, dropout_mask)
    return de.mean(de.square(pred - batch.labels))


def train(spec: ModelSpec | str, train_sessions: Sequence[LabeledSession | Example],
          test_sessions: Sequence[LabeledSession | Example] = (), config: TrainConfig | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Model, History]:
    """Fit a model with RMSProp on mini-batches of ``config.batch_size`` sessions."""
    config = config or TrainConfig()
    spec = ModelSpec(spec) if isinstance(spec, str) else spec
    spec = replace(spec, hidden=config.gru_hidden, dropout=config.dropout)
    if len(train_sessions) == 0:
        raise ValueError("empty training set")
    train_ex = [s if isinstance(s, Example) else make_examples(spec, [s])[0] for s in train_sessions]
    test_ex = _canonical([s if isinstance(s, Example) else make_examples(spec, [s])[0] for s in test_sessions])

    model = build_model(spec, sorted({e.subject_id for e in train_ex}), seed=config.seed)
    if config.normalize_inputs:
        model.feature_scale = feature_scales(train_ex, len(spec.view_channels))
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    params = model.parameters()
    state = RmspropState(config.rho, config.eps)
    history = History()
    n = len(train_ex)

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sq_err = 0.0
        for i in range(0, n, config.batch_size):
            batch = model.collate([train_ex[j] for j in order[i:i + config.batch_size]])
            with de.Tape() as tape:
                pred = model.forward(batch, L.TRAIN, dropout_rng)
                loss = de.mean(de.square(pred - batch.labels))
            grads = tape.gradient(loss, params)
            rmsprop_step(params, [grads[p] for p in params], state, config.learning_rate)
            sq_err += float(np.sum((pred.data - batch.labels) ** 2))
        train_rmse = math.sqrt(sq_err / n)
        test_rmse = rmse(predict_examples(model, test_ex), [e.label for e in test_ex]) if test_ex else math.nan
        rec = EpochRecord(epoch, train_rmse, test_rmse, time.perf_counter() - start)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    history.rejected_steps = state.rejected
    return model, history


# ------------------------------------------------------------ ratio sweep

SWEEP_FRACTIONS = (0.3, 0.4, 0.5, 0.6, 0.7)


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    n_train: int
    n_test: int
    final_rmse: float
    best_rmse: float
    best_epoch: int


def ratio_sweep(spec: ModelSpec | str, sessions: Sequence[LabeledSession],
                fractions: Sequence[float] = SWEEP_FRACTIONS, config: TrainConfig | None = None) -> list[SweepRow]:
    """Train and evaluate once per train fraction with the same seed."""
    config = config or TrainConfig()
    rows = []
    for f in fractions:
        tr, te = split_by_subject(sessions, f)
        model, hist = train(spec, tr, te, replace(config, train_fraction=f))
        final = evaluate(model, te) if te else math.nan
        best_epoch, best = hist.best()
        rows.append(SweepRow(float(f), len(tr), len(te), final, best, best_epoch))
        log.info("fraction %.2f: train %d test %d rmse %.4f", f, len(tr), len(te), final)
    return rows


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["fraction,n_train,n_test,final_rmse,best_rmse,best_epoch"]
    for r in rows:
        lines.append(f"{r.fraction!r},{r.n_train},{r.n_test},{r.final_rmse!r},{r.best_rmse!r},{r.best_epoch}")
    return "\n".join(lines) + "\n"


def results_text(variant: str, config: TrainConfig, final_rmse: float, history: History) -> str:
    best_epoch, best = history.best()
    return json.dumps({"variant": variant, "target": config.target, "cohort": config.cohort,
                       "seed": config.seed, "final_rmse": final_rmse, "best_rmse": best,
                       "best_epoch": best_epoch}, indent=1) + "\n"
