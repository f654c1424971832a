"""
Down/diagonal DTW over K prototypes, written as a recurrent model that can be trained.

State h_t is a (K, L + 1) array. Column 0 is the boundary column: 0 at t = 0 and the sentinel
afterwards, which also serves as the left pad of the window-2 minimum. Untrained parameters
(W = 1, b = 0) reproduce dtw_core.dtw_batched exactly; training moves P, W and b by plain SGD
on gradients derived by hand below.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from _compat import StrEnum
from pathlib import Path
from typing import Sequence

import numpy as np
import numpy.typing as npt
from joblib import Parallel, delayed
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax
from typing_extensions import Self

import codec
from data_io import Dataset
from dtw_core import (
    DEFAULT_SENTINEL,
    DimensionError,
    FloatArray,
    HasValues,
    Label,
    NoFeasiblePathError,
)
from prototypes import PrototypeSet

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"WARPNET\0"
MODEL_VERSION = 1

LOSS_EPS = 1e-12
# sentinel must clear 1e6 x largest step cost x (N + L)
SENTINEL_MARGIN = 1e6


class LabelError(ValueError):
    pass


class TraceError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    pass


class SentinelError(ValueError):
    pass


class ModelFileError(codec.CodecError):
    pass


class MinMode(StrEnum):
    DIRECT = "direct"
    MAXPOOL = "maxpool"


@dataclass(frozen=True, eq=False)
class ModelParams:
    """
    Trainable P (K, L, D), W (K, D) and b (K,), the fixed one-hot read-out O (L,), and the
    class table mapping every class to its prototype rows.
    """

    P: FloatArray
    W: FloatArray
    b: FloatArray
    O: FloatArray
    classes: tuple[Label, ...]
    class_index: dict[Label, tuple[int, ...]]
    sentinel: float = DEFAULT_SENTINEL
    tau: float = 1.0
    _row_class: npt.NDArray[np.int64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        row_class = np.full(self.P.shape[0], -1, dtype=np.int64)
        for ci, c in enumerate(self.classes):
            row_class[list(self.class_index[c])] = ci
        object.__setattr__(self, "_row_class", row_class)

    @property
    def K(self) -> int:
        return int(self.P.shape[0])

    @property
    def L(self) -> int:
        return int(self.P.shape[1])

    @property
    def D(self) -> int:
        return int(self.P.shape[2])

    @property
    def row_class(self) -> npt.NDArray[np.int64]:
        """Class-table position of every prototype row"""
        return self._row_class

    def validate(self) -> None:
        k, l_len, d = self.P.shape
        if self.W.shape != (k, d) or self.b.shape != (k,) or self.O.shape != (l_len,):
            raise ValueError(
                f"Parameter shapes disagree: P{self.P.shape} W{self.W.shape} "
                f"b{self.b.shape} O{self.O.shape}"
            )
        if np.count_nonzero(self.O) != 1 or self.O[-1] != 1.0:
            raise ValueError("O must be one-hot at its last position")
        if not self.tau > 0:
            raise ValueError(f"Temperature must be positive, got {self.tau}")
        if not self.sentinel > 0:
            raise ValueError(f"Sentinel must be positive, got {self.sentinel}")
        if np.any(self._row_class < 0):
            raise ValueError("Some prototype rows belong to no class")
        if not self.is_finite():
            raise ValueError("Parameters contain non-finite values")

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in (self.P, self.W, self.b))

    def copy(self) -> Self:
        return replace(self, P=self.P.copy(), W=self.W.copy(), b=self.b.copy(), O=self.O.copy())


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """
    states[t] is h_t for t = 0..N, shape (N + 1, K, L + 1).
    advance[t - 1, i, j - 1] is True when h_t[i, j] took h_{t-1}[i, j - 1] (ties stay).
    deltas[t - 1] is Delta_t(S), shape (K, L).
    """

    states: FloatArray
    advance: npt.NDArray[np.bool_]
    deltas: FloatArray

    @property
    def n_steps(self) -> int:
        return int(self.advance.shape[0])


@dataclass(frozen=True, eq=False)
class Gradients:
    dP: FloatArray
    dW: FloatArray
    db: FloatArray

    def norm(self) -> float:
        return math.sqrt(
            float(np.sum(self.dP**2) + np.sum(self.dW**2) + np.sum(self.db**2))
        )

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(self.dP * factor, self.dW * factor, self.db * factor)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.dP))
            and np.all(np.isfinite(self.dW))
            and np.all(np.isfinite(self.db))
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 30
    seed: int = 0
    patience: int | None = 5
    grad_clip: float | None = 10.0
    mode: MinMode = MinMode.DIRECT


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    train_accuracy: float


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class: dict[Label, float]
    predictions: tuple[Label, ...]


def init_from_prototypes(
    protos: PrototypeSet, sentinel: float = DEFAULT_SENTINEL, tau: float = 1.0
) -> ModelParams:
    """Copy P from the prototypes, W = 1, b = 0: the untrained model is exact DTW"""
    k, l_len, d = protos.tensor().shape
    o = np.zeros(l_len)
    o[-1] = 1.0
    params = ModelParams(
        P=protos.tensor().copy(),
        W=np.ones((k, d)),
        b=np.zeros(k),
        O=o,
        classes=protos.classes,
        class_index=dict(protos.class_index),
        sentinel=sentinel,
        tau=tau,
    )
    params.validate()
    return params


def _transformed(params: ModelParams, x_t: FloatArray) -> FloatArray:
    # row i of W scales x_t elementwise, b[i] shifts every component
    out: FloatArray = params.W * x_t[None, :] + params.b[:, None]
    return out


def delta_step(params: ModelParams, x_t: FloatArray) -> FloatArray:
    """Delta_t(S)[i, j] = || W[i] * x_t + b[i] - P[i, j] ||^2, shape (K, L)"""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (params.D,):
        raise DimensionError(f"Step input has shape {x_t.shape}, expected ({params.D},)")
    diff = _transformed(params, x_t)[:, None, :] - params.P
    out: FloatArray = np.sum(diff * diff, axis=-1)
    return out


def _window_min(prev: FloatArray, mode: MinMode) -> tuple[FloatArray, npt.NDArray[np.bool_]]:
    """
    min(h[:, j], h[:, j - 1]) for j = 1..L and whether the left neighbour won.
    MAXPOOL takes the negated max over windows of width 2, stride 1.
    """
    if mode is MinMode.MAXPOOL:
        windows = sliding_window_view(-prev, 2, axis=1)
        best: FloatArray = -windows.max(axis=-1)
        adv: npt.NDArray[np.bool_] = windows[..., 0] > windows[..., 1]
        return best, adv
    stay = prev[:, 1:]
    move = prev[:, :-1]
    return np.minimum(stay, move), move < stay


def forward(
    params: ModelParams, x: HasValues, mode: MinMode = MinMode.DIRECT
) -> tuple[FloatArray, ForwardTrace]:
    xv = x.values
    n = xv.shape[0]
    k, l_len = params.K, params.L
    if xv.shape[1] != params.D:
        raise DimensionError(f"Input dimension {xv.shape[1]} != model dimension {params.D}")
    if n < l_len:
        raise NoFeasiblePathError(f"Input length {n} shorter than prototype length {l_len}")

    states = np.empty((n + 1, k, l_len + 1))
    states[0] = params.sentinel
    states[0, :, 0] = 0.0
    advance = np.empty((n, k, l_len), dtype=np.bool_)
    deltas = np.empty((n, k, l_len))

    for t in range(1, n + 1):
        delta = delta_step(params, xv[t - 1])
        best, adv = _window_min(states[t - 1], mode)
        states[t, :, 0] = params.sentinel
        states[t, :, 1:] = delta + best
        advance[t - 1] = adv
        deltas[t - 1] = delta

    distances: FloatArray = states[n, :, 1:] @ params.O
    return distances, ForwardTrace(states, advance, deltas)


def _soft_or(params: ModelParams, distances: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Softmax weights over all K prototypes and the unclipped per-class mass"""
    weights: FloatArray = softmax(-distances / params.tau)
    mass = np.zeros(len(params.classes))
    np.add.at(mass, params.row_class, weights)
    return weights, mass


def aggregate(params: ModelParams, distances: FloatArray) -> FloatArray:
    """Score(c) = min(1, sum of softmax weights of class c's prototypes)"""
    _, mass = _soft_or(params, distances)
    scores: FloatArray = np.minimum(1.0, mass)
    return scores


def class_scores(
    params: ModelParams, x: HasValues, mode: MinMode = MinMode.DIRECT
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Class scores, per-prototype distances and softmax weights for one input"""
    distances, _ = forward(params, x, mode)
    weights, mass = _soft_or(params, distances)
    return np.minimum(1.0, mass), distances, weights


def predict(params: ModelParams, x: HasValues, mode: MinMode = MinMode.DIRECT) -> Label:
    scores, _, _ = class_scores(params, x, mode)
    # argmax keeps the first class on ties
    return params.classes[int(np.argmax(scores))]


def _class_position(classes: Sequence[Label], true_class: Label) -> int:
    try:
        return list(classes).index(true_class)
    except ValueError:
        raise LabelError(f"Unknown class {true_class!r}, known: {list(classes)}") from None


def loss(scores: FloatArray, true_class: Label, classes: Sequence[Label]) -> float:
    """Negative log of the true class's score after renormalizing the scores"""
    y = _class_position(classes, true_class)
    shifted = scores + LOSS_EPS
    return float(-math.log(shifted[y] / shifted.sum()))


def _backward(
    params: ModelParams, x: HasValues, trace: ForwardTrace, true_class: Label
) -> tuple[float, Gradients, FloatArray]:
    xv = x.values
    n = xv.shape[0]
    k, l_len = params.K, params.L
    if (
        trace.states.shape != (n + 1, k, l_len + 1)
        or trace.advance.shape != (n, k, l_len)
        or trace.deltas.shape != (n, k, l_len)
    ):
        raise TraceError(
            f"Trace shape {trace.states.shape} does not match input length {n} "
            f"and model (K={k}, L={l_len})"
        )
    y = _class_position(params.classes, true_class)

    distances = trace.states[n, :, 1:] @ params.O
    weights, mass = _soft_or(params, distances)
    scores = np.minimum(1.0, mass)
    shifted = scores + LOSS_EPS
    total = shifted.sum()
    value = float(-math.log(shifted[y] / total))

    # loss -> scores -> clipped mass -> softmax -> distances
    g_scores = np.full(len(params.classes), 1.0 / total)
    g_scores[y] -= 1.0 / shifted[y]
    g_mass = np.where(mass < 1.0, g_scores, 0.0)
    g_weights = g_mass[params.row_class]
    g_logits = weights * (g_weights - np.dot(weights, g_weights))
    g_dist = -g_logits / params.tau

    dP = np.zeros_like(params.P)
    dW = np.zeros_like(params.W)
    db = np.zeros_like(params.b)
    g_h = g_dist[:, None] * params.O[None, :]
    dead_level = params.sentinel / 2

    for t in range(n, 0, -1):
        # dead cells carry the sentinel and pass nothing back
        g_delta = np.where(trace.states[t, :, 1:] < dead_level, g_h, 0.0)

        x_t = xv[t - 1]
        diff = _transformed(params, x_t)[:, None, :] - params.P
        g_diff = 2.0 * g_delta[:, :, None] * diff
        dP -= g_diff
        g_u = g_diff.sum(axis=1)
        dW += g_u * x_t[None, :]
        db += g_u.sum(axis=1)

        adv = trace.advance[t - 1]
        g_prev = np.zeros((k, l_len + 1))
        g_prev[:, 1:] += np.where(adv, 0.0, g_delta)
        g_prev[:, :-1] += np.where(adv, g_delta, 0.0)
        # column 0 is boundary
        g_h = g_prev[:, 1:]

    return value, Gradients(dP, dW, db), scores


def backward(
    params: ModelParams, x: HasValues, trace: ForwardTrace, true_class: Label
) -> Gradients:
    """
    Exact gradients of the loss w.r.t. P, W and b, holding the recorded min choices fixed.
    """
    _, grads, _ = _backward(params, x, trace, true_class)
    return grads


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    if lr < 0:
        raise ValueError(f"Learning rate must be >= 0, got {lr}")
    return replace(
        params,
        P=params.P - lr * grads.dP,
        W=params.W - lr * grads.dW,
        b=params.b - lr * grads.db,
    )


def train(
    params: ModelParams, train_set: Dataset, config: TrainConfig
) -> tuple[ModelParams, list[EpochRecord]]:
    """
    Per-example SGD, reshuffled every epoch from config.seed. Returns the parameters of the
    epoch with the lowest mean loss and the per-epoch history.
    """
    rng = np.random.default_rng(config.seed)
    history: list[EpochRecord] = []
    best_params = params
    best_loss = math.inf
    stale = 0
    n = len(train_set)
    if n == 0 or config.epochs == 0:
        return params, history

    for epoch in range(1, config.epochs + 1):
        total = 0.0
        correct = 0
        for idx in rng.permutation(n):
            x = train_set.instances[idx]
            assert x.label is not None
            _, trace = forward(params, x, config.mode)
            value, grads, scores = _backward(params, x, trace, x.label)
            if not math.isfinite(value) or not grads.is_finite():
                raise DivergenceError(
                    f"Non-finite loss at epoch {epoch} on {x.id}; "
                    "lower the learning rate or raise tau"
                )
            total += value
            correct += params.classes[int(np.argmax(scores))] == x.label
            if config.grad_clip is not None:
                norm = grads.norm()
                if norm > config.grad_clip:
                    grads = grads.scaled(config.grad_clip / norm)
            params = sgd_step(params, grads, config.lr)
            if not params.is_finite():
                raise DivergenceError(
                    f"Non-finite parameters after the update at epoch {epoch} on {x.id}; "
                    "lower the learning rate or raise tau"
                )

        record = EpochRecord(epoch, total / n, correct / n)
        history.append(record)
        logger.info(
            f"epoch {epoch}: loss {record.mean_loss:.5f} train acc {record.train_accuracy:.4f}"
        )

        if record.mean_loss < best_loss:
            best_loss = record.mean_loss
            best_params = params
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                logger.info(f"No improvement for {stale} epochs, stopping at epoch {epoch}")
                break

    return best_params, history


def calibrate_tau(
    params: ModelParams, batch: Sequence[HasValues], mode: MinMode = MinMode.DIRECT
) -> float:
    """Mean per-prototype distance over a calibration batch, 1.0 if that is not positive"""
    if not batch:
        return 1.0
    tau = float(np.mean([forward(params, x, mode)[0] for x in batch]))
    if not tau > 0 or not math.isfinite(tau):
        logger.warning(f"Calibrated tau {tau} unusable, falling back to 1.0")
        return 1.0
    return tau


def validate_sentinel(params: ModelParams, batch: Sequence[HasValues]) -> None:
    if not batch:
        return
    max_delta = max(float(delta_step(params, x_t).max()) for x in batch for x_t in x.values)
    longest = max(x.values.shape[0] for x in batch)
    needed = SENTINEL_MARGIN * max_delta * (longest + params.L)
    if params.sentinel < needed:
        raise SentinelError(
            f"Sentinel {params.sentinel:g} below required {needed:g} for this data"
        )


def evaluate(
    params: ModelParams, dataset: Dataset, mode: MinMode = MinMode.DIRECT, n_jobs: int = 1
) -> EvalResult:
    predictions = tuple(
        Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(predict)(params, x, mode) for x in dataset.instances
        )
    )
    truth = [x.label for x in dataset.instances]
    hits = [p == t for p, t in zip(predictions, truth)]
    per_class: dict[Label, float] = {}
    for c in dataset.classes:
        mask = [h for h, t in zip(hits, truth) if t == c]
        if mask:
            per_class[c] = sum(mask) / len(mask)
    accuracy = sum(hits) / len(hits) if hits else 0.0
    return EvalResult(accuracy, per_class, predictions)


def alignment(trace: ForwardTrace, row: int) -> list[tuple[int, int]]:
    """1-based (t, j) pairs of the path prototype `row` took, recovered from the choices"""
    j = trace.advance.shape[2]
    path = []
    for t in range(trace.n_steps, 0, -1):
        path.append((t, j))
        if trace.advance[t - 1, row, j - 1]:
            j -= 1
    path.reverse()
    return path


def save_model(params: ModelParams, path: Path | str) -> None:
    with open(path, "wb") as f:
        codec.write_header(
            f,
            MODEL_MAGIC,
            MODEL_VERSION,
            (params.K, params.L, params.D),
            (params.tau, params.sentinel),
            codec.encode_class_table(params.classes, params.class_index),
        )
        for arr in (params.P, params.W, params.b):
            codec.write_array(f, arr)


def load_model(path: Path | str) -> ModelParams:
    with open(path, "rb") as f:
        header = codec.read_header(f, MODEL_MAGIC, ModelFileError)
        if header.version != MODEL_VERSION:
            raise ModelFileError(f"Unsupported model file version {header.version}")
        if len(header.scalars) != 2:
            raise ModelFileError(f"Expected tau and sentinel, got {len(header.scalars)} scalars")
        k, l_len, d = header.shape
        P = codec.read_array(f, (k, l_len, d), ModelFileError)
        W = codec.read_array(f, (k, d), ModelFileError)
        b = codec.read_array(f, (k,), ModelFileError)
    classes, index = codec.decode_class_table(header.table, ModelFileError)
    o = np.zeros(l_len)
    o[-1] = 1.0
    tau, sentinel = header.scalars
    params = ModelParams(P, W, b, o, classes, index, sentinel, tau)
    try:
        params.validate()
    except ValueError as e:
        raise ModelFileError(f"Invalid model in {path}: {e}") from None
    return params
