"""Object motion tracker: a small MLP that turns box history into quadratic motion functions.

Each of the four box coordinates gets its own quadratic ``a*c**2 + b*c + e``
evaluated at the coordinate's value in the previous frame; the top-left corner
is then pushed outward by the padding and the bottom-right corner likewise.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import BBox, enforce_min_ratio, pad

log = logging.getLogger(__name__)

# x1, y1 move up/left by the padding, x2, y2 down/right
PAD_SIGN = np.array([-1.0, -1.0, 1.0, 1.0])

CHECKPOINT_MAGIC = b"OMTK"
CHECKPOINT_VERSION = 1


class EstimatorDiverged(RuntimeError):
    """A motion prediction or training loss became non-finite."""

    def __init__(self, message: str, last_finite_loss: float | None = None, step: int | None = None):
        super().__init__(message)
        self.last_finite_loss = last_finite_loss
        self.step = step


class TrackDead(RuntimeError):
    pass


@dataclass(frozen=True)
class MotionParams:
    """Quadratic coefficients, one row per coordinate (x1, y1, x2, y2).

    Columns are (alpha, beta, epsilon).
    """

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64).reshape(4, 3)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def identity(cls) -> "MotionParams":
        return cls(np.tile([0.0, 1.0, 0.0], (4, 1)))

    @property
    def alpha(self) -> np.ndarray:
        return self.coeffs[:, 0]

    @property
    def beta(self) -> np.ndarray:
        return self.coeffs[:, 1]

    @property
    def epsilon(self) -> np.ndarray:
        return self.coeffs[:, 2]


def eval_motion(params: MotionParams, prev: BBox, phi: float, clamp: bool = True, cell: float = 1.0 / 64) -> BBox:
    """Predict the next box by plugging ``prev`` into the motion functions.

    With ``clamp`` the result is forced into the unit square; a box whose
    corners cross after clamping collapses to its midpoint +- half a cell.
    """
    c = np.array(prev.as_tuple())
    out = params.alpha * c * c + params.beta * c + params.epsilon + PAD_SIGN * phi
    if not np.all(np.isfinite(out)):
        raise EstimatorDiverged(f"non-finite motion prediction {out.tolist()}")
    if not clamp:
        return BBox(*(float(v) for v in out))
    out = np.clip(out, 0.0, 1.0)
    for lo, hi in ((0, 2), (1, 3)):
        if out[lo] > out[hi]:
            mid = 0.5 * (out[lo] + out[hi])
            out[lo] = max(0.0, mid - 0.5 * cell)
            out[hi] = min(1.0, mid + 0.5 * cell)
    return BBox(*(float(v) for v in out))


@dataclass
class MotionEstimator:
    """Two-layer tanh MLP from K flattened boxes to 12 motion coefficients."""

    history: int
    hidden: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    loss_curve: list = field(default_factory=list, compare=False, repr=False)

    @classmethod
    def init(cls, history: int = 2, hidden: int = 64, seed: int | np.random.Generator = 0) -> "MotionEstimator":
        """Random hidden layer, near-zero readout, output bias at identity coefficients.

        The untrained estimator therefore behaves like a copy-last-box tracker.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n_in = 4 * history
        W1 = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, hidden))
        b1 = np.zeros(hidden)
        W2 = rng.normal(0.0, 1e-3 / np.sqrt(hidden), size=(hidden, 12))
        b2 = MotionParams.identity().coeffs.reshape(-1).copy()
        return cls(history, hidden, W1, b1, W2, b2)

    @property
    def n_inputs(self) -> int:
        return 4 * self.history

    @property
    def n_params(self) -> int:
        return self.n_inputs * self.hidden + self.hidden + self.hidden * 12 + 12

    def param_arrays(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.param_arrays()])

    def with_flat(self, theta: np.ndarray) -> "MotionEstimator":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        arrays, pos = [], 0
        for p in self.param_arrays():
            arrays.append(theta[pos:pos + p.size].reshape(p.shape).copy())
            pos += p.size
        return MotionEstimator(self.history, self.hidden, *arrays)

    def copy(self) -> "MotionEstimator":
        return self.with_flat(self.flat())

    def equals(self, other: "MotionEstimator") -> bool:
        return (
            self.history == other.history
            and self.hidden == other.hidden
            and all(np.array_equal(a, b) for a, b in zip(self.param_arrays(), other.param_arrays()))
        )


def _forward_batch(est: MotionEstimator, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hid = np.tanh(X @ est.W1 + est.b1)
    return hid, hid @ est.W2 + est.b2


def forward(est: MotionEstimator, x) -> MotionParams:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != est.n_inputs:
        raise ValueError(f"estimator expects {est.n_inputs} inputs, got {x.size}")
    _, out = _forward_batch(est, x[None, :])
    return MotionParams(out[0])


@dataclass(frozen=True)
class TrainBatch:
    inputs: np.ndarray  # (n, 4K), oldest box first
    targets: np.ndarray  # (n, 4)

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        Y = np.asarray(self.targets, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2 or Y.shape[1] != 4 or X.shape[1] % 4:
            raise ValueError(f"bad batch shapes {X.shape} / {Y.shape}")
        if len(X) != len(Y):
            raise ValueError(f"{len(X)} inputs but {len(Y)} targets")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "TrainBatch":
        return TrainBatch(self.inputs[idx], self.targets[idx])


def predict_batch(est: MotionEstimator, X: np.ndarray, phi: float) -> np.ndarray:
    """Unclamped predicted boxes for each row of ``X``."""
    _, out = _forward_batch(est, X)
    coef = out.reshape(-1, 4, 3)
    last = X[:, -4:]
    return coef[:, :, 0] * last**2 + coef[:, :, 1] * last + coef[:, :, 2] + PAD_SIGN * phi


def loss_and_grad(est: MotionEstimator, batch: TrainBatch, phi: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared corner error (over samples and the 4 coordinates) and its gradient.

    Predictions are left unclamped so the gradient is exact.
    """
    if len(batch) == 0:
        raise ValueError("empty training batch")
    X, Y = batch.inputs, batch.targets
    if X.shape[1] != est.n_inputs:
        raise ValueError(f"estimator expects {est.n_inputs} inputs, got {X.shape[1]}")
    hid, out = _forward_batch(est, X)
    coef = out.reshape(-1, 4, 3)
    last = X[:, -4:]
    pred = coef[:, :, 0] * last**2 + coef[:, :, 1] * last + coef[:, :, 2] + PAD_SIGN * phi
    err = pred - Y
    loss = float(np.mean(err * err))

    d_pred = 2.0 * err / err.size
    d_out = np.stack([d_pred * last**2, d_pred * last, d_pred], axis=2).reshape(len(X), 12)
    d_hid = d_out @ est.W2.T
    d_pre = d_hid * (1.0 - hid * hid)
    grad = {
        "W1": X.T @ d_pre,
        "b1": d_pre.sum(axis=0),
        "W2": hid.T @ d_out,
        "b2": d_out.sum(axis=0),
    }
    return loss, grad


def flat_grad(grad: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grad[k].reshape(-1) for k in ("W1", "b1", "W2", "b2")])


def train(
    est: MotionEstimator,
    dataset: TrainBatch,
    steps: int,
    lr: float,
    phi: float = 0.0,
    momentum: float = 0.9,
    optimizer: str = "adam",
    batch_size: Optional[int] = None,
    seed: int = 0,
) -> MotionEstimator:
    """Fit the estimator to next-box targets; returns a new estimator.

    ``optimizer`` is ``"adam"`` (``momentum`` is beta1) or ``"sgd"`` (heavy-ball
    momentum). The returned estimator's ``loss_curve`` holds the full-dataset
    loss before every step plus the final loss.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    rng = np.random.default_rng(seed)
    theta = est.flat()
    vel = np.zeros_like(theta)
    sq = np.zeros_like(theta)
    beta2, eps = 0.999, 1e-8
    curve: list[float] = []
    last_finite: float | None = None
    cur = est
    n = len(dataset)
    for step in range(steps):
        # overflow is caught below as divergence
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = loss_and_grad(cur, dataset, phi)
            g_loss = loss
            if batch_size is not None and batch_size < n:
                g_loss, grad = loss_and_grad(cur, dataset.subset(rng.choice(n, batch_size, replace=False)), phi)
        g = flat_grad(grad)
        if not (np.isfinite(loss) and np.isfinite(g_loss) and np.all(np.isfinite(g))):
            raise EstimatorDiverged(
                f"training diverged at step {step}; last finite loss {last_finite}",
                last_finite_loss=last_finite,
                step=step,
            )
        curve.append(loss)
        last_finite = loss
        if optimizer == "sgd":
            vel = momentum * vel - lr * g
            theta = theta + vel
        else:
            vel = momentum * vel + (1.0 - momentum) * g
            sq = beta2 * sq + (1.0 - beta2) * g * g
            m_hat = vel / (1.0 - momentum ** (step + 1))
            v_hat = sq / (1.0 - beta2 ** (step + 1))
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        cur = cur.with_flat(theta)
    with np.errstate(over="ignore", invalid="ignore"):
        final, _ = loss_and_grad(cur, dataset, phi)
    if not np.isfinite(final):
        raise EstimatorDiverged(
            f"training diverged after {steps} steps; last finite loss {last_finite}",
            last_finite_loss=last_finite,
            step=steps,
        )
    curve.append(final)
    cur = cur.copy() if steps == 0 else cur
    cur.loss_curve = curve
    return cur


@dataclass(frozen=True)
class TrackState:
    object_id: int
    history: tuple[tuple[int, BBox], ...] = ()
    alive: bool = True
    window: int = 2
    last_frame: int = -1

    @classmethod
    def start(cls, object_id: int, box: BBox, frame: int = 0, window: int = 2) -> "TrackState":
        return cls(object_id, ((frame, box),), True, window, frame)

    @property
    def last_box(self) -> BBox:
        return self.history[-1][1]

    def recent_run(self) -> list[BBox]:
        """Trailing boxes observed on consecutive frames, oldest first."""
        run = [self.history[-1]]
        for item in reversed(self.history[:-1]):
            if item[0] != run[-1][0] - 1:
                break
            run.append(item)
        return [box for _, box in reversed(run)]


def update_track(state: TrackState, observed: Optional[BBox], frame: int) -> TrackState:
    """Fold one frame's segmentation result into a track.

    ``observed`` is the tight box of the object's segmented cells, or None if
    the object got no cells, which marks the track dead until it shows up again.
    """
    if frame <= state.last_frame:
        raise ValueError(f"frame {frame} is not after last update {state.last_frame} for object {state.object_id}")
    if observed is None:
        return replace(state, alive=False, last_frame=frame)
    hist = (state.history + ((frame, observed),))[-state.window:]
    return replace(state, history=hist, alive=True, last_frame=frame)


def predict_box(state: TrackState, est: Optional[MotionEstimator], phi: float, cell: float = 1.0 / 64) -> BBox:
    """Padded next-frame box, before the minimum-area rule.

    Falls back to padding the last box whenever fewer than K boxes from
    consecutive frames are available (start of a track, or just after
    reappearing).
    """
    if not state.alive:
        raise TrackDead(f"object {state.object_id} is not being tracked")
    if not state.history:
        raise ValueError(f"object {state.object_id} has no history")
    run = state.recent_run()
    if est is None or len(run) < est.history:
        return pad(state.last_box, phi)
    x = np.array([c for b in run[-est.history:] for c in b.as_tuple()])
    return eval_motion(forward(est, x), run[-1], phi, clamp=True, cell=cell)


def predict_roi(state: TrackState, est: Optional[MotionEstimator], phi: float, min_ratio: float, cell: float = 1.0 / 64) -> BBox:
    return enforce_min_ratio(predict_box(state, est, phi, cell), min_ratio)


def estimator_to_bytes(est: MotionEstimator) -> bytes:
    header = CHECKPOINT_MAGIC + bytes([CHECKPOINT_VERSION]) + struct.pack("<II", est.history, est.hidden)
    return header + est.flat().astype("<f8").tobytes()


def estimator_from_bytes(data: bytes) -> MotionEstimator:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an estimator checkpoint (bad magic)")
    if data[4] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data[4]}")
    history, hidden = struct.unpack("<II", data[5:13])
    theta = np.frombuffer(data[13:], dtype="<f8").astype(np.float64)
    shell = MotionEstimator(history, hidden, np.zeros((4 * history, hidden)), np.zeros(hidden), np.zeros((hidden, 12)), np.zeros(12))
    if theta.size != shell.n_params:
        raise ValueError(f"checkpoint holds {theta.size} parameters, expected {shell.n_params}")
    return shell.with_flat(theta)


def save_estimator(est: MotionEstimator, path) -> None:
    Path(path).write_bytes(estimator_to_bytes(est))


def load_estimator(path) -> MotionEstimator:
    return estimator_from_bytes(Path(path).read_bytes())
