"""Per-stream interpolation, x-prediction loss and clock schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

STREAMS = ("pix", "fre", "dino")
CLOCK_KINDS = ("synchronous", "cascaded", "linear_offset", "variance_shifted")
T_CLIP = 0.05


@dataclass(frozen=True)
class ClockMap:
    """One monotone map phi: [0, 1] -> [0, 1] with phi(t) >= t and phi(1) = 1.

    ``param`` is the breakpoint b (cascaded), offset delta (linear_offset)
    or shift strength s (variance_shifted); it is ignored for synchronous.
    """

    kind: str = "synchronous"
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in CLOCK_KINDS:
            raise ValueError(f"unknown clock kind {self.kind!r}; expected one of {CLOCK_KINDS}")
        p = self.param
        if self.kind == "cascaded" and not 0 < p <= 1:
            raise ValueError(f"cascaded breakpoint must be in (0, 1], got {p}")
        if self.kind == "linear_offset" and p < 0:
            raise ValueError(f"linear offset must be >= 0, got {p}")
        if self.kind == "variance_shifted" and p < 1:
            raise ValueError(f"variance shift must be >= 1, got {p}")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "synchronous":
            return t.copy() if t.ndim else t
        if self.kind == "cascaded":
            return np.minimum(1.0, t / self.param)
        if self.kind == "linear_offset":
            return np.minimum(1.0, t + self.param)
        s = self.param
        return s * t / (1.0 + (s - 1.0) * t)

    def describe(self) -> str:
        return self.kind if self.kind == "synchronous" else f"{self.kind}({self.param:g})"


@dataclass
class ClockSchedule:
    """Clock maps for the auxiliary streams; the pixel clock is the identity."""

    maps: dict[str, ClockMap] = field(default_factory=dict)

    @classmethod
    def uniform(cls, kind: str, param: float = 0.0, streams=("fre",)) -> "ClockSchedule":
        return cls({s: ClockMap(kind, param) for s in streams})

    def phi(self, stream: str) -> ClockMap:
        if stream == "pix":
            return ClockMap()
        return self.maps.get(stream, ClockMap())

    def describe(self) -> str:
        return " ".join(f"{k}:{v.describe()}" for k, v in sorted(self.maps.items())) or "synchronous"


def interpolate(x_clean, noise, t) -> Tensor:
    """``z = t x + (1 - t) noise``; t is a scalar or one value per leading sample."""
    x_clean, noise = T.as_tensor(x_clean), T.as_tensor(noise)
    if x_clean.shape != noise.shape:
        raise T.ShapeError(f"clean target {x_clean.shape} and noise {noise.shape} differ")
    t = _per_sample(t, x_clean.ndim)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("interpolation time must lie in [0, 1]")
    return x_clean * t + noise * (1.0 - t)


def _per_sample(t, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def loss_denominator(t, t_clip: float = T_CLIP) -> np.ndarray:
    return np.maximum(1.0 - np.asarray(t, dtype=np.float64), t_clip)


def xpred_loss(x_pred, x_clean, z, t, t_clip: float = T_CLIP, weight=None, check: bool = False) -> Tensor:
    """Velocity-weighted x-prediction loss, averaged over elements.

    Evaluates the simplified form ``|x_pred - x|^2 / max(1-t, t_clip)^2``; the
    z terms of the velocity form cancel. With ``check`` the velocity form is
    evaluated too and the two are required to agree to 1e-10 (relative).
    ``weight`` optionally scales each sample.
    """
    x_pred, x_clean = T.as_tensor(x_pred), T.as_tensor(x_clean)
    if x_pred.shape != x_clean.shape:
        raise T.ShapeError(f"prediction {x_pred.shape} and target {x_clean.shape} differ")
    for name, v in (("x_pred", x_pred), ("x_clean", x_clean)):
        if not np.all(np.isfinite(v.data)):
            raise FloatingPointError(f"non-finite values in {name}")
    d = _per_sample(loss_denominator(t, t_clip), x_pred.ndim)
    w = 1.0 / (d * d)
    if weight is not None:
        w = w * _per_sample(weight, x_pred.ndim)
    diff = x_pred - x_clean
    loss = T.mean(T.square(diff) * w)
    if check:
        zt = T.as_tensor(z).detach()
        vel = (x_pred.detach() - zt) / d - (x_clean.detach() - zt) / d
        if weight is not None:
            vel = vel * np.sqrt(_per_sample(weight, x_pred.ndim))
        other = T.mean(T.square(vel)).item()
        if not np.isclose(other, loss.item(), rtol=1e-10, atol=1e-300):
            raise AssertionError(f"x-prediction loss forms disagree: {loss.item()!r} vs {other!r}")
    return loss


def xpred_loss_velocity_form(x_pred, x_clean, z, t, t_clip: float = T_CLIP) -> Tensor:
    """The unsimplified form, kept for identity checks."""
    x_pred, x_clean, z = T.as_tensor(x_pred), T.as_tensor(x_clean), T.as_tensor(z)
    d = _per_sample(loss_denominator(t, t_clip), x_pred.ndim)
    return T.mean(T.square((x_pred - z) / d - (x_clean - z) / d))


def schedule_map(t_pix, schedule: ClockSchedule, stream_id: str):
    t = np.asarray(t_pix, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("pixel clock must lie in [0, 1]")
    return schedule.phi(stream_id)(t)


def sample_training_clocks(rng: np.random.Generator, schedule: ClockSchedule, streams=("pix", "fre"),
                           batch: int = 1, independent: bool = False) -> dict[str, np.ndarray]:
    """Draw ``t_pix ~ U[0, 1]`` and derive auxiliary clocks through phi.

    With ``independent`` every stream gets its own uniform draw instead.
    """
    t_pix = rng.uniform(0.0, 1.0, size=batch)
    clocks = {"pix": t_pix}
    for s in streams:
        if s == "pix":
            continue
        clocks[s] = rng.uniform(0.0, 1.0, size=batch) if independent else schedule_map(t_pix, schedule, s)
    return clocks


@dataclass
class LossWeights:
    lambdas: dict[str, float] = field(default_factory=lambda: {"pix": 1.0, "fre": 1.0, "dino": 1.0})
    t_clip: float = T_CLIP
    fre_decay: float = 0.0

    def __post_init__(self):
        if not 0 < self.t_clip < 1:
            raise ValueError("t_clip must be in (0, 1)")
        if any(v < 0 for v in self.lambdas.values()):
            raise ValueError("stream weights must be >= 0")
        if not 0 <= self.fre_decay <= 1:
            raise ValueError("fre_decay must be in [0, 1]")

    def time_weight(self, stream: str, t_pix) -> np.ndarray | None:
        """Per-sample weight for the frequency stream decaying linearly in the pixel clock."""
        if stream != "fre" or self.fre_decay == 0:
            return None
        return 1.0 - self.fre_decay * np.asarray(t_pix)


def total_loss(stream_losses: dict, weights: LossWeights | dict, wavelet_regs: dict | None = None,
               reg_weights=None) -> Tensor:
    """Weighted sum of per-stream losses plus weighted wavelet regularizers."""
    lambdas = weights.lambdas if isinstance(weights, LossWeights) else weights
    total = T.as_tensor(0.0)
    for stream, loss in stream_losses.items():
        if stream not in lambdas:
            raise KeyError(f"no loss weight for stream {stream!r}")
        total = total + lambdas[stream] * T.as_tensor(loss)
    if wavelet_regs:
        if reg_weights is None:
            raise ValueError("regularizer values given without weights")
        for name, val in wavelet_regs.items():
            total = total + getattr(reg_weights, name) * T.as_tensor(val)
    return total
