"""Clipped uniform quantization of weight tensors.

A b-bit quantizer clips its input to [-s, s] and maps it onto the
2**b evenly spaced levels ``-s, -s + step, ..., +s`` where
``step = 2 s / (2**b - 1)``.  Both grid endpoints are representable, so a
1-bit grid is just ``{-s, +s}``.

The threshold ``s`` comes either from the OCTAV fixed-point recursion
(MSE-optimal clipping) or from the tensor maximum.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import CorruptPayload, DegenerateTensor, NonFiniteInput

MAX_BITS = 32
_SNAP_ULPS = 64 * np.finfo(np.float64).eps


class Mode(str, Enum):
    DETERMINISTIC = "det"
    STOCHASTIC = "stoch"


class ThresholdMode(str, Enum):
    OCTAV = "octav"
    MAX_SCALAR = "max"


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    mode: Mode = Mode.DETERMINISTIC
    threshold_mode: ThresholdMode = ThresholdMode.OCTAV

    def __post_init__(self):
        if not 1 <= int(self.bits) <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        object.__setattr__(self, "bits", int(self.bits))
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "threshold_mode", ThresholdMode(self.threshold_mode))

    @property
    def num_levels(self) -> int:
        return 2 ** self.bits


@dataclass(eq=False)
class QuantizedTensor:
    """Level indices plus the scale needed to reconstruct them."""

    levels: np.ndarray
    scale: float
    bits: int

    @property
    def count(self) -> int:
        return int(self.levels.size)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.scale == other.scale
            and np.array_equal(self.levels, other.levels)
        )


@dataclass(frozen=True)
class QuantStats:
    msqe: float
    clipped_fraction: float


@dataclass(frozen=True)
class OctavResult:
    threshold: float
    iterations: int
    converged: bool
    history: tuple


def step_size(bits: int, s: float) -> float:
    return 2.0 * s / (2 ** bits - 1)


def level_values(bits: int, s: float) -> np.ndarray:
    """All quantization levels for a b-bit grid, ascending."""
    return -s + np.arange(2 ** bits, dtype=np.float64) * step_size(bits, s)


def _as_float_array(values) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("tensor contains NaN or Inf")
    return x


def max_scalar_threshold(values) -> float:
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty tensor")
    return float(np.max(np.abs(x)))


def octav_search(values, bits, max_iters=10, tol=1e-6, rng=None) -> OctavResult:
    """Run the OCTAV recursion and report how it terminated.

    The update is ``s <- sum(|x|, |x| > s) / (4**-b / 3 * #{0 < |x| <= s} + #{|x| > s})``
    starting from ``mean(|x|)`` (or a uniform random draw in ``(0, max|x|]``
    when ``rng`` is given).  Stops when the relative change drops below
    ``tol`` or after ``max_iters`` updates.

    When the numerator vanishes (nothing exceeds the current iterate) the
    maximum magnitude is returned.  If the recursion has not converged after
    ``max_iters`` updates, the last iterate is compared with ``max|x|`` and
    whichever gives the lower deterministic quantization MSE is returned.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be positive")
    a = np.abs(_as_float_array(values)).ravel()
    if a.size == 0:
        raise ValueError("empty tensor")
    amax = float(a.max())
    if amax == 0.0:
        raise DegenerateTensor("all-zero tensor has no clipping threshold")

    nonzero = a[a > 0]
    inner_weight = 4.0 ** (-bits) / 3.0
    if rng is None:
        s = float(nonzero.sum() / a.size)
    else:
        s = float(rng.uniform(0.0, 1.0)) * amax or amax
    history = [s]
    for n in range(1, max_iters + 1):
        over = nonzero > s
        n_over = np.count_nonzero(over)
        numerator = float(nonzero[over].sum())
        denominator = inner_weight * (nonzero.size - n_over) + n_over
        if numerator == 0.0 or denominator == 0.0:
            history.append(amax)
            return OctavResult(amax, n, True, tuple(history))
        s_next = numerator / denominator
        history.append(s_next)
        if abs(s_next - s) < tol * s:
            return OctavResult(s_next, n, True, tuple(history))
        s = s_next

    det = QuantSpec(bits)
    if empirical_mse(a, det, amax) <= empirical_mse(a, det, s):
        s = amax
    return OctavResult(s, max_iters, False, tuple(history))


def octav_threshold(values, bits, max_iters=10, tol=1e-6, rng=None) -> float:
    return octav_search(values, bits, max_iters=max_iters, tol=tol, rng=rng).threshold


def find_threshold(values, spec: QuantSpec) -> float:
    """Threshold for ``values`` under ``spec.threshold_mode``.

    Raises DegenerateTensor for an all-zero tensor in either mode.
    """
    if spec.threshold_mode is ThresholdMode.MAX_SCALAR:
        s = max_scalar_threshold(values)
        if s == 0.0:
            raise DegenerateTensor("all-zero tensor has no clipping threshold")
        return s
    return octav_threshold(values, spec.bits)


def clip(x, s):
    if s <= 0:
        raise ValueError("clipping threshold must be positive")
    return np.clip(x, -s, s)


def _grid_position(x_clipped, bits, s):
    # Fractional level index in [0, L-1]; values that land within rounding
    # noise of a level snap onto it so on-grid inputs are fixed points.
    u = (x_clipped + s) / step_size(bits, s)
    nearest = np.rint(u)
    on_grid = np.abs(u - nearest) <= _SNAP_ULPS * np.maximum(1.0, nearest)
    return np.where(on_grid, nearest, u)


def _index_from_offset(u, offset, bits):
    # offset is the dither in units of one step, in [-1/2, 1/2); zero gives
    # round-half-up nearest-level rounding.
    k = np.floor(u + 0.5 + offset)
    return np.clip(k, 0, 2 ** bits - 1).astype(np.uint64)


def rounding_probabilities(x, bits, s):
    """Bracketing levels of clipped ``x`` and the stochastic rounding odds.

    Returns ``(lower_index, p_lower, p_upper)`` with
    ``p_lower = (q_{k+1} - x) / step`` and ``p_upper = (x - q_k) / step``.
    """
    u = _grid_position(clip(np.asarray(x, dtype=np.float64), s), bits, s)
    lower = np.clip(np.floor(u), 0, max(2 ** bits - 2, 0)).astype(np.int64)
    p_lower = (lower + 1) - u
    return lower, p_lower, 1.0 - p_lower


def quantize(tensor, spec: QuantSpec, s: float, rng=None) -> QuantizedTensor:
    x = _as_float_array(tensor)
    if s <= 0:
        raise ValueError("clipping threshold must be positive")
    u = _grid_position(clip(x, s), spec.bits, s)
    if spec.mode is Mode.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic quantization needs a random generator")
        offset = rng.random(u.shape) - 0.5
    else:
        offset = 0.0
    levels = _index_from_offset(u, offset, spec.bits)
    return QuantizedTensor(levels=levels.ravel(), scale=float(s), bits=spec.bits)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    levels = np.asarray(qt.levels)
    if levels.size and int(levels.max()) >= 2 ** qt.bits:
        raise CorruptPayload(f"level index exceeds {2 ** qt.bits - 1}")
    return -qt.scale + levels.astype(np.float64) * step_size(qt.bits, qt.scale)


def fake_quantize(tensor, spec: QuantSpec, s: float, rng=None):
    """Quantize-dequantize ``tensor`` at threshold ``s``.

    Returns ``(values, stats, qt)``: the reconstructed tensor in the input's
    shape, error statistics measured against the unclipped input, and the
    QuantizedTensor that produced it.
    """
    x = _as_float_array(tensor)
    qt = quantize(x, spec, s, rng)
    y = dequantize(qt).reshape(x.shape)
    msqe = float(np.mean((x - y) ** 2)) if x.size else 0.0
    clipped = float(np.mean(np.abs(x) > s)) if x.size else 0.0
    return y, QuantStats(msqe=msqe, clipped_fraction=clipped), qt


def empirical_mse(values, spec: QuantSpec, s: float, trials=1, rng=None) -> float:
    x = _as_float_array(values)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if spec.mode is Mode.DETERMINISTIC:
        trials = 1
    total = 0.0
    for _ in range(trials):
        y = dequantize(quantize(x, spec, s, rng)).reshape(x.shape)
        total += float(np.mean((x - y) ** 2))
    return total / trials
