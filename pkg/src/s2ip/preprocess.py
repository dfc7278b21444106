"""Window-level preprocessing: reversible instance normalization, additive
seasonal-trend decomposition, overlapped patching, and meta-token assembly.

The normalization uses instance (per-window) statistics with a trainable
affine map, so it can be inverted exactly on the forecast. Decomposition is
additive: trend + seasonal + residual reconstructs the input bit-for-bit by
construction. Patches are overlapping slices of the series after its tail is
replicate-padded by one stride, which realizes the "+2" in the patch-count
formula.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

DEFAULT_EPSILON = 1e-5

META_TOKEN_MAGIC = b"METATOK1"


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class RevInState:
    """Instance statistics plus the affine parameters used to normalize one
    window; kept so the forecast can be mapped back to the original scale."""

    mean: float
    variance: float
    gamma: float
    beta: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.variance < 0:
            raise PreprocessError("variance must be nonnegative")
        if self.epsilon <= 0:
            raise PreprocessError("epsilon must be positive")

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.variance + self.epsilon))


def revin_normalize(x: np.ndarray, gamma: float = 1.0, beta: float = 0.0,
                    epsilon: float = DEFAULT_EPSILON
                    ) -> tuple[np.ndarray, RevInState]:
    """Map a window to gamma * (x - mean) / sqrt(var + eps) + beta.

    Mean and variance are the window's own (population) statistics; they are
    returned in the state for later inversion.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise PreprocessError(f"need a 1-D window of length >= 2, got shape {x.shape}")
    state = RevInState(mean=float(x.mean()), variance=float(x.var()),
                       gamma=float(gamma), beta=float(beta),
                       epsilon=float(epsilon))
    return gamma * (x - state.mean) / state.scale + beta, state


def revin_denormalize(y: np.ndarray, state: RevInState) -> np.ndarray:
    """Exact inverse of :func:`revin_normalize` using the stored statistics."""
    if state.gamma == 0.0:
        raise PreprocessError("cannot invert normalization with gamma == 0")
    y = np.asarray(y, dtype=np.float64)
    return (y - state.beta) / state.gamma * state.scale + state.mean


@dataclass(frozen=True)
class DecompositionResult:
    trend: np.ndarray
    seasonal: np.ndarray
    residual: np.ndarray
    period: int
    trend_window: int
    method: str


def _validate_decomposition_args(n: int, period: int, trend_window: int) -> None:
    if not 2 <= period <= n // 2:
        raise PreprocessError(f"period must lie in [2, {n // 2}] for a window of "
                              f"length {n}, got {period}")
    if trend_window % 2 == 0 or not 1 <= trend_window <= n:
        raise PreprocessError(f"trend_window must be odd and <= {n}, got {trend_window}")


def moving_average_trend(x: np.ndarray, trend_window: int) -> np.ndarray:
    """Centered moving average with replicate-extended edges, so a constant
    series has itself as trend."""
    half = trend_window // 2
    padded = np.pad(x, half, mode="edge")
    kernel = np.full(trend_window, 1.0 / trend_window)
    return np.convolve(padded, kernel, mode="valid")


def classical_decompose(x: np.ndarray, period: int, trend_window: int
                        ) -> DecompositionResult:
    """Classical additive decomposition.

    Trend is a centered moving average; the seasonal component is the
    per-phase mean of the detrended series, de-meaned so each full period
    sums to zero; the residual is whatever remains.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    _validate_decomposition_args(n, period, trend_window)
    trend = moving_average_trend(x, trend_window)
    detrended = x - trend
    phases = np.arange(n) % period
    phase_means = np.array([detrended[phases == p].mean() for p in range(period)])
    phase_means -= phase_means.mean()
    seasonal = phase_means[phases]
    residual = x - trend - seasonal
    return DecompositionResult(trend, seasonal, residual, period, trend_window,
                               "classical")


def _tricube(dist: np.ndarray, width: np.ndarray) -> np.ndarray:
    return (1.0 - np.minimum(dist / width, 1.0) ** 3) ** 3


def _fit_line(sw, sx, sxx, sy, sxy, at):
    denom = sw * sxx - sx * sx
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    slope = np.where(np.abs(denom) > 1e-12, (sw * sxy - sx * sy) / safe, 0.0)
    intercept = (sy - slope * sx) / sw
    return intercept + slope * at


def _loess_batch(ys: np.ndarray, span: int) -> np.ndarray:
    """Locally weighted degree-1 regression at every sample point, applied
    row-wise to a (B, n) batch that shares positions.

    Uses the ``span`` nearest neighbours with tricube weights; equivalent to
    a global weighted line when span >= n.
    """
    n = ys.shape[1]
    q = min(max(span, 2), n)
    idx0 = np.clip(np.arange(n) - q // 2, 0, n - q)
    cols = idx0[:, None] + np.arange(q)[None, :]        # (n, q)
    xs = cols.astype(np.float64)
    centers = np.arange(n, dtype=np.float64)[:, None]
    dist = np.abs(xs - centers)
    width = np.maximum(dist.max(axis=1, keepdims=True), 1e-12)
    w = _tricube(dist, width)                           # (n, q)
    yw = ys[:, cols]                                    # (B, n, q)
    sw = w.sum(axis=1)
    sx = (w * xs).sum(axis=1)
    sxx = (w * xs * xs).sum(axis=1)
    sy = np.einsum("nq,bnq->bn", w, yw)
    sxy = np.einsum("nq,bnq->bn", w * xs, yw)
    return _fit_line(sw, sx, sxx, sy, sxy, centers[:, 0])


def _loess_fit(y: np.ndarray, span: int) -> np.ndarray:
    return _loess_batch(y[None, :], span)[0]


def _loess_at_batch(ys: np.ndarray, points, span: int) -> np.ndarray:
    """Evaluate the local fit at arbitrary (possibly exterior) positions,
    shared across a (B, n) batch of rows."""
    n = ys.shape[1]
    q = min(max(span, 2), n)
    out = np.empty((ys.shape[0], len(points)))
    for j, p in enumerate(points):
        start = int(np.clip(round(p) - q // 2, 0, n - q))
        xs = np.arange(start, start + q, dtype=np.float64)
        dist = np.abs(xs - p)
        width = max(dist.max(), 1e-12)
        w = _tricube(dist, width)
        block = ys[:, start:start + q]
        out[:, j] = _fit_line(w.sum(), (w * xs).sum(), (w * xs * xs).sum(),
                              block @ w, block @ (w * xs), p)
    return out


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    kernel = np.full(window, 1.0 / window)
    return np.convolve(x, kernel, mode="valid")


def stl_decompose(x: np.ndarray, period: int, trend_window: int,
                  seasonal_span: int = 7, inner_iterations: int = 2
                  ) -> DecompositionResult:
    """Iterative loess-based decomposition.

    Each inner pass smooths the cycle-subseries of the detrended data
    (extended one period on each side), removes a low-pass version of the
    result to get the seasonal component, then loess-smooths the
    deseasonalized series to refine the trend. The residual is defined as
    x - trend - seasonal, so additivity is exact.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    _validate_decomposition_args(n, period, trend_window)
    if seasonal_span % 2 == 0 or seasonal_span < 3:
        raise PreprocessError("seasonal_span must be odd and >= 3")
    if inner_iterations < 1:
        raise PreprocessError("need at least one inner iteration")

    lowpass_span = period + (period % 2 == 0)  # smallest odd >= period
    # cycle-subseries lengths take at most two values; group for batching
    groups: dict[int, list[int]] = {}
    for phase in range(period):
        groups.setdefault(-(-(n - phase) // period), []).append(phase)

    trend = np.zeros(n)
    seasonal = np.zeros(n)
    for _ in range(inner_iterations):
        detrended = x - trend
        extended = np.empty(n + 2 * period)
        for m, phases in groups.items():
            batch = np.stack([detrended[phase::period] for phase in phases])
            interior = _loess_batch(batch, seasonal_span)
            exterior = _loess_at_batch(batch, (-1.0, float(m)), seasonal_span)
            positions = np.arange(-1, m + 1)
            for row, phase in enumerate(phases):
                times = phase + positions * period + period
                extended[times[0]] = exterior[row, 0]
                extended[times[1:-1]] = interior[row]
                extended[times[-1]] = exterior[row, 1]
        lowpass = _moving_average(_moving_average(_moving_average(
            extended, period), period), 3)
        lowpass = _loess_fit(lowpass, lowpass_span)
        seasonal = extended[period:period + n] - lowpass
        trend = _loess_fit(x - seasonal, trend_window)
    residual = x - trend - seasonal
    return DecompositionResult(trend, seasonal, residual, period, trend_window,
                               "stl")


def decompose(x: np.ndarray, period: int, trend_window: int,
              method: str = "classical", **kwargs) -> DecompositionResult:
    """Additive decomposition by the requested method."""
    if method == "classical":
        return classical_decompose(x, period, trend_window)
    if method == "stl":
        return stl_decompose(x, period, trend_window, **kwargs)
    raise PreprocessError(f"unknown decomposition method {method!r}")


@dataclass(frozen=True)
class PatchSpec:
    """Patch length and horizontal stride; length >= stride keeps patches
    overlapped."""

    patch_length: int
    stride: int

    def __post_init__(self):
        if self.patch_length < 1 or self.stride < 1:
            raise PreprocessError("patch_length and stride must be positive")
        if self.patch_length < self.stride:
            raise PreprocessError("patch_length must be >= stride (overlap convention)")


def patch_count(length: int, spec: PatchSpec) -> int:
    """floor((tau - L_P) / S) + 2 patches per window."""
    if spec.patch_length > length:
        raise PreprocessError(f"patch_length {spec.patch_length} exceeds window "
                              f"length {length}")
    return (length - spec.patch_length) // spec.stride + 2


def patch(component: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Slice a component series into overlapping patches.

    The series is first right-padded with ``stride`` copies of its last
    value; row k is then the slice starting at k * stride.
    """
    component = np.asarray(component, dtype=np.float64)
    if component.ndim != 1:
        raise PreprocessError(f"expected a 1-D component, got shape {component.shape}")
    n_patches = patch_count(component.size, spec)
    padded = np.concatenate([component, np.full(spec.stride, component[-1])])
    rows = np.empty((n_patches, spec.patch_length))
    for k in range(n_patches):
        start = k * spec.stride
        rows[k] = padded[start:start + spec.patch_length]
    return rows


@dataclass(frozen=True)
class MetaToken:
    """Horizontal concatenation of the trend, seasonal, and residual patch
    matrices (in that order), with the normalization state riding along."""

    values: np.ndarray
    n_patches: int
    revin: RevInState

    @property
    def width(self) -> int:
        return self.values.shape[1]


def build_meta_token(trend_patches: np.ndarray, seasonal_patches: np.ndarray,
                     residual_patches: np.ndarray, revin: RevInState) -> MetaToken:
    shapes = {trend_patches.shape, seasonal_patches.shape, residual_patches.shape}
    if len(shapes) != 1:
        raise PreprocessError(f"component patch shapes disagree: {sorted(shapes)}")
    values = np.hstack([trend_patches, seasonal_patches, residual_patches])
    return MetaToken(values=values, n_patches=values.shape[0], revin=revin)


def dump_meta_token(token: MetaToken, fh: BinaryIO) -> None:
    """Debug dump: 16-byte header (magic, n_patches, width) then row-major
    float64 data."""
    fh.write(META_TOKEN_MAGIC)
    fh.write(struct.pack("<II", token.n_patches, token.width))
    fh.write(np.ascontiguousarray(token.values, dtype="<f8").tobytes())


def load_meta_token_values(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(8)
    if magic != META_TOKEN_MAGIC:
        raise PreprocessError("not a meta-token dump")
    n_patches, width = struct.unpack("<II", fh.read(8))
    raw = fh.read(n_patches * width * 8)
    return np.frombuffer(raw, dtype="<f8").reshape(n_patches, width).copy()
