"""Input preparation: channel averaging, correlation, cloud segmentation,
normalisation, and sliding-window sequence construction.

The preparation chain for radiance is
    sanitise (max-of-frame) -> average channels -> per-frame Otsu mask
    -> normalise (v/150 - 1) -> reflection-pad,
and for rain
    sanitise (zero) -> normalise (v/5 - 1) -> reflection-pad.
Masking runs before normalisation so the mask value (the frame maximum) maps
to one consistent "no cloud" token per frame.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadSelection,
    ConstantChannel,
    DegenerateHistogram,
    Misaligned,
    WrongKind,
)
from .grids import Grid2D, GridStack, Kind, PipelineConfig, reflect_pad, replace_nonfinite

IR_CHANNEL_NAMES = ("IR_097", "IR_108", "IR_120", "IR_134")


@dataclass(frozen=True)
class ChannelSelection:
    """Positions (and display names) of the infrared channels to use."""

    indices: tuple[int, ...] = (0, 1, 2, 3)
    names: tuple[str, ...] = IR_CHANNEL_NAMES

    def validate(self, n_channels: int) -> None:
        if not self.indices:
            raise BadSelection("channel selection is empty")
        if len(set(self.indices)) != len(self.indices):
            raise BadSelection(f"channel indices {self.indices} contain duplicates")
        for i in self.indices:
            if not 0 <= i < n_channels:
                raise BadSelection(f"channel index {i} out of range for {n_channels} channels")


@dataclass
class CorrelationMatrix:
    """Pairwise Pearson coefficients between channels, Table-style layout."""

    labels: list[str]
    values: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {"labels": list(self.labels), "values": self.values.tolist()},
            sort_keys=True,
        )


@dataclass
class SequenceSample:
    """One training/inference unit.

    ``inputs`` holds input_len prepared radiance frames and ``targets`` the
    horizon rain frames that follow them. ``input_rain`` carries the rain
    frames time-matched to the inputs, which is what the translator trains
    on (radiance at t -> rain at the same t).
    """

    inputs: GridStack
    targets: GridStack
    input_rain: GridStack
    t0: float = 0.0
    meta: dict = field(default_factory=dict)


def channel_mean(stack: GridStack, sel: ChannelSelection) -> GridStack:
    """Average the selected channels pixel-wise; output has one channel."""
    sel.validate(stack.n_channels)
    mean = stack.values[:, list(sel.indices)].mean(axis=1, keepdims=True)
    return GridStack(mean, kind=stack.kind, t0=stack.t0, dt=stack.dt)


def pearson_correlation_matrix(stack: GridStack, sel: ChannelSelection) -> CorrelationMatrix:
    """Pearson coefficients between channels, pooled over all frames/pixels.

    Each channel is flattened across (T, H, W) and correlated against the
    others; constant channels raise ConstantChannel. The result is exactly
    symmetric with a unit diagonal.
    """
    sel.validate(stack.n_channels)
    k = len(sel.indices)
    data = stack.values[:, list(sel.indices)].transpose(1, 0, 2, 3).reshape(k, -1)
    if data.shape[1] < 2:
        raise ConstantChannel("need at least 2 samples per channel")
    centred = data - data.mean(axis=1, keepdims=True)
    norms = np.sqrt((centred ** 2).sum(axis=1))
    for i, n in enumerate(norms):
        if n == 0.0:
            raise ConstantChannel(f"channel {sel.names[i] if i < len(sel.names) else i} has zero variance")
    corr = (centred @ centred.T) / np.outer(norms, norms)
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    labels = [sel.names[i] if i < len(sel.names) else f"ch{sel.indices[i]}" for i in range(k)]
    return CorrelationMatrix(labels=labels, values=corr)


def otsu_threshold(grid: Grid2D, bins: int = 256,
                   value_range: tuple[float, float] | None = None) -> float:
    """Between-class-variance threshold over a uniform histogram.

    The histogram spans ``value_range`` (default: the grid's [min, max]) with
    ``bins`` buckets. Candidate t splits classes into bins [0..t] and
    [t+1..]; the returned threshold is the upper edge of the best bin. Ties
    are resolved to the floor-midpoint of the contiguous argmax plateau, so a
    two-valued image thresholds halfway between its values.
    """
    v = grid.values.ravel()
    lo, hi = value_range if value_range is not None else (v.min(), v.max())
    if not np.isfinite(lo) or not np.isfinite(hi) or lo >= hi:
        raise DegenerateHistogram(f"cannot build a histogram over [{lo}, {hi}]")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    total = hist.sum()
    if total == 0:
        raise DegenerateHistogram("no samples fall inside the histogram range")

    p = hist.astype(np.float64) / total
    centres = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * centres)
    m_total = m0[-1]
    w1 = 1.0 - w0
    # omega0*omega1*(mu0 - mu1)^2 == (m_total*w0 - m0)^2 / (w0*w1)
    num = (m_total * w0 - m0) ** 2
    den = w0 * w1
    sigma_b = np.zeros(bins)
    valid = den > 0
    sigma_b[valid] = num[valid] / den[valid]

    best = sigma_b.max()
    if best == 0.0:
        raise DegenerateHistogram("between-class variance is zero everywhere (constant input)")
    ties = np.nonzero(sigma_b == best)[0]
    first = ties[0]
    last = first
    while last + 1 in ties:
        last += 1
    mid = (first + last) // 2
    return float(edges[mid + 1])


def mask_background(grid: Grid2D, threshold: float) -> Grid2D:
    """Set warm (cloud-free) pixels to the frame maximum.

    Pixels strictly above the threshold are background; cloudy pixels
    (depressed radiance) pass through unchanged. Idempotent.
    """
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    values = grid.values.copy()
    values[values > threshold] = grid.values.max()
    return Grid2D(values, kind=grid.kind)


_NORMALIZED_KIND = {Kind.RADIANCE: Kind.NORM_RADIANCE, Kind.RAIN_RATE: Kind.NORM_RAIN}
_PHYSICAL_KIND = {v: k for k, v in _NORMALIZED_KIND.items()}


def normalize(grid: Grid2D, scale: float) -> Grid2D:
    """Map physical values to v/scale - 1 (radiance/150, rain/5).

    No clamping: radiances above twice the scale stay above 1.
    """
    if grid.kind not in _NORMALIZED_KIND:
        raise WrongKind(f"cannot normalize a grid of kind {grid.kind.name}")
    return Grid2D(grid.values / scale - 1.0, kind=_NORMALIZED_KIND[grid.kind])


def denormalize(grid: Grid2D, scale: float) -> Grid2D:
    """Invert `normalize`; rain rates are clamped at zero from below."""
    if grid.kind not in _PHYSICAL_KIND:
        raise WrongKind(f"cannot denormalize a grid of kind {grid.kind.name}")
    values = (grid.values + 1.0) * scale
    kind = _PHYSICAL_KIND[grid.kind]
    if kind is Kind.RAIN_RATE:
        values = np.maximum(values, 0.0)
    return Grid2D(values, kind=kind)


def prepare_radiance(stack: GridStack, cfg: PipelineConfig,
                     sel: ChannelSelection | None = None) -> GridStack:
    """Run the radiance chain: sanitise, average, mask, normalise, pad.

    A constant frame (no cloud/background contrast) skips the Otsu mask,
    which would be undefined, and is recorded in meta["unmasked_frames"].
    """
    stack = replace_nonfinite(stack, "max_of_frame")
    if sel is not None:
        stack = channel_mean(stack, sel)
    elif stack.n_channels > 1:
        stack = channel_mean(stack, ChannelSelection(tuple(range(stack.n_channels))))
    out = np.empty((stack.n_frames, 1, stack.height + 2 * cfg.pad, stack.width + 2 * cfg.pad))
    unmasked = []
    for t in range(stack.n_frames):
        frame = stack.frame(t)
        try:
            frame = mask_background(frame, otsu_threshold(frame))
        except DegenerateHistogram:
            unmasked.append(t)
        frame = normalize(frame, cfg.radiance_scale)
        out[t, 0] = reflect_pad(frame, cfg.pad).values
    meta = dict(stack.meta)
    if unmasked:
        meta["unmasked_frames"] = unmasked
    return GridStack(out, kind=Kind.NORM_RADIANCE, t0=stack.t0, dt=stack.dt, meta=meta)


def prepare_rain(stack: GridStack, cfg: PipelineConfig) -> GridStack:
    """Run the rain chain: sanitise (zeros), normalise, pad."""
    stack = replace_nonfinite(stack, "zero")
    out = np.empty((stack.n_frames, 1, stack.height + 2 * cfg.pad, stack.width + 2 * cfg.pad))
    for t in range(stack.n_frames):
        frame = normalize(stack.frame(t), cfg.rain_scale)
        out[t, 0] = reflect_pad(frame, cfg.pad).values
    return GridStack(out, kind=Kind.NORM_RAIN, t0=stack.t0, dt=stack.dt, meta=dict(stack.meta))


def window_count(n_frames: int, cfg: PipelineConfig, stride: int) -> int:
    """Closed-form number of (input_len + horizon) windows at the stride."""
    span = n_frames - cfg.input_len - cfg.horizon
    if span < 0:
        return 0
    return span // stride + 1


def make_sequences(radiance: GridStack, rain: GridStack, cfg: PipelineConfig,
                   stride: int = 1, sel: ChannelSelection | None = None) -> list[SequenceSample]:
    """Cut time-aligned stacks into (input_len inputs, horizon targets) windows.

    Both stacks are run through their preparation chains first. Window k
    starts at frame k*stride: its inputs are the next input_len radiance
    frames and its targets the horizon rain frames that follow immediately.
    Returns an empty list (with a warning) when the stacks are too short.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if radiance.t0 != rain.t0 or radiance.dt != rain.dt or radiance.n_frames != rain.n_frames:
        raise Misaligned(
            f"radiance (t0={radiance.t0}, dt={radiance.dt}, T={radiance.n_frames}) vs "
            f"rain (t0={rain.t0}, dt={rain.dt}, T={rain.n_frames})"
        )
    if radiance.height != rain.height or radiance.width != rain.width:
        raise Misaligned(
            f"radiance {radiance.height}x{radiance.width} vs rain {rain.height}x{rain.width}"
        )

    count = window_count(radiance.n_frames, cfg, stride)
    if count == 0:
        warnings.warn(
            f"stacks too short for windows: T={radiance.n_frames} < "
            f"input_len + horizon = {cfg.input_len + cfg.horizon}",
            stacklevel=2,
        )
        return []

    rad = prepare_radiance(radiance, cfg, sel)
    rn = prepare_rain(rain, cfg)
    samples = []
    for k in range(count):
        s = k * stride
        e = s + cfg.input_len
        sub = lambda stack, a, b: GridStack(  # noqa: E731
            stack.values[a:b].copy(), kind=stack.kind,
            t0=stack.t0 + a * stack.dt, dt=stack.dt,
        )
        samples.append(SequenceSample(
            inputs=sub(rad, s, e),
            input_rain=sub(rn, s, e),
            targets=sub(rn, e, e + cfg.horizon),
            t0=radiance.time_of(s),
            meta={"window_start": s},
        ))
    return samples
