"""Raster data model, NWG1 binary I/O, sanitisation, padding, and PGM output.

Conventions
- Arrays are indexed ``[row, col]``; row 0 is the top of the image.
- In-memory values are float64 so downstream arithmetic keeps full precision;
  the NWG1 file format stores little-endian float32 (see `write_grid_stack`).
- A :class:`GridStack` is the universal carrier: T frames x C channels of
  H x W fields plus the timing metadata (``t0`` epoch seconds, ``dt`` frame
  spacing in seconds, 900 s = one 15-minute satellite slot).

NWG1 format (all little-endian)
    bytes 0-3   magic ``NWG1``
    byte  4     version (1)
    byte  5     kind code (0 radiance, 1 rain, 2 norm-radiance, 3 norm-rain, 4 flow)
    bytes 6-7   reserved, zero
    4 x u32     T, C, H, W
    2 x f64     t0 (epoch s), dt (s)
    payload     T*C*H*W f32, frame-major, then channel, then row-major pixels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BadTarget,
    IoFailure,
    PadTooLarge,
    TruncatedPayload,
    UnsupportedVersion,
)

MAGIC = b"NWG1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sBBH4I2d")  # 40 bytes

DEFAULT_DT_SECONDS = 900.0


class Kind(IntEnum):
    """What a grid's values mean; doubles as the NWG1 kind code."""

    RADIANCE = 0
    RAIN_RATE = 1
    NORM_RADIANCE = 2
    NORM_RAIN = 3
    FLOW = 4


@dataclass
class Grid2D:
    """One H x W field of float64 values with a semantic kind."""

    values: np.ndarray
    kind: Kind = Kind.RADIANCE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"Grid2D expects a 2-D array, got shape {self.values.shape}")
        self.kind = Kind(self.kind)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class GridStack:
    """T x C x H x W raster with frame timing.

    Invariants: ``dt > 0`` and all frames share height/width/kind. Frames are
    stored time-ordered; frame t is valid at ``t0 + t * dt``.
    """

    values: np.ndarray
    kind: Kind = Kind.RADIANCE
    t0: float = 0.0
    dt: float = DEFAULT_DT_SECONDS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise ValueError(f"GridStack expects a (T, C, H, W) array, got shape {self.values.shape}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        self.kind = Kind(self.kind)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    def frame(self, t: int, c: int = 0) -> Grid2D:
        """View frame t, channel c as a Grid2D (shares memory)."""
        return Grid2D(self.values[t, c], kind=self.kind)

    def time_of(self, t: int) -> float:
        return self.t0 + t * self.dt


@dataclass(frozen=True)
class PipelineConfig:
    """Scalar constants of the nowcasting pipeline.

    ``radiance_scale`` / ``rain_scale`` are the normalisation divisors
    (v -> v/scale - 1). ``input_len`` radiance frames predict ``horizon``
    rain frames; frames are ``native_size`` square, reflection-padded to
    ``padded_size`` for the networks, and predictions are upsampled by
    ``resample_factor`` before ``block_size`` aggregation for scoring.
    """

    radiance_scale: float = 150.0
    rain_scale: float = 5.0
    input_len: int = 4
    horizon: int = 16
    native_size: int = 252
    padded_size: int = 256
    resample_factor: int = 6
    block_size: int = 32
    dt_hours: float = 0.25

    def __post_init__(self):
        diff = self.padded_size - self.native_size
        if diff < 2 or diff % 2 != 0:
            raise ValueError("padded_size - native_size must be even and >= 2")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.input_len < 2:
            raise ValueError("input_len must be >= 2 (flow needs a frame pair)")

    @property
    def pad(self) -> int:
        return (self.padded_size - self.native_size) // 2


def write_grid_stack(stack: GridStack, path: str | Path) -> None:
    """Serialise a stack to the NWG1 format (float32 payload).

    Byte output is a pure function of the stack contents, so equal stacks
    produce identical files.
    """
    t, c, h, w = stack.values.shape
    header = HEADER.pack(MAGIC, FORMAT_VERSION, int(stack.kind), 0, t, c, h, w,
                         float(stack.t0), float(stack.dt))
    payload = np.ascontiguousarray(stack.values, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write grid stack to {path}: {exc}") from exc


def read_grid_stack(path: str | Path) -> GridStack:
    """Read an NWG1 file written by `write_grid_stack`.

    Raises BadMagic / UnsupportedVersion / TruncatedPayload when the header
    or payload does not match the declared layout.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read grid stack from {path}: {exc}") from exc

    if len(raw) < HEADER.size:
        raise TruncatedPayload(f"{path}: file shorter than the {HEADER.size}-byte header")
    magic, version, kind_code, _reserved, t, c, h, w, t0, dt = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: version {version} not supported (expected {FORMAT_VERSION})")

    expected = t * c * h * w * 4
    present = len(raw) - HEADER.size
    if present != expected:
        raise TruncatedPayload(
            f"{path}: header declares {t}x{c}x{h}x{w} ({expected} payload bytes), found {present}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(t, c, h, w)
    return GridStack(values.astype(np.float64), kind=Kind(kind_code), t0=t0, dt=dt)


def replace_nonfinite(stack: GridStack, policy: str = "max_of_frame") -> GridStack:
    """Replace NaN/inf values so every pixel is finite.

    ``max_of_frame`` substitutes each frame's (per channel) maximum finite
    value -- for infrared radiance that is the cloud-free background.
    ``zero`` substitutes 0, the convention for missing rain. A frame with no
    finite value at all falls back to 0 and is listed in
    ``meta["all_nonfinite_frames"]`` as (frame, channel) pairs.

    Idempotent: applying it twice equals applying it once.
    """
    if policy not in ("max_of_frame", "zero"):
        raise ValueError(f"unknown policy {policy!r}")
    values = stack.values.copy()
    degenerate: list[tuple[int, int]] = []
    bad = ~np.isfinite(values)
    for t, c in zip(*np.nonzero(bad.any(axis=(2, 3)))):
        frame = values[t, c]
        mask = bad[t, c]
        if policy == "zero":
            frame[mask] = 0.0
            continue
        finite = frame[~mask]
        if finite.size == 0:
            frame[mask] = 0.0
            degenerate.append((int(t), int(c)))
        else:
            frame[mask] = finite.max()
    meta = dict(stack.meta)
    if degenerate:
        meta["all_nonfinite_frames"] = degenerate
    return GridStack(values, kind=stack.kind, t0=stack.t0, dt=stack.dt, meta=meta)


def reflect_pad(grid: Grid2D, pad: int) -> Grid2D:
    """Mirror-pad without repeating the edge pixel.

    Row [1,2,3,4] with pad 2 becomes [3,2,1,2,3,4,3,2]; this is the variant
    that keeps the border C1-symmetric. Requires pad < min(height, width).
    """
    if pad == 0:
        return Grid2D(grid.values.copy(), kind=grid.kind)
    if pad < 0 or pad >= min(grid.height, grid.width):
        raise PadTooLarge(f"pad {pad} invalid for a {grid.height}x{grid.width} grid")
    return Grid2D(np.pad(grid.values, pad, mode="reflect"), kind=grid.kind)


def crop_center(grid: Grid2D, target_h: int, target_w: int) -> Grid2D:
    """Return the centered target_h x target_w window of the grid."""
    dh = grid.height - target_h
    dw = grid.width - target_w
    if target_h <= 0 or target_w <= 0 or dh < 0 or dw < 0 or dh % 2 or dw % 2:
        raise BadTarget(
            f"cannot center-crop {grid.height}x{grid.width} to {target_h}x{target_w}"
        )
    r0, c0 = dh // 2, dw // 2
    return Grid2D(grid.values[r0:r0 + target_h, c0:c0 + target_w].copy(), kind=grid.kind)


def write_pgm(grid: Grid2D, value_range: tuple[float, float], path: str | Path) -> None:
    """Emit a binary 8-bit PGM for visual inspection.

    Values map by v -> round(255 * clamp((v - lo)/(hi - lo), 0, 1)) with
    half-up rounding, so the midpoint lands on byte 128.
    """
    lo, hi = value_range
    if not lo < hi:
        raise ValueError(f"need lo < hi, got ({lo}, {hi})")
    scaled = np.clip((grid.values - lo) / (hi - lo), 0.0, 1.0)
    pixels = np.floor(255.0 * scaled + 0.5).astype(np.uint8)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write PGM to {path}: {exc}") from exc
