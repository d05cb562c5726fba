"""Synthetic scene builders for tests, demos, and the bundled fixture.

Scenes are sums of analytic Gaussian bumps, so a "translated" frame is
regenerated from shifted centres rather than resampled -- the truth motion
is exact and free of interpolation artifacts. Radiance scenes are dark
blobs (cold cloud tops) on a bright background; rain is derived from the
cold anomaly, which makes the radiance -> rain relationship affine and
learnable at desk scale.
"""

from __future__ import annotations

import numpy as np

from .grids import GridStack, Kind

RADIANCE_BACKGROUND = 280.0
RAIN_PER_KELVIN = 0.08  # mm/h of rain per unit of cold anomaly below background


def gaussian_bumps(height: int, width: int, centres: np.ndarray,
                   sigmas: np.ndarray, amplitudes: np.ndarray) -> np.ndarray:
    """Sum of 2-D Gaussians; centres are (x, y) pairs in pixel coordinates."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width))
    for (cx, cy), s, a in zip(centres, sigmas, amplitudes):
        out += a * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * s ** 2))
    return out


def random_cloud_params(rng: np.random.Generator, height: int, width: int,
                        n_blobs: int = 8, margin: float = 25.0,
                        sigma_range: tuple[float, float] = (6.0, 10.0),
                        depth_range: tuple[float, float] = (60.0, 120.0)):
    """Random blob centres/sizes/depths, kept away from the frame border."""
    centres = np.column_stack([
        rng.uniform(margin, width - margin, n_blobs),
        rng.uniform(margin, height - margin, n_blobs),
    ])
    sigmas = rng.uniform(*sigma_range, n_blobs)
    depths = rng.uniform(*depth_range, n_blobs)
    return centres, sigmas, depths


def cloud_frame(height: int, width: int, centres: np.ndarray, sigmas: np.ndarray,
                depths: np.ndarray, background: float = RADIANCE_BACKGROUND) -> np.ndarray:
    """Radiance frame: bright background minus Gaussian cold anomalies."""
    return background - gaussian_bumps(height, width, centres, sigmas, depths)


def rain_from_radiance(radiance: np.ndarray, background: float = RADIANCE_BACKGROUND,
                       onset: float = 30.0) -> np.ndarray:
    """Rain rate proportional to the cold anomaly past an onset depth."""
    anomaly = background - radiance
    return np.maximum(anomaly - onset, 0.0) * RAIN_PER_KELVIN


def moving_cloud_sequence(height: int, width: int, n_frames: int,
                          velocity: tuple[float, float], seed: int = 0,
                          n_blobs: int = 8) -> np.ndarray:
    """(T, H, W) radiance frames of one cloud system drifting uniformly."""
    rng = np.random.default_rng(seed)
    centres, sigmas, depths = random_cloud_params(rng, height, width, n_blobs)
    vx, vy = velocity
    frames = np.empty((n_frames, height, width))
    for t in range(n_frames):
        moved = centres + t * np.array([vx, vy])
        frames[t] = cloud_frame(height, width, moved, sigmas, depths)
    return frames


def fixture_stacks(n_frames: int = 20, size: int = 252, n_channels: int = 4,
                   seed: int = 7, nan_holes: int = 3) -> tuple[GridStack, GridStack]:
    """The bundled end-to-end fixture: aligned radiance and rain stacks.

    Radiance has n_channels nearly identical IR channels (small per-channel
    offsets, as in real window/absorption bands) with a cloud system moving
    at ~0.8 px/frame, plus a few NaN holes to exercise sanitisation. Rain is
    the affine cold-anomaly transform of the channel mean.
    """
    rng = np.random.default_rng(seed)
    base = moving_cloud_sequence(size, size, n_frames, velocity=(0.8, 0.5),
                                 seed=seed, n_blobs=10)
    offsets = rng.uniform(-4.0, 4.0, n_channels)
    gains = 1.0 + rng.uniform(-0.02, 0.02, n_channels)
    radiance = np.empty((n_frames, n_channels, size, size))
    for c in range(n_channels):
        radiance[:, c] = base * gains[c] + offsets[c]
    for _ in range(nan_holes):
        t = int(rng.integers(0, n_frames))
        c = int(rng.integers(0, n_channels))
        r = int(rng.integers(0, size))
        col = int(rng.integers(0, size))
        radiance[t, c, r, col] = np.nan

    rain = rain_from_radiance(base)[:, None]
    t0 = 1_700_000_000.0
    return (
        GridStack(radiance, kind=Kind.RADIANCE, t0=t0, dt=900.0),
        GridStack(rain, kind=Kind.RAIN_RATE, t0=t0, dt=900.0),
    )
