"""Scoring path: rain accumulation, resampling, block averaging, and CRPS.

Predictions leave the network as 15-minute rain rates (mm/h). Scoring
converts them to 4-hour depth (sum of rate * dt_hours, in mm), upsamples to
the observation grid by pixel-centre bilinear interpolation, averages over
block_size x block_size cells, and compares against observations with the
empirical CRPS. A deterministic forecast is a 1-member ensemble, for which
CRPS reduces to absolute error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FairNeedsTwo, Misaligned, SizeMismatch
from .grids import Grid2D, GridStack, Kind, PipelineConfig

ESTIMATORS = ("nrg", "fair")


@dataclass
class EvalReport:
    """Aggregate CRPS over an evaluation run."""

    mean_crps: float
    per_sample_crps: list[float]
    block_size: int
    n_samples: int
    estimator: str

    def to_json(self) -> str:
        return json.dumps({
            "mean_crps": self.mean_crps,
            "per_sample_crps": self.per_sample_crps,
            "block_size": self.block_size,
            "n_samples": self.n_samples,
            "estimator": self.estimator,
        }, sort_keys=True)


def accumulate_rain(frames: GridStack, dt_hours: float = 0.25) -> Grid2D:
    """Total depth (mm) over the horizon: per pixel, sum of rate * dt."""
    if frames.n_channels != 1:
        raise SizeMismatch(f"expected single-channel rain frames, got C={frames.n_channels}")
    total = frames.values[:, 0].sum(axis=0) * dt_hours
    return Grid2D(total, kind=Kind.RAIN_RATE)


def bilinear_resample(grid: Grid2D, factor: int) -> Grid2D:
    """Upsample by an integer factor with pixel-centre bilinear sampling.

    Output pixel (i, j) samples input coordinate ((i + 0.5)/factor - 0.5,
    same for j), clamped at the borders; factor 1 is the identity.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return Grid2D(grid.values.copy(), kind=grid.kind)
    h, w = grid.height, grid.width
    src_r = np.clip((np.arange(h * factor) + 0.5) / factor - 0.5, 0.0, h - 1.0)
    src_c = np.clip((np.arange(w * factor) + 0.5) / factor - 0.5, 0.0, w - 1.0)
    r0 = np.minimum(src_r.astype(int), h - 2) if h > 1 else np.zeros(h * factor, dtype=int)
    c0 = np.minimum(src_c.astype(int), w - 2) if w > 1 else np.zeros(w * factor, dtype=int)
    fr = (src_r - r0)[:, None]
    fc = (src_c - c0)[None, :]
    v = grid.values
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = v[np.ix_(r0, c0)] * (1 - fc) + v[np.ix_(r0, c1)] * fc
    bot = v[np.ix_(r1, c0)] * (1 - fc) + v[np.ix_(r1, c1)] * fc
    return Grid2D(top * (1 - fr) + bot * fr, kind=grid.kind)


def block_average(grid: Grid2D, block: int) -> Grid2D:
    """Mean over block x block cells; output is (H/block) x (W/block).

    Dimensions that do not divide evenly are padded by edge replication
    first, recorded in meta["edge_padded"].
    """
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    if block == 1:
        return Grid2D(grid.values.copy(), kind=grid.kind)
    v = grid.values
    pad_r = (-v.shape[0]) % block
    pad_c = (-v.shape[1]) % block
    padded = bool(pad_r or pad_c)
    if padded:
        v = np.pad(v, ((0, pad_r), (0, pad_c)), mode="edge")
    h, w = v.shape
    means = v.reshape(h // block, block, w // block, block).mean(axis=(1, 3))
    out = Grid2D(means, kind=grid.kind)
    if padded:
        out.meta["edge_padded"] = True
    return out


def crps_empirical(ensemble, obs: float, estimator: str = "nrg") -> float:
    """Empirical CRPS of an m-member ensemble against one observation.

    nrg:  mean|x_i - y| - (1/(2 m^2)) sum_ij |x_i - x_j|
    fair: same with the spread term scaled by m/(m-1), needing m >= 2.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r} (use one of {ESTIMATORS})")
    x = np.asarray(ensemble, dtype=np.float64).ravel()
    m = x.size
    if m < 1:
        raise ValueError("ensemble must have at least one member")
    if estimator == "fair" and m < 2:
        raise FairNeedsTwo("fair CRPS needs at least two ensemble members")
    score = float(np.abs(x - obs).mean())
    if m > 1:
        spread = float(np.abs(x[:, None] - x[None, :]).sum())
        denom = 2.0 * m * (m - 1) if estimator == "fair" else 2.0 * m * m
        score -= spread / denom
    return score


def evaluate_run(pred_cum: GridStack, obs_cum: GridStack, cfg: PipelineConfig,
                 estimator: str = "nrg", block: int | None = None) -> EvalReport:
    """Score cumulative-rain predictions against observations.

    Stacks carry one cumulative grid per sample in the frame axis. Both
    sides are block-averaged at cfg.block_size, each block scored with the
    prediction as a 1-member ensemble, and each sample reported as its mean
    over blocks.
    """
    if pred_cum.n_frames != obs_cum.n_frames:
        raise Misaligned(
            f"{pred_cum.n_frames} predictions vs {obs_cum.n_frames} observations"
        )
    if pred_cum.values.shape != obs_cum.values.shape:
        raise Misaligned(
            f"prediction grids {pred_cum.values.shape[2:]} vs "
            f"observation grids {obs_cum.values.shape[2:]}"
        )
    block = cfg.block_size if block is None else block
    if estimator == "fair":
        # deterministic predictions are 1-member ensembles
        raise FairNeedsTwo("fair CRPS needs >= 2 members; deterministic runs provide 1")
    scores = []
    for s in range(pred_cum.n_frames):
        pred_blocks = block_average(Grid2D(pred_cum.values[s, 0]), block).values
        obs_blocks = block_average(Grid2D(obs_cum.values[s, 0]), block).values
        scores.append(float(np.abs(pred_blocks - obs_blocks).mean()))
    mean = float(np.mean(scores)) if scores else 0.0
    return EvalReport(mean_crps=mean, per_sample_crps=scores, block_size=block,
                      n_samples=len(scores), estimator=estimator)
