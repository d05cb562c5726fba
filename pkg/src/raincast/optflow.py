"""Extrapolation stage: blob features, pyramidal Lucas-Kanade sparse flow,
RBF densification, and semi-Lagrangian advection.

Coordinates and motion follow image convention: a feature sits at (x, y) =
(column, row), sub-pixel; a motion vector (u, v) is measured in pixels per
frame with u along columns and v along rows. Advection is a backward
semi-Lagrangian step, out(x) = in(x - v(x)) with bilinear sampling.

The motion estimate for a sequence is built once from the inputs and held
fixed: features are detected on the last input frame, tracked over every
consecutive pair, averaged per feature, densified by a Gaussian RBF, and the
resulting field is reused for all forecast steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter

from .errors import EmptySparse, InconsistentFeatures, SingularSystem, SizeMismatch
from .grids import Grid2D, GridStack, Kind, PipelineConfig


@dataclass(frozen=True)
class FlowParams:
    """Knobs of the flow pipeline.

    min_eigen applies to the structure tensor normalised by window area;
    blob_threshold is relative to the frame's dynamic range; the RBF kernel
    width is the median pairwise distance between feature sites.
    """

    pyramid_levels: int = 3
    lk_window: int = 15
    min_eigen: float = 1e-3
    max_iters: int = 20
    epsilon: float = 0.01
    dog_scales: tuple[float, ...] = (2.0, 4.0, 8.0)
    blob_threshold: float = 0.05
    rbf_epsilon_mode: str = "median"
    rbf_ridge: float = 1e-8

    def __post_init__(self):
        if self.lk_window < 3 or self.lk_window % 2 == 0:
            raise ValueError("lk_window must be odd and >= 3")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.min_eigen <= 0 or self.epsilon <= 0 or self.blob_threshold <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class Feature:
    """A detected blob: sub-pixel position, scale, and detector response."""

    x: float
    y: float
    scale: float
    response: float


@dataclass
class SparseFlow:
    """Motion vectors at feature sites, before densification.

    ``entries`` is an (n, 4) array of (x, y, u, v). ``indices`` maps each
    surviving row back into the detection list of ``n_features`` features,
    so flows from different frame pairs can be matched feature-by-feature.
    """

    entries: np.ndarray
    rejected_count: int = 0
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    n_features: int = 0

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64).reshape(-1, 4)
        self.indices = np.asarray(self.indices, dtype=int)
        if self.indices.size == 0 and len(self.entries):
            self.indices = np.arange(len(self.entries))
        if self.n_features == 0:
            self.n_features = len(self.entries) + self.rejected_count


@dataclass
class FlowField:
    """Dense per-pixel motion, u along columns, v along rows (pixels/frame)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise SizeMismatch(f"u {self.u.shape} and v {self.v.shape} must be equal 2-D shapes")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def zero(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))


def flow_to_stack(flow: FlowField) -> GridStack:
    """Persist a flow field as a 2-channel stack (channel 0 = u, 1 = v)."""
    return GridStack(np.stack([flow.u, flow.v])[None], kind=Kind.FLOW)


def flow_from_stack(stack: GridStack) -> FlowField:
    if stack.kind is not Kind.FLOW or stack.n_channels != 2:
        raise SizeMismatch("expected a 2-channel flow stack")
    return FlowField(stack.values[0, 0], stack.values[0, 1])


# --- blob detection ---

def detect_blobs(grid: Grid2D, params: FlowParams) -> list[Feature]:
    """Difference-of-Gaussians blobs on the inverted image.

    Clouds are radiance minima, so the frame is inverted (max - value) to
    make them positive blobs. The response at scale s is
    G(s) - G(sqrt(2)*s); candidates are 3-D local maxima over (scale, y, x)
    above blob_threshold * dynamic range, refined to sub-pixel by a
    quadratic fit, then greedily non-max-suppressed within one scale radius.
    """
    values = grid.values
    vmax, vmin = values.max(), values.min()
    dyn = vmax - vmin
    if dyn == 0.0:
        return []
    inv = vmax - values

    scales = params.dog_scales
    responses = np.stack([
        gaussian_filter(inv, s, mode="mirror") - gaussian_filter(inv, np.sqrt(2.0) * s, mode="mirror")
        for s in scales
    ])
    threshold = params.blob_threshold * dyn
    local_max = responses == maximum_filter(responses, size=(3, 3, 3), mode="mirror")
    si, yi, xi = np.nonzero(local_max & (responses > threshold))

    candidates = []
    h, w = values.shape
    for s, y, x in zip(si, yi, xi):
        r = responses[s]
        # quadratic sub-pixel refinement along each axis, clamped to +-0.5
        dx = dy = 0.0
        if 0 < x < w - 1:
            denom = r[y, x - 1] - 2.0 * r[y, x] + r[y, x + 1]
            if denom != 0.0:
                dx = float(np.clip(0.5 * (r[y, x - 1] - r[y, x + 1]) / denom, -0.5, 0.5))
        if 0 < y < h - 1:
            denom = r[y - 1, x] - 2.0 * r[y, x] + r[y + 1, x]
            if denom != 0.0:
                dy = float(np.clip(0.5 * (r[y - 1, x] - r[y + 1, x]) / denom, -0.5, 0.5))
        candidates.append(Feature(x=float(x) + dx, y=float(y) + dy,
                                  scale=float(scales[s]), response=float(r[y, x])))

    candidates.sort(key=lambda f: (-f.response, f.y, f.x))
    kept: list[Feature] = []
    for cand in candidates:
        if all((cand.x - k.x) ** 2 + (cand.y - k.y) ** 2 > max(k.scale, cand.scale) ** 2
               for k in kept):
            kept.append(cand)
    return kept


# --- pyramidal Lucas-Kanade ---

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _downsample(img: np.ndarray) -> np.ndarray:
    """Binomial blur then decimate by 2 (anti-aliased pyramid step)."""
    from scipy.ndimage import correlate1d

    blurred = correlate1d(img, _BINOMIAL5, axis=0, mode="mirror")
    blurred = correlate1d(blurred, _BINOMIAL5, axis=1, mode="mirror")
    return blurred[::2, ::2]


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [img]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 8:
            break
        pyr.append(_downsample(pyr[-1]))
    return pyr


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, bool]:
    """Sample img at float (x, y) positions; returns (values, all-in-bounds)."""
    h, w = img.shape
    inside = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    v00 = img[y0, x0]
    v01 = img[y0, x0 + 1]
    v10 = img[y0 + 1, x0]
    v11 = img[y0 + 1, x0 + 1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy, bool(inside.all())


def lk_flow_at(features: list[Feature], frame_a: Grid2D, frame_b: Grid2D,
               params: FlowParams) -> SparseFlow:
    """Iterative pyramidal Lucas-Kanade at the given feature sites.

    At each pyramid level (coarse to fine) the 2x2 normal equations
    G d = b are solved over the lk_window patch, with G built from the
    first frame's spatial gradients and b = -sum(grad * dI) recomputed per
    warp iteration, until the update drops below epsilon or max_iters is
    hit. Features are rejected (and counted) when the area-normalised G is
    ill-conditioned at the finest level or the window leaves the frame.
    """
    if frame_a.values.shape != frame_b.values.shape:
        raise SizeMismatch(f"frame shapes differ: {frame_a.values.shape} vs {frame_b.values.shape}")
    n = len(features)
    if n == 0:
        return SparseFlow(np.empty((0, 4)), 0, np.empty(0, dtype=int), 0)

    pyr_a = _pyramid(frame_a.values, params.pyramid_levels)
    pyr_b = _pyramid(frame_b.values, params.pyramid_levels)
    grads = [np.gradient(a) for a in pyr_a]  # (d/dy, d/dx) per level

    half = (params.lk_window - 1) // 2
    offs = np.arange(-half, half + 1, dtype=np.float64)
    off_x, off_y = np.meshgrid(offs, offs)
    area = float(params.lk_window ** 2)

    entries, indices = [], []
    rejected = 0
    for fi, feat in enumerate(features):
        d = np.zeros(2)  # (u, v) accumulated from coarse levels
        ok = True
        for level in range(len(pyr_a) - 1, -1, -1):
            a = pyr_a[level]
            gy, gx = grads[level]
            px = feat.x / (2.0 ** level)
            py = feat.y / (2.0 ** level)
            xs = px + off_x
            ys = py + off_y
            ia, in_a = _bilinear(a, xs, ys)
            wgx, _ = _bilinear(gx, xs, ys)
            wgy, _ = _bilinear(gy, xs, ys)
            gxx = (wgx * wgx).sum()
            gxy = (wgx * wgy).sum()
            gyy = (wgy * wgy).sum()
            min_eig = 0.5 * (gxx + gyy - np.hypot(gxx - gyy, 2.0 * gxy)) / area
            conditioned = in_a and min_eig >= params.min_eigen
            if not conditioned:
                if level == 0:
                    ok = False
                d *= 2.0 if level > 0 else 1.0
                continue

            det = gxx * gyy - gxy * gxy
            inv_g = np.array([[gyy, -gxy], [-gxy, gxx]]) / det
            nu = np.zeros(2)
            in_b = True
            for _ in range(params.max_iters):
                ib, in_b = _bilinear(pyr_b[level], xs + d[0] + nu[0], ys + d[1] + nu[1])
                if not in_b:
                    break
                it = ib - ia
                b_vec = -np.array([(wgx * it).sum(), (wgy * it).sum()])
                delta = inv_g @ b_vec
                nu += delta
                if np.hypot(*delta) < params.epsilon:
                    break
            if not in_b:
                if level == 0:
                    ok = False
                d *= 2.0 if level > 0 else 1.0
                continue
            d = d + nu
            if level > 0:
                d *= 2.0

        if ok and np.all(np.isfinite(d)):
            entries.append((feat.x, feat.y, d[0], d[1]))
            indices.append(fi)
        else:
            rejected += 1

    return SparseFlow(np.array(entries, dtype=np.float64).reshape(-1, 4),
                      rejected, np.array(indices, dtype=int), n)


def mean_sparse_flow(pairwise: list[SparseFlow]) -> SparseFlow:
    """Average each feature's vector over the frame pairs.

    All flows must come from one detection pass (same feature universe); a
    feature rejected in any pair is excluded from the mean.
    """
    if not pairwise:
        raise InconsistentFeatures("no pairwise flows to average")
    n = pairwise[0].n_features
    if any(sf.n_features != n for sf in pairwise):
        raise InconsistentFeatures(
            f"feature universes differ: {[sf.n_features for sf in pairwise]}"
        )
    lookups = [{int(i): r for r, i in enumerate(sf.indices)} for sf in pairwise]
    keep = sorted(set(lookups[0]).intersection(*lookups[1:]))
    if not keep:
        return SparseFlow(np.empty((0, 4)), n, np.empty(0, dtype=int), n)

    entries = np.zeros((len(keep), 4))
    entries[:, :2] = pairwise[0].entries[[lookups[0][i] for i in keep], :2]
    for sf, lut in zip(pairwise, lookups):
        rows = [lut[i] for i in keep]
        if not np.array_equal(sf.entries[rows, :2], entries[:, :2]):
            raise InconsistentFeatures("feature positions differ between pairwise flows")
        entries[:, 2:] += sf.entries[rows, 2:]
    entries[:, 2:] /= len(pairwise)
    return SparseFlow(entries, n - len(keep), np.array(keep, dtype=int), n)


# --- RBF densification ---

def rbf_interpolate(sparse: SparseFlow, height: int, width: int,
                    params: FlowParams) -> FlowField:
    """Densify sparse vectors with a Gaussian RBF plus a constant term.

    Each component solves  [K + ridge*I, 1; 1^T, 0] [w; c] = [f; 0]  with
    K_ij = exp(-(|p_i - p_j| / eps)^2) and eps the median pairwise site
    distance, then evaluates sum(w_i K(x, p_i)) + c at every pixel centre.
    The side condition sum(w) = 0 makes a lone feature (or unanimous
    vectors) yield an exactly constant field.
    """
    pts = sparse.entries[:, :2]
    n = len(pts)
    if n == 0:
        raise EmptySparse("cannot densify an empty sparse flow")

    if n == 1:
        eps = 1.0
    else:
        diff = pts[:, None, :] - pts[None, :, :]
        dists = np.sqrt((diff ** 2).sum(-1))
        eps = float(np.median(dists[np.triu_indices(n, k=1)]))
        if eps <= 0.0:
            eps = 1.0
    diff = pts[:, None, :] - pts[None, :, :]
    k = np.exp(-((diff ** 2).sum(-1)) / eps ** 2)
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = k + params.rbf_ridge * np.eye(n)
    a[:n, n] = 1.0
    a[n, :n] = 1.0
    rhs = np.zeros((n + 1, 2))
    rhs[:n] = sparse.entries[:, 2:]
    try:
        sol = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"RBF system singular for {n} sites: {exc}") from exc
    weights, const = sol[:n], sol[n]

    u = np.empty((height, width))
    v = np.empty((height, width))
    cols = np.arange(width, dtype=np.float64)
    chunk = max(1, (1 << 21) // max(n, 1))  # bound the distance matrix to ~16 MB
    for r0 in range(0, height, chunk):
        r1 = min(r0 + chunk, height)
        rows = np.arange(r0, r1, dtype=np.float64)
        dx = cols[None, :, None] - pts[None, None, :, 0]
        dy = rows[:, None, None] - pts[None, None, :, 1]
        phi = np.exp(-(dx * dx + dy * dy) / eps ** 2)
        u[r0:r1] = phi @ weights[:, 0] + const[0]
        v[r0:r1] = phi @ weights[:, 1] + const[1]
    return FlowField(u, v)


# --- advection ---

def advect(grid: Grid2D, flow: FlowField, fill: float) -> Grid2D:
    """Backward semi-Lagrangian step: out(x) = in(x - v(x)), bilinear.

    Departure points outside the pixel-centre hull take the fill value
    (conventionally the frame's background radiance). Bilinear sampling is
    convex, so no new extrema beyond input + fill can appear.
    """
    if (grid.height, grid.width) != (flow.height, flow.width):
        raise SizeMismatch(
            f"grid {grid.height}x{grid.width} vs flow {flow.height}x{flow.width}"
        )
    h, w = grid.height, grid.width
    cols, rows = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    xs = cols - flow.u
    ys = rows - flow.v
    inside = (xs >= 0.0) & (xs <= w - 1.0) & (ys >= 0.0) & (ys <= h - 1.0)
    sampled, _ = _bilinear(grid.values, xs, ys)
    return Grid2D(np.where(inside, sampled, fill), kind=grid.kind)


def extrapolate(inputs: GridStack, cfg: PipelineConfig, params: FlowParams,
                steps: int | None = None) -> GridStack:
    """Forecast ``steps`` future frames from the input window.

    Features come from the last input frame; Lucas-Kanade flow is computed
    for every consecutive input pair at those sites, averaged, and densified
    once. The resulting stationary field advects the last frame repeatedly.
    With no usable features the forecast falls back to persistence and the
    output carries meta["persistence_fallback"] = True.
    """
    if inputs.n_frames < 2:
        raise SizeMismatch(f"need at least 2 input frames, got {inputs.n_frames}")
    steps = cfg.horizon if steps is None else steps
    last = inputs.frame(inputs.n_frames - 1)

    flow = None
    fallback = False
    features = detect_blobs(last, params)
    if features:
        pairwise = [
            lk_flow_at(features, inputs.frame(t), inputs.frame(t + 1), params)
            for t in range(inputs.n_frames - 1)
        ]
        mean_flow = mean_sparse_flow(pairwise)
        if len(mean_flow.entries):
            flow = rbf_interpolate(mean_flow, inputs.height, inputs.width, params)
    if flow is None:
        fallback = True
        flow = FlowField.zero(inputs.height, inputs.width)

    out = np.empty((steps, 1, inputs.height, inputs.width))
    frame = last
    for k in range(steps):
        frame = advect(frame, flow, fill=frame.values.max())
        out[k, 0] = frame.values
    meta = {"persistence_fallback": fallback, "flow": flow}
    return GridStack(out, kind=inputs.kind, t0=inputs.time_of(inputs.n_frames - 1) + inputs.dt,
                     dt=inputs.dt, meta=meta)
