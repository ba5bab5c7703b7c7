"""Pinhole cameras, unprojection, per-patch 4D coordinates, and optical flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Array


class GeometryError(ValueError):
    """Invalid camera or frame input."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics k, world-to-camera rotation r, translation t.

    A world point p maps to camera coordinates ``r @ p + t``; its depth is
    the camera-frame z, and the pixel is ``k @ (x, y, z) / z``.
    """

    k: Array
    r: Array
    t: Array

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)
        if k.shape != (3, 3) or r.shape != (3, 3):
            raise GeometryError(f"k and r must be 3x3, got {k.shape} and {r.shape}")
        if abs(np.linalg.det(r) - 1.0) > 1e-9 or np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise GeometryError("r must be orthonormal with determinant +1")
        if np.abs(np.tril(k, -1)).max() > 0 or np.any(np.diag(k) <= 0):
            raise GeometryError("k must be upper-triangular with positive diagonal")
        if abs(np.linalg.det(k)) < 1e-12:
            raise GeometryError("k is not invertible")
        object.__setattr__(self, "_k_inv", np.linalg.inv(k))

    @property
    def position(self) -> Array:
        """Camera center in world coordinates."""
        return -self.r.T @ self.t

    def to_dict(self) -> dict:
        return {"k": self.k.tolist(), "r": self.r.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["k"]), np.array(d["r"]), np.array(d["t"]))


def project(camera: Camera, point: Array):
    """World point -> (pixel (u, v), depth). Depth is camera-frame z."""
    cam = camera.r @ np.asarray(point, dtype=np.float64).reshape(3) + camera.t
    depth = cam[2]
    if depth <= 0:
        return np.array([np.nan, np.nan]), depth
    homo = camera.k @ cam
    return homo[:2] / homo[2], depth


def project_points(camera: Camera, points: Array):
    """Vectorized projection: (n, 3) world points -> ((n, 2) pixels, (n,) depth)."""
    cam = points @ camera.r.T + camera.t
    depth = cam[:, 2]
    homo = cam @ camera.k.T
    with np.errstate(divide="ignore", invalid="ignore"):
        px = homo[:, :2] / homo[:, 2:3]
    return px, depth


def unproject(camera: Camera, pixel, depth: float) -> Array:
    """Pixel plus depth -> world point via inverse intrinsics and pose.

    Returns ``r^-1 (depth * k^-1 (u, v, 1) - t)``; projecting the result
    recovers the pixel and depth to within 1e-9.
    """
    if depth <= 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    ray = camera._k_inv @ np.array([u, v, 1.0])
    return camera.r.T @ (depth * ray - camera.t)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned scene bounds used to normalize coordinates to [-1, 1]^3."""

    lo: Array
    hi: Array

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if np.any(hi <= lo):
            raise GeometryError("aabb is empty")

    def normalize(self, points: Array) -> Array:
        return 2.0 * (points - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, points: Array) -> Array:
        return (points + 1.0) * (self.hi - self.lo) / 2.0 + self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Aabb":
        return cls(np.array(d["lo"]), np.array(d["hi"]))


@dataclass
class CameraFrame:
    """One view at one timestamp: pixels, depth map, pose, and time tags.

    Depth is camera-frame z, positive where rendered and +inf where nothing
    was splatted. ``time_value`` is the normalized time in [0, 1].
    """

    camera: Camera
    depth: Array
    pixels: Array
    view_id: int
    time_index: int
    time_value: float

    def __post_init__(self):
        if self.depth.shape != self.pixels.shape[:2]:
            raise GeometryError("depth and pixels disagree on image size")
        rendered = np.isfinite(self.depth)
        if rendered.any() and self.depth[rendered].min() <= 0:
            raise GeometryError("rendered depth must be positive")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass(frozen=True)
class PatchLayout:
    """Token bookkeeping: (view, time, row, col) order, frame slices."""

    n_views: int
    n_times: int
    n_rows: int
    n_cols: int

    @property
    def tokens_per_frame(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def n_tokens(self) -> int:
        return self.n_views * self.n_times * self.tokens_per_frame

    def frame_slice(self, view: int, time: int) -> slice:
        start = (view * self.n_times + time) * self.tokens_per_frame
        return slice(start, start + self.tokens_per_frame)

    def frame_slices(self) -> list[tuple[int, int, slice]]:
        return [
            (v, t, self.frame_slice(v, t))
            for v in range(self.n_views)
            for t in range(self.n_times)
        ]

    def token_index(self, view: int, time: int, row: int, col: int) -> int:
        return self.frame_slice(view, time).start + row * self.n_cols + col


@dataclass
class Coord4DGrid:
    """Per-patch normalized (x, y, z, t) plus flow magnitude and layout.

    Patches with no rendered depth carry a sentinel coordinate (origin at
    their own time) and are flagged in ``empty_mask``.
    """

    coords: Array
    flow_mag: Array
    layout: PatchLayout
    empty_mask: Array = field(default=None)

    def __post_init__(self):
        if self.empty_mask is None:
            self.empty_mask = np.zeros(self.layout.n_tokens, dtype=bool)


def sorted_frames(frames) -> list[CameraFrame]:
    return sorted(frames, key=lambda f: (f.view_id, f.time_index))


def infer_layout(frames, patch_size: int) -> PatchLayout:
    """Validate a complete (view, time) grid of frames and derive the layout."""
    fs = sorted_frames(frames)
    views = sorted({f.view_id for f in fs})
    times = sorted({f.time_index for f in fs})
    if len(fs) != len(views) * len(times):
        raise GeometryError("frames do not form a complete (view, time) grid")
    h, w = fs[0].height, fs[0].width
    for f in fs:
        if (f.height, f.width) != (h, w):
            raise GeometryError("frames must share the same image size")
    if h % patch_size or w % patch_size:
        raise GeometryError(f"image {h}x{w} not divisible by patch size {patch_size}")
    return PatchLayout(len(views), len(times), h // patch_size, w // patch_size)


def build_coord_grid(frames, patch_size: int, scene_bounds: Aabb,
                     flow_fn=None) -> Coord4DGrid:
    """Assemble one 4-vector (x, y, z, t) per patch token.

    The patch depth is the median of its rendered pixel depths; the patch
    center pixel is unprojected at that depth and normalized to [-1, 1]^3
    through the scene bounds; t is the frame's normalized time value.
    ``flow_fn(frame_a, frame_b) -> (rows, cols)`` supplies per-patch flow
    magnitudes for consecutive same-view frames (the last frame reuses its
    backward pair); omitted, flow is zero.
    """
    fs = sorted_frames(frames)
    layout = infer_layout(fs, patch_size)
    p = patch_size
    coords = np.zeros((layout.n_tokens, 4))
    flow = np.zeros(layout.n_tokens)
    empty = np.zeros(layout.n_tokens, dtype=bool)

    by_key = {(f.view_id, f.time_index): f for f in fs}
    views = sorted({f.view_id for f in fs})
    times = sorted({f.time_index for f in fs})

    for vi, view in enumerate(views):
        for ti, time in enumerate(times):
            frame = by_key[(view, time)]
            sl = layout.frame_slice(vi, ti)
            block = np.full((layout.tokens_per_frame, 4), 0.0)
            block[:, 3] = frame.time_value
            for row in range(layout.n_rows):
                for col in range(layout.n_cols):
                    patch_depth = frame.depth[row * p:(row + 1) * p, col * p:(col + 1) * p]
                    rendered = np.isfinite(patch_depth)
                    tok = row * layout.n_cols + col
                    if not rendered.any():
                        empty[sl.start + tok] = True
                        continue
                    depth = float(np.median(patch_depth[rendered]))
                    center = (col * p + (p - 1) / 2.0, row * p + (p - 1) / 2.0)
                    world = unproject(frame.camera, center, depth)
                    block[tok, :3] = scene_bounds.normalize(world)
            coords[sl] = block
            if flow_fn is not None and len(times) > 1:
                if ti < len(times) - 1:
                    pair = flow_fn(frame, by_key[(view, times[ti + 1])])
                else:
                    pair = flow_fn(frame, by_key[(view, times[ti - 1])])
                flow[sl] = np.asarray(pair, dtype=np.float64).ravel()
    return Coord4DGrid(coords=coords, flow_mag=flow, layout=layout, empty_mask=empty)


def _check_flow_pair(frame_a: CameraFrame, frame_b: CameraFrame) -> None:
    if frame_a.view_id != frame_b.view_id:
        raise GeometryError("flow needs frames from the same view")
    if abs(frame_a.time_index - frame_b.time_index) != 1:
        raise GeometryError("flow needs consecutive frames")


def analytic_flow(truth, frame_a: CameraFrame, frame_b: CameraFrame,
                  patch_size: int) -> Array:
    """Exact per-patch flow magnitude from known point trajectories.

    For every pixel of ``frame_a`` that rendered a point, the point's world
    position is re-evaluated at both frame times (via the scene truth) and
    projected through the shared camera; the patch value is the mean
    displacement magnitude over its rendered pixels.
    """
    _check_flow_pair(frame_a, frame_b)
    pos_a, valid = truth.visible_point_positions(
        frame_a.view_id, frame_a.time_index, at_time=frame_a.time_index)
    pos_b, _ = truth.visible_point_positions(
        frame_a.view_id, frame_a.time_index, at_time=frame_b.time_index)
    h, w = frame_a.depth.shape
    mags = np.zeros((h, w))
    if valid.any():
        pa = pos_a[valid]
        pb = pos_b[valid]
        px_a, _ = project_points(frame_a.camera, pa)
        px_b, _ = project_points(frame_a.camera, pb)
        disp = np.linalg.norm(px_b - px_a, axis=1)
        mags[valid] = disp
    p = patch_size
    rows, cols = h // p, w // p
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            m = valid[r * p:(r + 1) * p, c * p:(c + 1) * p]
            if m.any():
                out[r, c] = mags[r * p:(r + 1) * p, c * p:(c + 1) * p][m].mean()
    return out


def block_matching_flow(frame_a: CameraFrame, frame_b: CameraFrame,
                        window: int, search: int) -> Array:
    """Estimated per-patch flow magnitude by exhaustive block matching.

    For each window-sized block of ``frame_a`` the displacement minimizing
    the sum of squared differences against ``frame_b`` wins; ties break by
    smaller displacement magnitude, then lexicographic (dy, dx). Candidate
    windows must lie fully inside the image. Untextured blocks return 0.
    """
    _check_flow_pair(frame_a, frame_b)
    h, w = frame_a.depth.shape
    p = window
    rows, cols = h // p, w // p
    a = frame_a.pixels
    b = frame_b.pixels
    candidates = sorted(
        ((dy, dx) for dy in range(-search, search + 1) for dx in range(-search, search + 1)),
        key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]),
    )
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            y0, x0 = r * p, c * p
            block = a[y0:y0 + p, x0:x0 + p]
            best = None
            best_d = (0, 0)
            for dy, dx in candidates:
                yy, xx = y0 + dy, x0 + dx
                if yy < 0 or xx < 0 or yy + p > h or xx + p > w:
                    continue
                ssd = float(((block - b[yy:yy + p, xx:xx + p]) ** 2).sum())
                if best is None or ssd < best:
                    best = ssd
                    best_d = (dy, dx)
            out[r, c] = np.hypot(*best_d)
    return out
