"""Deterministic synthetic 4D scenes: point splatting with exact ground truth.

A scene is a textured static floor plus a handful of rigid point-cluster
objects following analytic trajectories, viewed by a ring of fixed cameras.
Z-buffer splatting yields pixels, depth, per-pixel point ownership, exact
per-patch flow, and dynamic/static/empty patch labels -- everything the
verification harness scores against.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import Aabb, Camera, CameraFrame, analytic_flow, project_points
from .numerics import Array, Rng

logger = logging.getLogger(__name__)

TRAJECTORY_KINDS = ("linear", "circular", "sinusoidal")

PALETTE = {
    "red": (0.78, 0.22, 0.18),
    "blue": (0.20, 0.35, 0.80),
    "yellow": (0.82, 0.76, 0.20),
    "purple": (0.60, 0.25, 0.70),
    "cyan": (0.18, 0.70, 0.74),
    "orange": (0.85, 0.52, 0.15),
}

TEMPLATES = {
    "caption": (
        "describe the object at {loc} at {time}.",
        "what can be seen at {loc} at {time}?",
    ),
    "qa": (
        "where is the {color} object at {time}?",
        "at {time} where is the {color} object?",
    ),
    "grounding": (
        "when is an object at {loc}?",
        "at what time is an object located at {loc}?",
    ),
}

CAPTION_ANSWER = "a {color} object on a {kind} path at {loc} at {time}"


@dataclass
class ObjectSpec:
    """A rigid point cluster with an analytic trajectory."""

    n_points: int = 60
    extent: float = 0.4
    color: str = "red"
    kind: str = "linear"
    params: dict = field(default_factory=dict)
    start_frame: int = 0
    end_frame: int | None = None


@dataclass
class SceneSpec:
    """Full recipe for one deterministic scene."""

    seed: int = 0
    n_views: int = 3
    n_frames: int = 6
    height: int = 64
    width: int = 64
    channels: int = 3
    patch_size: int = 8
    ring_radius: float = 4.2
    ring_height: float = 2.6
    look_at: tuple = (0.0, 0.0, -0.2)
    focal_scale: float = 0.9
    floor_z: float = -1.0
    floor_extent: float = 2.4
    floor_grid_n: int = 96
    floor_color_noise: float = 0.05
    pixel_noise: float = 0.02
    splat_px: int = 3
    aabb_lo: tuple = (-2.4, -2.4, -1.2)
    aabb_hi: tuple = (2.4, 2.4, 1.2)
    objects: list = field(default_factory=list)

    @property
    def aabb(self) -> Aabb:
        return Aabb(np.array(self.aabb_lo), np.array(self.aabb_hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["objects"] = [ObjectSpec(**o) for o in d.get("objects", [])]
        d["look_at"] = tuple(d.get("look_at", (0.0, 0.0, -0.2)))
        d["aabb_lo"] = tuple(d["aabb_lo"])
        d["aabb_hi"] = tuple(d["aabb_hi"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls.from_dict(json.loads(text))


def object_position(obj: ObjectSpec, frame: int, n_frames: int) -> Array:
    """Exact centroid of an object at an integer frame index."""
    end = obj.end_frame if obj.end_frame is not None else n_frames - 1
    tt = float(min(max(frame, obj.start_frame), end) - obj.start_frame)
    p = obj.params
    if obj.kind == "linear":
        return np.asarray(p["start"], dtype=np.float64) + tt * np.asarray(p["velocity"])
    if obj.kind == "circular":
        ang = p["omega"] * tt + p.get("phase", 0.0)
        offs = p["radius"] * np.array([math.cos(ang), math.sin(ang), 0.0])
        return np.asarray(p["center"], dtype=np.float64) + offs
    if obj.kind == "sinusoidal":
        ang = p["omega"] * tt + p.get("phase", 0.0)
        axis = np.asarray(p["axis"], dtype=np.float64)
        return np.asarray(p["start"], dtype=np.float64) + p["amplitude"] * math.sin(ang) * axis
    raise ValueError(f"unknown trajectory kind {obj.kind!r}")


def ring_cameras(spec: SceneSpec) -> list[Camera]:
    """Fixed cameras on a ring, all aimed at ``spec.look_at``."""
    target = np.asarray(spec.look_at, dtype=np.float64)
    f = spec.focal_scale * spec.width
    k = np.array([
        [f, 0.0, (spec.width - 1) / 2.0],
        [0.0, f, (spec.height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    cams = []
    for v in range(spec.n_views):
        ang = 2.0 * math.pi * v / spec.n_views
        pos = np.array([
            spec.ring_radius * math.cos(ang),
            spec.ring_radius * math.sin(ang),
            spec.ring_height,
        ])
        forward = target - pos
        forward = forward / np.linalg.norm(forward)
        world_up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, world_up)
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        r = np.stack([right, down, forward])
        t = -r @ pos
        cams.append(Camera(k=k, r=r, t=t))
    return cams


@dataclass
class SceneTruth:
    """Exact per-patch labels, object trajectories, flow, and visibility."""

    labels: Array                 # (V, T, rows, cols) 0 static / 1 dynamic / 2 empty
    flow: Array                   # (V, T, rows, cols) analytic per-patch magnitude
    centroids: Array              # (n_obj, T, 3) world
    moving: Array                 # (n_obj, T) bool
    owner: Array                  # (V, T, H, W) int32: -2 none, -1 floor, k object
    point_index: Array            # (V, T, H, W) int32 index into the owner's point set
    background_points: Array      # (n_bg, 3)
    object_offsets: list          # per object (n_k, 3) offsets from its centroid
    object_colors: list           # color names
    object_kinds: list            # trajectory kinds
    time_values: Array            # (T,)
    aabb: Aabb
    patch_size: int
    scene_id: str
    warnings: list = field(default_factory=list)

    LABEL_STATIC = 0
    LABEL_DYNAMIC = 1
    LABEL_EMPTY = 2

    @property
    def n_objects(self) -> int:
        return len(self.object_offsets)

    def visible_point_positions(self, view: int, time: int, at_time: int):
        """World positions of each pixel's winning point, evaluated at ``at_time``.

        Returns ``(positions (H, W, 3), valid (H, W))``. Floor points are
        static; object points ride their cluster's centroid.
        """
        owner = self.owner[view, time]
        pidx = self.point_index[view, time]
        valid = owner > -2
        pos = np.zeros(owner.shape + (3,))
        bg = owner == -1
        if bg.any():
            pos[bg] = self.background_points[pidx[bg]]
        for k in range(self.n_objects):
            mk = owner == k
            if mk.any():
                pos[mk] = self.object_offsets[k][pidx[mk]] + self.centroids[k, at_time]
        return pos, valid

    def normalized_centroid(self, obj: int, frame: int) -> Array:
        return self.aabb.normalize(self.centroids[obj, frame])

    def token_labels(self) -> Array:
        """Labels flattened in (view, time, row, col) token order."""
        return self.labels.reshape(-1)


def _splat_frame(points: Array, colors: Array, owners: Array, local_idx: Array,
                 camera: Camera, spec: SceneSpec):
    """Z-buffer point splatting of one frame. Returns pixels, depth, owner, index."""
    h, w, c = spec.height, spec.width, spec.channels
    px, depth = project_points(camera, points)
    near = 0.05
    ok = (depth > near) & np.isfinite(px).all(axis=1)
    px, depth = px[ok], depth[ok]
    colors_ok, owners_ok, local_ok = colors[ok], owners[ok], local_idx[ok]
    u = np.rint(px[:, 0]).astype(np.int64)
    v = np.rint(px[:, 1]).astype(np.int64)

    half = spec.splat_px // 2
    offsets = [(dv, du) for dv in range(-half, half + 1) for du in range(-half, half + 1)]
    flat_all, depth_all, order_all, src_all = [], [], [], []
    for oi, (dv, du) in enumerate(offsets):
        uu, vv = u + du, v + dv
        inb = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
        idx = np.nonzero(inb)[0]
        flat_all.append(vv[idx] * w + uu[idx])
        depth_all.append(depth[idx])
        order_all.append(idx * len(offsets) + oi)
        src_all.append(idx)
    flat = np.concatenate(flat_all)
    zval = np.concatenate(depth_all)
    order = np.concatenate(order_all)
    src = np.concatenate(src_all)

    pixels = np.zeros((h, w, c))
    depth_map = np.full((h, w), np.inf)
    owner_map = np.full((h, w), -2, dtype=np.int32)
    index_map = np.zeros((h, w), dtype=np.int32)
    if len(flat):
        sort = np.lexsort((order, zval, flat))
        flat_s, src_s = flat[sort], src[sort]
        first = np.ones(len(flat_s), dtype=bool)
        first[1:] = flat_s[1:] != flat_s[:-1]
        win_flat = flat_s[first]
        win_src = src_s[first]
        rows, cols = win_flat // w, win_flat % w
        pixels[rows, cols] = colors_ok[win_src]
        depth_map[rows, cols] = depth[win_src]
        owner_map[rows, cols] = owners_ok[win_src]
        index_map[rows, cols] = local_ok[win_src]
    return pixels, depth_map, owner_map, index_map


def generate(spec: SceneSpec):
    """Render a scene. Returns ``(frames, truth)``; deterministic under seed."""
    if spec.n_views < 1 or spec.n_frames < 1:
        raise ValueError("scene needs at least one view and one frame")
    rng = Rng(spec.seed)
    aabb = spec.aabb
    v_n, t_n = spec.n_views, spec.n_frames
    h, w, c = spec.height, spec.width, spec.channels
    p = spec.patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p

    # Static floor: a grid with a family-consistent color gradient plus noise.
    g = spec.floor_grid_n
    xs = np.linspace(-spec.floor_extent, spec.floor_extent, g)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    bg_points = np.stack([gx.ravel(), gy.ravel(),
                          np.full(g * g, spec.floor_z)], axis=1)
    xn = bg_points[:, 0] / spec.floor_extent
    yn = bg_points[:, 1] / spec.floor_extent
    bg_rng = rng.split("floor")
    bg_colors = np.stack([
        0.42 + 0.13 * xn,
        0.42 + 0.13 * yn,
        np.full(len(bg_points), 0.46),
    ], axis=1)
    bg_colors = bg_colors + bg_rng.uniform(-spec.floor_color_noise,
                                           spec.floor_color_noise,
                                           bg_colors.shape)
    bg_colors = np.clip(bg_colors, 0.0, 1.0)[:, :c]

    # Rigid object clusters.
    obj_offsets, obj_colors_pts = [], []
    for i, obj in enumerate(spec.objects):
        if obj.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {obj.kind!r}")
        orng = rng.split(f"object-{i}")
        offs = orng.uniform(-obj.extent, obj.extent, (obj.n_points, 3))
        base = np.array(PALETTE.get(obj.color, PALETTE["red"]))[:c]
        cols_i = np.clip(base + orng.uniform(-0.03, 0.03, (obj.n_points, c)), 0.0, 1.0)
        obj_offsets.append(offs)
        obj_colors_pts.append(cols_i)

    centroids = np.zeros((len(spec.objects), t_n, 3))
    for i, obj in enumerate(spec.objects):
        for t in range(t_n):
            centroids[i, t] = object_position(obj, t, t_n)
    if centroids.size and (np.any(centroids < aabb.lo) or np.any(centroids > aabb.hi)):
        raise ValueError("object trajectory leaves the scene bounds")

    moving = np.zeros((len(spec.objects), t_n), dtype=bool)
    if t_n > 1:
        for i in range(len(spec.objects)):
            for t in range(t_n):
                a, b = (t, t + 1) if t < t_n - 1 else (t_n - 2, t_n - 1)
                moving[i, t] = np.linalg.norm(centroids[i, b] - centroids[i, a]) > 1e-12

    cameras = ring_cameras(spec)
    time_values = (np.arange(t_n) / (t_n - 1)) if t_n > 1 else np.zeros(1)

    owner = np.full((v_n, t_n, h, w), -2, dtype=np.int32)
    point_index = np.zeros((v_n, t_n, h, w), dtype=np.int32)
    all_pixels = np.zeros((v_n, t_n, h, w, c))
    all_depth = np.full((v_n, t_n, h, w), np.inf)

    owners_flat = np.concatenate(
        [np.full(len(bg_points), -1, dtype=np.int64)]
        + [np.full(len(o), k, dtype=np.int64) for k, o in enumerate(obj_offsets)]
    )
    local_flat = np.concatenate(
        [np.arange(len(bg_points))] + [np.arange(len(o)) for o in obj_offsets]
    )
    colors_flat = np.concatenate([bg_colors] + obj_colors_pts) if obj_offsets else bg_colors

    for t in range(t_n):
        pts = np.concatenate(
            [bg_points] + [obj_offsets[k] + centroids[k, t]
                           for k in range(len(spec.objects))]
        ) if obj_offsets else bg_points
        for v in range(v_n):
            pix, dep, own, idx = _splat_frame(
                pts, colors_flat, owners_flat, local_flat, cameras[v], spec)
            if spec.pixel_noise > 0:
                noise = rng.split(f"noise-{v}-{t}").normal(pix.shape, spec.pixel_noise)
                pix = np.clip(pix + noise, 0.0, 1.0)
            all_pixels[v, t] = pix
            all_depth[v, t] = dep
            owner[v, t] = own
            point_index[v, t] = idx

    # Patch labels: dynamic iff moving points own the majority of rendered pixels.
    labels = np.full((v_n, t_n, rows, cols), SceneTruth.LABEL_EMPTY, dtype=np.int8)
    for v in range(v_n):
        for t in range(t_n):
            own = owner[v, t]
            rendered = own > -2
            is_moving = np.zeros_like(rendered)
            for k in range(len(spec.objects)):
                if t_n > 1 and moving[k, t]:
                    is_moving |= own == k
            rend_patches = rendered.reshape(rows, p, cols, p).sum(axis=(1, 3))
            move_patches = is_moving.reshape(rows, p, cols, p).sum(axis=(1, 3))
            lab = np.where(rend_patches == 0, SceneTruth.LABEL_EMPTY,
                           np.where(move_patches * 2 > rend_patches,
                                    SceneTruth.LABEL_DYNAMIC, SceneTruth.LABEL_STATIC))
            labels[v, t] = lab

    warnings = []
    for k in range(len(spec.objects)):
        if not np.any(owner == k):
            warnings.append(f"object {k} ({spec.objects[k].color}) never visible in any frame")

    truth = SceneTruth(
        labels=labels,
        flow=np.zeros((v_n, t_n, rows, cols)),
        centroids=centroids,
        moving=moving,
        owner=owner,
        point_index=point_index,
        background_points=bg_points,
        object_offsets=obj_offsets,
        object_colors=[o.color for o in spec.objects],
        object_kinds=[o.kind for o in spec.objects],
        time_values=time_values,
        aabb=aabb,
        patch_size=p,
        scene_id=f"scene-{spec.seed}",
        warnings=warnings,
    )

    frames = []
    for v in range(v_n):
        for t in range(t_n):
            frames.append(CameraFrame(
                camera=cameras[v], depth=all_depth[v, t], pixels=all_pixels[v, t],
                view_id=v, time_index=t, time_value=float(time_values[t])))

    if t_n > 1:
        by_key = {(f.view_id, f.time_index): f for f in frames}
        for v in range(v_n):
            for t in range(t_n):
                other = t + 1 if t < t_n - 1 else t - 1
                truth.flow[v, t] = analytic_flow(
                    truth, by_key[(v, t)], by_key[(v, other)], p)
    return frames, truth


# ---------------------------------------------------------------------------
# Instruction generation
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(round(float(x), 4))


def loc_marker(pos) -> str:
    return f"<loc {_fmt(pos[0])} {_fmt(pos[1])} {_fmt(pos[2])}>"


def time_marker(t: float) -> str:
    return f"<time {_fmt(t)}>"


def emit_instructions(truth: SceneTruth, templates=None) -> list[dict]:
    """Fill instruction templates from exact scene truth.

    Three task families: dense captions (echoing the queried coordinates
    with object attributes), QA (answer is the object centroid), and
    grounding (answer is the time an object occupies a location; bindings
    whose location is occupied at more than one frame are skipped).
    Deterministic given the truth.
    """
    families = sorted(templates) if templates is not None else sorted(TEMPLATES)
    t_n = len(truth.time_values)
    pairs = []
    for family in families:
        if family not in TEMPLATES:
            raise ValueError(f"unknown template family {family!r}")
        for tpl in TEMPLATES[family]:
            for ko in range(truth.n_objects):
                color = truth.object_colors[ko]
                if family == "qa" and truth.object_colors.count(color) > 1:
                    logger.debug("skipping qa template for ambiguous color %s", color)
                    continue
                for t in range(t_n):
                    cn = truth.normalized_centroid(ko, t)
                    loc = loc_marker(cn)
                    tm = time_marker(truth.time_values[t])
                    if family == "grounding":
                        near = [
                            t2 for t2 in range(t_n)
                            if np.linalg.norm(truth.normalized_centroid(ko, t2) - cn) < 0.2
                        ]
                        if len(near) != 1:
                            logger.debug(
                                "skipping grounding binding obj=%d t=%d: "
                                "location occupied at frames %s", ko, t, near)
                            continue
                        instruction = tpl.format(loc=loc)
                        answer = tm
                    elif family == "qa":
                        instruction = tpl.format(color=color, time=tm)
                        answer = loc
                    else:
                        instruction = tpl.format(loc=loc, time=tm)
                        answer = CAPTION_ANSWER.format(
                            color=color, kind=truth.object_kinds[ko], loc=loc, time=tm)
                    pairs.append({
                        "instruction": instruction,
                        "answer": answer,
                        "task": family,
                        "scene_id": truth.scene_id,
                    })
    return pairs


def save_instructions(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair) + "\n")


def load_instructions(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Scene file round trip
# ---------------------------------------------------------------------------


def _blob(a: Array) -> dict:
    a = np.ascontiguousarray(a)
    return {
        "shape": list(a.shape),
        "dtype": str(a.dtype),
        "order": "row-major",
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _unblob(d: dict) -> Array:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def save_scene(path, spec: SceneSpec, frames, truth: SceneTruth) -> None:
    """Write one scene (spec, cameras, bounds, frame blobs, truth) as JSON."""
    cams = {}
    for f in frames:
        cams[f.view_id] = f.camera
    doc = {
        "spec": spec.to_dict(),
        "cameras": [cams[v].to_dict() for v in sorted(cams)],
        "aabb": truth.aabb.to_dict(),
        "frames": [
            {
                "view_id": f.view_id,
                "time_index": f.time_index,
                "time_value": f.time_value,
                "pixels": _blob(f.pixels),
                "depth": _blob(f.depth),
            }
            for f in frames
        ],
        "truth": {
            "labels": _blob(truth.labels),
            "flow": _blob(truth.flow),
            "centroids": _blob(truth.centroids),
            "moving": _blob(truth.moving),
            "owner": _blob(truth.owner),
            "point_index": _blob(truth.point_index),
            "background_points": _blob(truth.background_points),
            "object_offsets": [_blob(o) for o in truth.object_offsets],
            "object_colors": truth.object_colors,
            "object_kinds": truth.object_kinds,
            "time_values": _blob(truth.time_values),
            "patch_size": truth.patch_size,
            "scene_id": truth.scene_id,
            "warnings": truth.warnings,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_scene(path):
    """Read a scene JSON back into ``(spec, frames, truth)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = SceneSpec.from_dict(doc["spec"])
    cameras = [Camera.from_dict(c) for c in doc["cameras"]]
    frames = [
        CameraFrame(
            camera=cameras[fd["view_id"]],
            depth=_unblob(fd["depth"]),
            pixels=_unblob(fd["pixels"]),
            view_id=fd["view_id"],
            time_index=fd["time_index"],
            time_value=fd["time_value"],
        )
        for fd in doc["frames"]
    ]
    td = doc["truth"]
    truth = SceneTruth(
        labels=_unblob(td["labels"]),
        flow=_unblob(td["flow"]),
        centroids=_unblob(td["centroids"]),
        moving=_unblob(td["moving"]),
        owner=_unblob(td["owner"]),
        point_index=_unblob(td["point_index"]),
        background_points=_unblob(td["background_points"]),
        object_offsets=[_unblob(o) for o in td["object_offsets"]],
        object_colors=list(td["object_colors"]),
        object_kinds=list(td["object_kinds"]),
        time_values=_unblob(td["time_values"]),
        aabb=Aabb.from_dict(doc["aabb"]),
        patch_size=td["patch_size"],
        scene_id=td["scene_id"],
        warnings=list(td["warnings"]),
    )
    return spec, frames, truth
