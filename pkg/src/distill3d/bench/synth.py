"""Procedural indoor scenes built from axis-aligned boxes.

Each scene is an open-topped room (floor and four walls) furnished with
box-assembled cabinets, beds, chairs, tables, sofas and wall pictures. Colors
are tied to classes but deliberately overlap (floor, table, cabinet and chair
share wood tones; wall and bed share pale tones), so geometry matters for
segmentation. For every scene the generator samples a labeled surface point
cloud and ray-casts perspective and panoramic RGB-D frames with label images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..cloud import PointCloud
from ..geom import (CameraIntrinsics, DepthImage, DepthSemantics, PanoramicCamera, RgbdFrame,
                    pixel_centers, pixel_to_uv, uv_to_direction)
from ..io import quantize_colors

CLASS_NAMES = ("floor", "wall", "cabinet", "bed", "chair", "table", "sofa", "picture")
FLOOR, WALL, CABINET, BED, CHAIR, TABLE, SOFA, PICTURE = range(8)

BASE_COLORS = np.array([
    [0.58, 0.42, 0.28],
    [0.86, 0.85, 0.80],
    [0.62, 0.46, 0.32],
    [0.82, 0.82, 0.86],
    [0.45, 0.33, 0.25],
    [0.55, 0.40, 0.27],
    [0.35, 0.40, 0.60],
    [0.70, 0.35, 0.35],
])

# brightness per face: -x, +x, -y, +y, -z, +z
FACE_SHADE = np.array([0.85, 0.80, 0.75, 0.70, 0.60, 1.00])

WALL_HEIGHT = 2.6
SLAB = 0.1
OBJECT_COLOR_STD = 0.05
POINT_COLOR_STD = 0.03
PERSPECTIVE_SIZE = (80, 60)
PERSPECTIVE_FOCAL = 48.0
PANORAMA_SIZE = (128, 64)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    label: int
    obj: int
    color: np.ndarray


@dataclass
class Scene:
    scene_id: str
    size: tuple[float, float, float]
    boxes: list[Box]
    cloud: PointCloud


@dataclass
class RenderedFrame:
    """A rendered frame plus the ground truth used to produce it.

    ``rotation`` maps camera-frame vectors to world; ``hits`` holds the
    world-space ray hit of every pixel (NaN where the ray escaped).
    """

    frame: RgbdFrame
    position: np.ndarray
    rotation: np.ndarray
    hits: np.ndarray


@dataclass
class SyntheticWorld:
    seed: int
    classes: int
    scenes: list[Scene]
    frames: list[list[RenderedFrame]] = field(default_factory=list)


def _rot90(k: int) -> np.ndarray:
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k % 4]
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def _parts(kind: int, rng: np.random.Generator) -> list[tuple[list[float], list[float]]]:
    """Local boxes of one object, back side at y=0, standing on z=0."""
    u = rng.uniform
    if kind == CABINET:
        w, d, h = u(0.6, 1.4), u(0.4, 0.6), u(0.8, 2.0)
        return [([0, 0, 0], [w, d, h])]
    if kind == BED:
        w, ln, h = u(1.4, 1.9), u(1.9, 2.2), u(0.45, 0.6)
        return [([0, 0.08, 0], [w, 0.08 + ln, h]), ([0, 0, 0], [w, 0.08, h + u(0.4, 0.6)])]
    if kind == CHAIR:
        s, seat, leg = u(0.42, 0.5), u(0.42, 0.48), 0.04
        parts = [([0, 0, seat - 0.06], [s, s, seat]), ([0, 0, seat], [s, 0.05, seat + u(0.35, 0.5)])]
        for x in (0, s - leg):
            for y in (0, s - leg):
                parts.append(([x, y, 0], [x + leg, y + leg, seat - 0.06]))
        return parts
    if kind == TABLE:
        w, d, h, leg = u(0.8, 1.6), u(0.6, 1.0), u(0.7, 0.78), 0.05
        parts = [([0, 0, h - 0.04], [w, d, h])]
        for x in (0, w - leg):
            for y in (0, d - leg):
                parts.append(([x, y, 0], [x + leg, y + leg, h - 0.04]))
        return parts
    if kind == SOFA:
        w, d, seat = u(1.6, 2.2), u(0.8, 0.95), u(0.38, 0.45)
        arm = 0.15
        return [([arm, 0.2, 0], [w - arm, d, seat]), ([0, 0, 0], [w, 0.2, seat + u(0.4, 0.5)]),
                ([0, 0.2, 0], [arm, d, seat + 0.2]), ([w - arm, 0.2, 0], [w, d, seat + 0.2])]
    if kind == PICTURE:
        w, h, z0 = u(0.5, 1.0), u(0.4, 0.8), u(1.1, 1.5)
        return [([0, 0, z0], [w, 0.03, z0 + h])]
    raise ValueError(f"no furniture model for class {kind}")


def _place(parts, room_w, room_d, against_wall: bool, rng):
    """Rotate and translate local boxes into the room; returns world boxes."""
    lo = np.array([p[0] for p in parts], dtype=np.float64)
    hi = np.array([p[1] for p in parts], dtype=np.float64)
    k = int(rng.integers(4))
    rot = _rot90(k)
    corners = np.stack([lo, hi])
    a = corners @ rot.T
    blo, bhi = np.minimum(a[0], a[1]), np.maximum(a[0], a[1])
    ext_lo, ext_hi = blo.min(axis=0), bhi.max(axis=0)
    size = ext_hi - ext_lo
    if size[0] > room_w - 0.2 or size[1] > room_d - 0.2:
        return None
    if against_wall:
        # rotation k sends the local back (-y) to wall: 0 -> y=0, 1 -> x=W, 2 -> y=D, 3 -> x=0
        t = np.zeros(3)
        if k in (0, 2):
            t[0] = rng.uniform(0.05, room_w - size[0] - 0.05) - ext_lo[0]
            t[1] = -ext_lo[1] if k == 0 else room_d - ext_hi[1]
        else:
            t[1] = rng.uniform(0.05, room_d - size[1] - 0.05) - ext_lo[1]
            t[0] = room_w - ext_hi[0] if k == 1 else -ext_lo[0]
    else:
        t = np.array([rng.uniform(0.3, room_w - size[0] - 0.3) - ext_lo[0],
                      rng.uniform(0.3, room_d - size[1] - 0.3) - ext_lo[1], 0.0])
        if room_w - size[0] - 0.3 <= 0.3 or room_d - size[1] - 0.3 <= 0.3:
            return None
    t[2] = 0.0
    return blo + t, bhi + t


def _overlaps(lo, hi, footprints, margin=0.05) -> bool:
    for flo, fhi in footprints:
        if np.all(lo[:2] < fhi[:2] + margin) and np.all(flo[:2] < hi[:2] + margin):
            return True
    return False


def _furnish(room_w, room_d, classes, rng):
    plan = [(CABINET, int(rng.integers(0, 3)), True), (BED, int(rng.integers(0, 2)), True),
            (SOFA, int(rng.integers(0, 2)), True), (TABLE, int(rng.integers(1, 3)), False),
            (CHAIR, int(rng.integers(2, 6)), False), (PICTURE, int(rng.integers(1, 4)), True)]
    placed = []
    floor_prints: list = []
    wall_prints: list = []
    for kind, count, wall in plan:
        if kind >= classes:
            continue
        for _ in range(count):
            for _attempt in range(40):
                parts = _parts(kind, rng)
                world = _place(parts, room_w, room_d, wall, rng)
                if world is None:
                    continue
                blo, bhi = world
                lo, hi = blo.min(axis=0), bhi.max(axis=0)
                blockers = floor_prints + wall_prints if kind == PICTURE else floor_prints
                if _overlaps(lo, hi, blockers):
                    continue
                (wall_prints if kind == PICTURE else floor_prints).append((lo, hi))
                placed.append((kind, blo, bhi))
                break
    return placed


def _room_boxes(room_w, room_d):
    h = WALL_HEIGHT
    floor = ([-SLAB, -SLAB, -SLAB], [room_w + SLAB, room_d + SLAB, 0.0])
    walls = [([-SLAB, 0, 0], [0, room_d, h]), ([room_w, 0, 0], [room_w + SLAB, room_d, h]),
             ([-SLAB, -SLAB, 0], [room_w + SLAB, 0, h]), ([-SLAB, room_d, 0], [room_w + SLAB, room_d + SLAB, h])]
    return floor, walls


def _inside_any(points: np.ndarray, boxes: list[Box], skip: int, tol: float = 1e-9) -> np.ndarray:
    out = np.zeros(len(points), dtype=bool)
    for i, b in enumerate(boxes):
        if i == skip:
            continue
        out |= np.all((points > b.lo + tol) & (points < b.hi - tol), axis=1)
    return out


def sample_surface(boxes: list[Box], room, n_points: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted samples on box faces that are visible inside the room."""
    room_lo = np.zeros(3)
    room_hi = np.asarray(room, dtype=np.float64)
    faces = []
    for bi, b in enumerate(boxes):
        for axis in range(3):
            for side in (0, 1):
                fixed = (b.lo if side == 0 else b.hi)[axis]
                if fixed < room_lo[axis] - 1e-9 or fixed > room_hi[axis] + 1e-9:
                    continue
                if axis == 2 and side == 0 and fixed <= 1e-9:
                    continue
                lo = np.maximum(b.lo, room_lo)
                hi = np.minimum(b.hi, room_hi)
                lo[axis] = hi[axis] = fixed
                other = [a for a in range(3) if a != axis]
                area = float(np.prod(np.maximum(hi[other] - lo[other], 0.0)))
                if area > 0:
                    faces.append((bi, axis, side, lo, hi, area))
    areas = np.array([f[5] for f in faces])
    counts = rng.multinomial(n_points, areas / areas.sum())
    pos, col, lab = [], [], []
    for (bi, axis, side, lo, hi, _), n in zip(faces, counts):
        if n == 0:
            continue
        p = lo + rng.random((n, 3)) * (hi - lo)
        keep = ~_inside_any(p, boxes, bi)
        p = p[keep]
        b = boxes[bi]
        shade = FACE_SHADE[2 * axis + side]
        c = b.color * shade + rng.normal(0.0, POINT_COLOR_STD, size=(len(p), 3))
        pos.append(p)
        col.append(quantize_colors(c))
        lab.append(np.full(len(p), b.label, dtype=np.int64))
    return PointCloud(positions=np.concatenate(pos), colors=np.concatenate(col),
                      hard_labels=np.concatenate(lab))


def build_scene(scene_id: str, classes: int, n_points: int, rng: np.random.Generator) -> Scene:
    room_w, room_d = float(rng.uniform(4.0, 6.5)), float(rng.uniform(4.0, 6.5))
    boxes: list[Box] = []

    def color(label):
        return np.clip(BASE_COLORS[label] + rng.normal(0.0, OBJECT_COLOR_STD, 3), 0.0, 1.0)

    floor, walls = _room_boxes(room_w, room_d)
    boxes.append(Box(np.array(floor[0], float), np.array(floor[1], float), FLOOR, 0, color(FLOOR)))
    wall_color = color(WALL)
    for lo, hi in walls:
        boxes.append(Box(np.array(lo, float), np.array(hi, float), WALL, 1, wall_color))
    for obj, (kind, blo, bhi) in enumerate(_furnish(room_w, room_d, classes, rng), start=2):
        c = color(kind)
        for lo, hi in zip(blo, bhi):
            boxes.append(Box(lo, hi, kind, obj, c))
    cloud = sample_surface(boxes, (room_w, room_d, WALL_HEIGHT), n_points, rng)
    return Scene(scene_id, (room_w, room_d, WALL_HEIGHT), boxes, cloud)


def ray_cast(origin: np.ndarray, dirs: np.ndarray, boxes: list[Box]):
    """Nearest box hit per ray: (t, box index, face index), t=inf when nothing is hit."""
    lo = np.stack([b.lo for b in boxes])
    hi = np.stack([b.hi for b in boxes])
    d = np.where(dirs == 0.0, 1e-300, dirs)
    inv = 1.0 / d
    t1 = (lo[None] - origin) * inv[:, None, :]
    t2 = (hi[None] - origin) * inv[:, None, :]
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    t_enter = tnear.max(axis=2)
    t_exit = tfar.min(axis=2)
    hit = (t_exit >= t_enter) & (t_enter > 1e-9)
    t = np.where(hit, t_enter, np.inf)
    box = np.argmin(t, axis=1)
    rows = np.arange(len(dirs))
    t_best = t[rows, box]
    axis = np.argmax(tnear[rows, box], axis=1)
    side = (d[rows, axis] < 0).astype(np.int64)
    return t_best, box, 2 * axis + side


def _shade(boxes, t, box, face, rng):
    n = len(t)
    valid = np.isfinite(t)
    colors = np.stack([b.color for b in boxes])
    labels = np.array([b.label for b in boxes])
    rgb = np.zeros((n, 3))
    rgb[valid] = colors[box[valid]] * FACE_SHADE[face[valid]][:, None]
    rgb[valid] += rng.normal(0.0, POINT_COLOR_STD, size=(int(valid.sum()), 3))
    lab = np.where(valid, labels[box], -1)
    return quantize_colors(rgb), lab, valid


def render_perspective(scene: Scene, position, yaw: float, pitch: float, rng,
                       size=PERSPECTIVE_SIZE, focal=PERSPECTIVE_FOCAL, name="") -> RenderedFrame:
    w, h = size
    K = CameraIntrinsics(focal, focal, w / 2.0, h / 2.0)
    fwd = np.array([math.cos(pitch) * math.cos(yaw), math.cos(pitch) * math.sin(yaw), -math.sin(pitch)])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    u, v = pixel_centers(w, h)
    cam_dirs = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=1)
    t, box, face = ray_cast(position, cam_dirs @ rot.T, scene.boxes)
    rgb, lab, valid = _shade(scene.boxes, t, box, face, rng)
    depth = np.where(valid, t, 0.0).astype(np.float32).astype(np.float64)
    hits = np.full((w * h, 3), np.nan)
    hits[valid] = position + (depth[valid, None] * cam_dirs[valid]) @ rot.T
    frame = RgbdFrame(rgb.reshape(h, w, 3), DepthImage(w, h, depth, DepthSemantics.Z_DEPTH), K,
                      labels=lab.reshape(h, w), name=name)
    return RenderedFrame(frame, np.asarray(position, float), rot, hits)


def render_panoramic(scene: Scene, position, rng, size=PANORAMA_SIZE, name="") -> RenderedFrame:
    w, h = size
    rows, cols = np.divmod(np.arange(w * h), w)
    u, v = pixel_to_uv(rows, cols, w, h)
    dirs = uv_to_direction(u, v)
    t, box, face = ray_cast(position, dirs, scene.boxes)
    rgb, lab, valid = _shade(scene.boxes, t, box, face, rng)
    depth = np.where(valid, t, 0.0).astype(np.float32).astype(np.float64)
    hits = np.full((w * h, 3), np.nan)
    hits[valid] = position + depth[valid, None] * dirs[valid]
    frame = RgbdFrame(rgb.reshape(h, w, 3), DepthImage(w, h, depth, DepthSemantics.RAY_DISTANCE),
                      PanoramicCamera(), labels=lab.reshape(h, w), name=name)
    return RenderedFrame(frame, np.asarray(position, float), np.eye(3), hits)


def _free_position(scene: Scene, z_range, rng) -> np.ndarray:
    room_w, room_d, _ = scene.size
    for _ in range(200):
        p = np.array([rng.uniform(0.4, room_w - 0.4), rng.uniform(0.4, room_d - 0.4), rng.uniform(*z_range)])
        if not any(np.all((p > b.lo - 0.05) & (p < b.hi + 0.05)) for b in scene.boxes):
            return p
    raise RuntimeError(f"no free camera position in scene {scene.scene_id}")


def render_scene_frames(scene: Scene, rng: np.random.Generator) -> list[RenderedFrame]:
    frames = []
    n_persp = int(rng.integers(2, 7))
    for k in range(n_persp):
        pos = _free_position(scene, (1.3, 1.7), rng)
        yaw = float(rng.uniform(-math.pi, math.pi))
        pitch = float(rng.uniform(math.radians(10), math.radians(35)))
        frames.append(render_perspective(scene, pos, yaw, pitch, rng, name=f"{scene.scene_id}/frame_{k}"))
    pos = _free_position(scene, (1.4, 1.6), rng)
    frames.append(render_panoramic(scene, pos, rng, name=f"{scene.scene_id}/frame_{n_persp}"))
    return frames


def generate_synthetic_world(seed: int, n_scenes: int, classes: int = 8,
                             points_per_scene: int = 10000) -> SyntheticWorld:
    """Deterministic world of ``n_scenes`` rooms with rendered frames."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if not 2 <= classes <= len(CLASS_NAMES):
        raise ValueError(f"classes must be in [2, {len(CLASS_NAMES)}]")
    world = SyntheticWorld(seed=seed, classes=classes, scenes=[])
    for i in range(n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        scene = build_scene(f"scene_{i:03d}", classes, points_per_scene, rng)
        world.scenes.append(scene)
        world.frames.append(render_scene_frames(scene, rng))
    return world
