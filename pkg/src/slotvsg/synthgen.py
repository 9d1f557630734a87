"""Deterministic "moving shapes" videos with analytic scene-graph ground truth.

Entities are squares, circles and triangles bouncing inside the area above
an optional floor band. Occlusion follows a static z-order, so the rendered
instance masks always partition the canvas together with the background.
Relations are recomputed every frame from the entities' geometric boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Box, FrameAnnotation, Instance, InstanceMask, VideoAnnotation, box_from_mask

SHAPES = ("square", "circle", "triangle")
PREDICATES = ("left-of", "above", "overlapping", "touching", "near", "on")
SYMMETRIC = {"overlapping", "touching", "near"}
FLOOR = "floor"
FLOOR_ID = 0

PALETTE = (
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
)
BACKGROUND_COLOR = (20, 20, 30)
FLOOR_COLOR = (120, 90, 60)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    height: int = 64
    width: int = 64
    num_entities: int = 4
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[tuple[int, int, int], ...] = PALETTE
    size_range: tuple[int, int] = (10, 16)
    velocity_range: tuple[float, float] = (0.5, 2.0)
    num_frames: int = 8
    predicates: tuple[str, ...] = PREDICATES
    floor_height: int = 10
    rest_probability: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_entities < 1:
            raise ValueError("num_entities must be >= 1")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        lo, hi = self.velocity_range
        if not (math.isfinite(lo) and math.isfinite(hi) and 0 <= lo <= hi):
            raise ValueError(f"velocity_range must be finite with 0 <= lo <= hi, got {self.velocity_range}")
        if self.size_range[0] < 2 or self.size_range[0] > self.size_range[1]:
            raise ValueError(f"size_range must satisfy 2 <= lo <= hi, got {self.size_range}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        unknown = set(self.predicates) - set(PREDICATES)
        if unknown:
            raise ValueError(f"unknown predicates {sorted(unknown)}")

    @property
    def object_vocab(self) -> tuple[str, ...]:
        return tuple(self.shapes) + ((FLOOR,) if self.floor_height > 0 else ())

    @property
    def relation_vocab(self) -> tuple[str, ...]:
        return tuple(self.predicates)


@dataclass
class Entity:
    identity: int
    shape: str
    color: tuple[int, int, int]
    size: float
    position: np.ndarray
    velocity: np.ndarray
    z: int
    bounds: tuple[float, float, float, float] = field(default=(0, 0, 0, 0))

    def box(self) -> tuple[float, float, float, float]:
        """Geometric extent in pixels, xyxy."""
        r = self.size / 2
        x, y = self.position
        return (x - r, y - r, x + r, y + r)


@dataclass(frozen=True)
class EntityState:
    identity: int
    box: tuple[float, float, float, float]
    is_floor: bool = False


def step_entity(e: Entity) -> None:
    """Advance one frame with elastic reflection at the movement bounds."""
    lo_x, lo_y, hi_x, hi_y = e.bounds
    pos = e.position + e.velocity
    for axis, lo, hi in ((0, lo_x, hi_x), (1, lo_y, hi_y)):
        # speeds are far below the interval width, so one reflection per step suffices
        if pos[axis] > hi:
            pos[axis] = 2 * hi - pos[axis]
            e.velocity[axis] = -e.velocity[axis]
        elif pos[axis] < lo:
            pos[axis] = 2 * lo - pos[axis]
            e.velocity[axis] = -e.velocity[axis]
    e.position = pos


def _play_height(cfg: WorldConfig) -> int:
    return cfg.height - max(cfg.floor_height, 0)


def spawn_entities(cfg: WorldConfig, rng: np.random.Generator) -> list[Entity]:
    play_h = _play_height(cfg)
    if cfg.size_range[0] > min(play_h, cfg.width):
        raise PlacementError(
            f"canvas {cfg.height}x{cfg.width} (play height {play_h}) too small for size {cfg.size_range[0]}"
        )
    colors = list(cfg.colors)
    order = rng.permutation(len(colors))
    z_ranks = rng.permutation(cfg.num_entities)
    entities: list[Entity] = []
    boxes = []
    for i in range(cfg.num_entities):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        size = float(rng.integers(cfg.size_range[0], min(cfg.size_range[1], play_h, cfg.width) + 1))
        r = size / 2
        bounds = (r, r, cfg.width - r, play_h - r)
        resting = cfg.floor_height > 0 and rng.random() < cfg.rest_probability
        # a resting entity whose floor strip is full is released into the air instead
        for attempt in range(2000):
            if attempt == 1000:
                resting = False
            x = rng.uniform(bounds[0], bounds[2])
            y = bounds[3] if resting else rng.uniform(bounds[1], bounds[3])
            cand = (x - r, y - r, x + r, y + r)
            if all(_intersection(cand, b) <= 0 for b in boxes):
                break
        else:
            raise PlacementError(
                f"could not place entity {i + 1} of {cfg.num_entities} on a {cfg.height}x{cfg.width} canvas"
            )
        boxes.append(cand)
        speed = rng.uniform(*cfg.velocity_range)
        angle = rng.uniform(0, 2 * math.pi)
        vel = np.array([speed * math.cos(angle), 0.0 if resting else speed * math.sin(angle)])
        if resting:
            vel[0] = speed * (1 if math.cos(angle) >= 0 else -1)
        entities.append(
            Entity(
                identity=i + 1,
                shape=shape,
                color=tuple(int(c) for c in colors[order[i % len(colors)]]),
                size=size,
                position=np.array([x, y]),
                velocity=vel,
                z=int(z_ranks[i]),
                bounds=bounds,
            )
        )
    return entities


# ---------------------------------------------------------------- geometry


def _intersection(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    return max(iw, 0.0) * max(ih, 0.0)


def _area(a) -> float:
    return (a[2] - a[0]) * (a[3] - a[1])


def _boundary_distance(a, b) -> float:
    dx = max(0.0, b[0] - a[2], a[0] - b[2])
    dy = max(0.0, b[1] - a[3], a[1] - b[3])
    return math.hypot(dx, dy)


def holds(pred: str, s, o) -> bool:
    """Whether predicate ``pred`` holds for subject box ``s`` and object box ``o`` (pixel xyxy)."""
    scx, scy = (s[0] + s[2]) / 2, (s[1] + s[3]) / 2
    ocx, ocy = (o[0] + o[2]) / 2, (o[1] + o[3]) / 2
    sw, sh = s[2] - s[0], s[3] - s[1]
    ow, oh = o[2] - o[0], o[3] - o[1]
    inter = _intersection(s, o)
    if pred == "left-of":
        return scx < ocx - (sw + ow) / 4
    if pred == "above":
        return scy < ocy - (sh + oh) / 4
    if pred == "overlapping":
        return inter > 0
    if pred == "touching":
        return inter <= 0 and _boundary_distance(s, o) <= 1.0
    if pred == "near":
        diag = (math.hypot(sw, sh) + math.hypot(ow, oh)) / 2
        return math.hypot(scx - ocx, scy - ocy) < 1.5 * diag
    if pred == "on":
        return abs(s[3] - o[1]) <= 2.0 and min(s[2], o[2]) - max(s[0], o[0]) > 0
    raise ValueError(f"unknown predicate {pred!r}")


def compute_relations(states: Sequence[EntityState], predicates: Sequence[str]) -> list[tuple[int, str, int]]:
    """All directed triplets holding among ``states``.

    The floor participates only as the object of "on".
    """
    out = []
    for s in states:
        if s.is_floor:
            continue
        for o in states:
            if o.identity == s.identity:
                continue
            for pred in predicates:
                if o.is_floor and pred != "on":
                    continue
                if holds(pred, s.box, o.box):
                    out.append((s.identity, pred, o.identity))
    return sorted(out, key=lambda tr: (tr[0], predicates.index(tr[1]), tr[2]))


# ---------------------------------------------------------------- rendering


def rasterize(shape: str, center, size: float, canvas: tuple[int, int]) -> np.ndarray:
    H, W = canvas
    py, px = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    cx, cy = center
    r = size / 2
    if shape == "square":
        return (px >= cx - r) & (px < cx + r) & (py >= cy - r) & (py < cy + r)
    if shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape == "triangle":
        depth = py - (cy - r)
        return (depth >= 0) & (py < cy + r) & (np.abs(px - cx) <= depth / 2)
    raise ValueError(f"unknown shape {shape!r}")


def render_frame(
    entities: Sequence[Entity], canvas: tuple[int, int], t: int = 0, floor_height: int = 0
) -> tuple[np.ndarray, list[InstanceMask]]:
    """Paint entities back to front; returns the RGB image and visible masks.

    The floor (identity 0) is included as a mask when ``floor_height > 0``.
    """
    H, W = canvas
    image = np.empty((H, W, 3), dtype=np.uint8)
    image[:] = BACKGROUND_COLOR
    owner = np.full((H, W), -1, dtype=np.int64)
    if floor_height > 0:
        image[H - floor_height :] = FLOOR_COLOR
        owner[H - floor_height :] = FLOOR_ID
    for e in sorted(entities, key=lambda e: e.z):
        support = rasterize(e.shape, e.position, e.size, canvas)
        image[support] = e.color
        owner[support] = e.identity
    masks = []
    ids = ([FLOOR_ID] if floor_height > 0 else []) + [e.identity for e in entities]
    for ident in ids:
        m = owner == ident
        if m.any():
            masks.append(InstanceMask(m, t, ident))
    return image, masks


# ---------------------------------------------------------------- world


def generate_world(cfg: WorldConfig, video_id: str | None = None) -> tuple[np.ndarray, VideoAnnotation]:
    """Frames (``T x H x W x 3`` uint8) and the matching annotation."""
    rng = np.random.default_rng(cfg.seed)
    entities = spawn_entities(cfg, rng)
    canvas = (cfg.height, cfg.width)
    categories = {e.identity: e.shape for e in entities}
    floor_state = None
    if cfg.floor_height > 0:
        categories[FLOOR_ID] = FLOOR
        floor_state = EntityState(FLOOR_ID, (0.0, float(cfg.height - cfg.floor_height), float(cfg.width), float(cfg.height)), True)
    frames, annots = [], []
    for t in range(cfg.num_frames):
        if t > 0:
            for e in entities:
                step_entity(e)
        image, masks = render_frame(entities, canvas, t, cfg.floor_height)
        visible = {m.identity for m in masks}
        instances = tuple(
            Instance(m.identity, categories[m.identity], box_from_mask(m.mask), m.mask) for m in masks
        )
        states = [EntityState(e.identity, e.box()) for e in entities]
        if floor_state is not None:
            states.append(floor_state)
        triplets = tuple(
            tr for tr in compute_relations(states, cfg.predicates) if tr[0] in visible and tr[2] in visible
        )
        frames.append(image)
        annots.append(FrameAnnotation(t, instances, triplets))
    ann = VideoAnnotation(
        video_id or f"world_{cfg.seed:06d}",
        tuple(annots),
        cfg.object_vocab,
        cfg.relation_vocab,
        canvas,
        frozenset({FLOOR}) if cfg.floor_height > 0 else frozenset(),
    )
    return np.stack(frames), ann


def generate_split(cfg: WorldConfig, count: int, base_seed: int, prefix: str = "vid"):
    """``count`` videos with seeds ``base_seed + i``."""
    for i in range(count):
        seed = base_seed + i
        yield generate_world(replace(cfg, seed=seed), f"{prefix}_{seed:06d}")
