"""Synthetic human-object-interaction scenes.

A scene holds 1-3 (human box, object box, object category, actions)
triplets.  Action labels are geometric predicates of the pair, so every
label can be recovered from box geometry and therefore from the rendered
occupancy grid.

Boxes are ``(cx, cy, w, h)`` in the unit square with y pointing down.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K

SCHEMA_VERSION = 1
N_OBJ_CATEGORIES = 5
N_ACTIONS = 6
GRID = 8
MAX_TRIPLETS = 3
MAX_TRIES = 1000
RESTART_AFTER = 50

ACTIONS = ("overlapping", "left_of", "above", "near", "contains", "far")
NEAR_DIST = 0.3
FAR_DIST = 0.6

HUMAN_SIZE = (0.25, 0.35)
OBJECT_SIZE = (0.25, 0.35)
# one human's object must be closer to it than any other human by this much
PAIR_MARGIN = 0.1
# keeps quantized boxes inside the unit square
EDGE = 2e-9
# object placement mix; the remainder is uniform over the image
CONTAINED_P = 0.25
NEAR_P = 0.35
FAR_P = 0.2

_MASK64 = (1 << 64) - 1


class DatasetError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class SplitMix64:
    """The SplitMix64 generator; fixed so datasets reproduce everywhere."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self, lo=0.0, hi=1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * (1.0 / (1 << 53)))

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)


def _q(x: float) -> float:
    # the on-disk precision; applied at generation so files round-trip exactly
    return float(f"{x:.9g}")


@dataclass(frozen=True)
class GtTriplet:
    human_box: tuple
    object_box: tuple
    object_category: int
    actions: tuple

    def to_json(self):
        return {
            "human_box": list(self.human_box),
            "object_box": list(self.object_box),
            "object_category": self.object_category,
            "actions": list(self.actions),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            human_box=tuple(float(v) for v in obj["human_box"]),
            object_box=tuple(float(v) for v in obj["object_box"]),
            object_category=int(obj["object_category"]),
            actions=tuple(int(v) for v in obj["actions"]),
        )


@dataclass(frozen=True)
class Scene:
    scene_id: int
    seed: int
    triplets: tuple = field(default_factory=tuple)

    def to_json(self):
        return {
            "schema": SCHEMA_VERSION,
            "scene_id": self.scene_id,
            "seed": self.seed,
            "triplets": [t.to_json() for t in self.triplets],
        }

    @classmethod
    def from_json(cls, obj):
        if obj.get("schema") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported schema {obj.get('schema')!r}")
        return cls(
            scene_id=int(obj["scene_id"]),
            seed=int(obj["seed"]),
            triplets=tuple(GtTriplet.from_json(t) for t in obj["triplets"]),
        )


@dataclass
class FeatureGrid:
    """``(1 + n_obj_categories, grid, grid)`` occupancy; channel 0 is humans."""

    data: np.ndarray

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def grid(self):
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def box_xyxy(box):
    cx, cy, w, h = box
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = box_xyxy(a)
    bx0, by0, bx1, by1 = box_xyxy(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def center_distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def box_contains(outer, inner) -> bool:
    ox0, oy0, ox1, oy1 = box_xyxy(outer)
    ix0, iy0, ix1, iy1 = box_xyxy(inner)
    return ox0 <= ix0 and oy0 <= iy0 and ix1 <= ox1 and iy1 <= oy1


def action_predicates(human, obj) -> tuple:
    """Multi-hot action vector for a (human, object) box pair, in ``ACTIONS`` order."""
    d = center_distance(human, obj)
    return (
        int(box_iou(human, obj) > 0),
        int(human[0] < obj[0]),
        int(human[1] < obj[1]),
        int(d < NEAR_DIST),
        int(box_contains(human, obj)),
        int(d > FAR_DIST),
    )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _sample_box(rng, size_range, center=None, spread=0.35):
    w = rng.uniform(*size_range)
    h = rng.uniform(*size_range)
    lo_x, hi_x = 0.5 * w + EDGE, 1 - 0.5 * w - EDGE
    lo_y, hi_y = 0.5 * h + EDGE, 1 - 0.5 * h - EDGE
    if center is None:
        cx = rng.uniform(lo_x, hi_x)
        cy = rng.uniform(lo_y, hi_y)
    else:
        cx = min(max(center[0] + rng.uniform(-spread, spread), lo_x), hi_x)
        cy = min(max(center[1] + rng.uniform(-spread, spread), lo_y), hi_y)
    return tuple(_q(v) for v in (cx, cy, w, h))


def _sample_inside(rng, outer, size_range):
    w = rng.uniform(size_range[0], min(size_range[1], outer[2]))
    h = rng.uniform(size_range[0], min(size_range[1], outer[3]))
    x0, y0, x1, y1 = box_xyxy(outer)
    cx = rng.uniform(x0 + 0.5 * w + EDGE, x1 - 0.5 * w - EDGE)
    cy = rng.uniform(y0 + 0.5 * h + EDGE, y1 - 0.5 * h - EDGE)
    return tuple(_q(v) for v in (cx, cy, w, h))


def _sample_object(rng, human):
    mode = rng.uniform()
    if mode < CONTAINED_P and human[2] >= OBJECT_SIZE[0] and human[3] >= OBJECT_SIZE[0]:
        return _sample_inside(rng, human, OBJECT_SIZE)
    if mode < CONTAINED_P + NEAR_P:
        return _sample_box(rng, OBJECT_SIZE, center=human[:2])
    obj = _sample_box(rng, OBJECT_SIZE)
    if mode < CONTAINED_P + NEAR_P + FAR_P:
        for _ in range(20):
            if center_distance(human, obj) > FAR_DIST:
                break
            obj = _sample_box(rng, OBJECT_SIZE)
    return obj


def cell_span(box, grid=GRID):
    """Inclusive (col0, col1, row0, row1) of the grid cells a box touches."""
    x0, y0, x1, y1 = box_xyxy(box)
    return (int(math.floor(x0 * grid)), int(math.ceil(x1 * grid)) - 1,
            int(math.floor(y0 * grid)), int(math.ceil(y1 * grid)) - 1)


def share_cells(a, b, grid=GRID) -> bool:
    ac0, ac1, ar0, ar1 = cell_span(a, grid)
    bc0, bc1, br0, br1 = cell_span(b, grid)
    return ac0 <= bc1 and bc0 <= ac1 and ar0 <= br1 and br0 <= ar1


def _scene_ok(triplets) -> bool:
    n = len(triplets)
    for i in range(n):
        for j in range(i + 1, n):
            # boxes rendered into one channel never touch a common cell, so
            # the raster keeps every box edge
            if share_cells(triplets[i].human_box, triplets[j].human_box):
                return False
            if (triplets[i].object_category == triplets[j].object_category
                    and share_cells(triplets[i].object_box, triplets[j].object_box)):
                return False
    for j, t in enumerate(triplets):
        own = center_distance(t.human_box, t.object_box)
        for i, other in enumerate(triplets):
            if i == j:
                continue
            if center_distance(other.human_box, t.object_box) < own + PAIR_MARGIN:
                return False
            if center_distance(t.human_box, other.object_box) < own + PAIR_MARGIN:
                return False
    return True


def generate_scene(rng: SplitMix64, scene_id=0, seed=0, n_obj_categories=N_OBJ_CATEGORIES,
                   max_triplets=MAX_TRIPLETS) -> Scene:
    count = 1 + rng.integer(max_triplets)
    triplets = []
    stalled = 0
    for _ in range(MAX_TRIES):
        human = _sample_box(rng, HUMAN_SIZE)
        obj = _sample_object(rng, human)
        cand = GtTriplet(human, obj, rng.integer(n_obj_categories), action_predicates(human, obj))
        if any(cand.actions) and _scene_ok(triplets + [cand]):
            triplets.append(cand)
            stalled = 0
            if len(triplets) == count:
                return Scene(scene_id=scene_id, seed=seed, triplets=tuple(triplets))
        else:
            stalled += 1
            if stalled >= RESTART_AFTER:
                # the placed triplets leave no room; start the scene over
                triplets, stalled = [], 0
    raise GenerationError(f"scene {scene_id}: rejection sampling failed after {MAX_TRIES} tries")


def scene_seed(seed: int, scene_id: int) -> int:
    return (seed ^ scene_id) & _MASK64


def generate_dataset(n_scenes: int, seed: int, n_obj_categories=N_OBJ_CATEGORIES) -> list:
    scenes = []
    for sid in range(n_scenes):
        s = scene_seed(seed, sid)
        scenes.append(generate_scene(SplitMix64(s), scene_id=sid, seed=s, n_obj_categories=n_obj_categories))
    return scenes


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def render_features(scene: Scene, grid=GRID, n_obj_categories=N_OBJ_CATEGORIES) -> FeatureGrid:
    """Fractional cell coverage per channel; overlapping boxes in one channel take the max."""
    out = np.zeros((1 + n_obj_categories, grid, grid))
    if not scene.triplets:
        return FeatureGrid(out)
    humans = np.array([t.human_box for t in scene.triplets], dtype=np.float64)
    objects = np.array([t.object_box for t in scene.triplets], dtype=np.float64)
    hcov = K.box_coverage(humans, grid)
    ocov = K.box_coverage(objects, grid)
    for i, t in enumerate(scene.triplets):
        np.maximum(out[0], hcov[i], out=out[0])
        ch = 1 + t.object_category
        np.maximum(out[ch], ocov[i], out=out[ch])
    np.clip(out, 0.0, 1.0, out=out)
    return FeatureGrid(out)


def render_batch(scenes, grid=GRID, n_obj_categories=N_OBJ_CATEGORIES) -> np.ndarray:
    return np.stack([render_features(s, grid, n_obj_categories).data for s in scenes])


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene.to_json(), separators=(",", ":"), sort_keys=True)


def write_dataset(scenes, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for s in scenes:
            fh.write(dumps_scene(s))
            fh.write("\n")


def read_dataset(path) -> list:
    scenes = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                scenes.append(Scene.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    return scenes


def split(scenes, train_fraction: float, rng):
    """Seeded shuffle into (train, eval) of sizes floor(f*n) and the rest."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    order = rng.permutation(len(scenes))
    cut = int(math.floor(train_fraction * len(scenes)))
    return [scenes[i] for i in order[:cut]], [scenes[i] for i in order[cut:]]
