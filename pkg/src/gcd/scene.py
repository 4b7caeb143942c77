"""2.5D geometric environments: building prisms over a ground plane around one BS.

Coordinates are meters in a right-handed frame with z up. Buildings are vertical
prisms over simple counter-clockwise polygons; vehicles are small prisms too.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

SCENE_FORMAT_VERSION = 1

Vec2 = tuple[float, float]
Vec3 = tuple[float, float, float]


class SceneError(ValueError):
    """Raised for invalid or unconstructible scenes."""


def _signed_area(pts: Sequence[Vec2]) -> float:
    s = 0.0
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def _is_simple(pts: Sequence[Vec2]) -> bool:
    n = len(pts)
    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_cross(a1, a2, pts[j], pts[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class BuildingPrism:
    footprint: tuple[Vec2, ...]
    height: float
    id: int

    def __post_init__(self):
        fp = tuple((float(x), float(y)) for x, y in self.footprint)
        object.__setattr__(self, "footprint", fp)
        object.__setattr__(self, "height", float(self.height))
        if len(fp) < 3:
            raise SceneError(f"building {self.id}: footprint needs >= 3 vertices")
        for i in range(len(fp)):
            if fp[i] == fp[(i + 1) % len(fp)]:
                raise SceneError(f"building {self.id}: repeated consecutive vertex")
        if not self.height > 0:
            raise SceneError(f"building {self.id}: height must be positive")
        if not _is_simple(fp):
            raise SceneError(f"building {self.id}: footprint self-intersects")
        if _signed_area(fp) <= 0:
            raise SceneError(f"building {self.id}: footprint must wind counter-clockwise")

    @property
    def vertices(self) -> np.ndarray:
        return np.asarray(self.footprint, dtype=np.float64)

    def translated(self, dx: float, dy: float) -> BuildingPrism:
        return replace(self, footprint=tuple((x + dx, y + dy) for x, y in self.footprint))


def box_prism(center: Vec2, width: float, depth: float, height: float, id: int,
              angle: float = 0.0) -> BuildingPrism:
    """Rectangular prism centred at ``center``, rotated by ``angle`` radians."""
    c, s = math.cos(angle), math.sin(angle)
    hw, hd = width / 2.0, depth / 2.0
    corners = [(-hw, -hd), (hw, -hd), (hw, hd), (-hw, hd)]
    fp = tuple((center[0] + c * x - s * y, center[1] + s * x + c * y) for x, y in corners)
    return BuildingPrism(fp, height, id)


@dataclass(frozen=True)
class Scene:
    buildings: tuple[BuildingPrism, ...]
    bs_position: Vec3
    area_center: Vec2
    area_side: float
    ground_height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "bs_position", tuple(float(v) for v in self.bs_position))
        object.__setattr__(self, "area_center", tuple(float(v) for v in self.area_center))
        object.__setattr__(self, "area_side", float(self.area_side))
        object.__setattr__(self, "ground_height", float(self.ground_height))
        self.validate()

    def validate(self) -> None:
        if not self.area_side > 0:
            raise SceneError("area side must be positive")
        bx, by, bz = self.bs_position
        half = self.area_side / 2.0
        cx, cy = self.area_center
        if abs(bx - cx) > half or abs(by - cy) > half:
            raise SceneError("BS lies outside the scene area")
        if not bz > self.ground_height:
            raise SceneError("BS must be strictly above the ground")
        ids = [b.id for b in self.buildings]
        if len(set(ids)) != len(ids):
            raise SceneError("building ids must be unique")
        if point_in_building(self, self.bs_position):
            raise SceneError("a building contains the BS")

    @property
    def area_bounds(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax)."""
        half = self.area_side / 2.0
        cx, cy = self.area_center
        return cx - half, cx + half, cy - half, cy + half

    def to_dict(self) -> dict:
        return {
            "format_version": SCENE_FORMAT_VERSION,
            "ground_height": self.ground_height,
            "bs_position": list(self.bs_position),
            "area": {"center": list(self.area_center), "side": self.area_side},
            "buildings": [
                {"id": b.id, "height": b.height, "footprint": [list(v) for v in b.footprint]}
                for b in self.buildings
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        version = d.get("format_version")
        if version != SCENE_FORMAT_VERSION:
            raise SceneError(f"unsupported scene format_version {version!r}")
        buildings = tuple(
            BuildingPrism(tuple(tuple(v) for v in b["footprint"]), b["height"], int(b["id"]))
            for b in d["buildings"]
        )
        return cls(
            buildings=buildings,
            bs_position=tuple(d["bs_position"]),
            area_center=tuple(d["area"]["center"]),
            area_side=d["area"]["side"],
            ground_height=d.get("ground_height", 0.0),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n")


def load_scene(path: str | Path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def points_in_footprint(vertices: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Crossing-number containment of 2D points in one polygon (vectorized)."""
    xy = np.atleast_2d(xy)
    x, y = xy[:, 0:1], xy[:, 1:2]
    a = vertices
    b = np.roll(vertices, -1, axis=0)
    straddle = (a[:, 1] > y) != (b[:, 1] > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = a[:, 0] + (y - a[:, 1]) * (b[:, 0] - a[:, 0]) / (b[:, 1] - a[:, 1])
    hits = straddle & (x < x_cross)
    return (np.count_nonzero(hits, axis=1) % 2) == 1


def points_in_buildings(scene: Scene, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    inside = np.zeros(len(pts), dtype=bool)
    for b in scene.buildings:
        zok = (pts[:, 2] > scene.ground_height) & (pts[:, 2] < b.height)
        if not zok.any():
            continue
        inside[zok] |= points_in_footprint(b.vertices, pts[zok, :2])
    return inside


def point_in_building(scene: Scene, p: Sequence[float]) -> bool:
    return bool(points_in_buildings(scene, np.asarray(p, dtype=np.float64)[None, :])[0])


def generate_scene(seed: int, n_buildings: int, area_side: float, bs_height: float,
                   size_range: tuple[float, float] = (8.0, 30.0),
                   height_range: tuple[float, float] = (10.0, 60.0),
                   gap: float = 2.0, bs_clearance: float = 4.0,
                   max_attempts_per_building: int = 2000) -> Scene:
    """Procedural scene of non-overlapping rotated rectangular buildings around a BS.

    The area is centred on the BS, which sits at the origin at ``bs_height``.
    Raises SceneError when the buildings cannot be placed (overcrowded config).
    """
    from shapely.geometry import Point, Polygon

    if n_buildings < 0:
        raise SceneError("n_buildings must be >= 0")
    if not area_side > 0:
        raise SceneError("area_side must be positive")
    rng = np.random.default_rng(seed)
    half = area_side / 2.0
    bs_point = Point(0.0, 0.0)
    placed: list[BuildingPrism] = []
    shapes: list[Polygon] = []
    attempts = 0
    while len(placed) < n_buildings:
        attempts += 1
        if attempts > max_attempts_per_building * max(n_buildings, 1):
            raise SceneError(
                f"could not place {n_buildings} buildings in a {area_side} m area "
                f"(placed {len(placed)}); parameters are overcrowded")
        w, d = rng.uniform(*size_range, size=2)
        h = rng.uniform(*height_range)
        ang = rng.uniform(0.0, math.pi / 2)
        r = 0.5 * math.hypot(w, d)
        if r >= half:
            continue
        cx, cy = rng.uniform(-half + r, half - r, size=2)
        cand = box_prism((cx, cy), w, d, h, len(placed), ang)
        poly = Polygon(cand.footprint)
        if poly.distance(bs_point) < bs_clearance:
            continue
        if any(poly.distance(s) < gap for s in shapes):
            continue
        placed.append(cand)
        shapes.append(poly)
    return Scene(tuple(placed), (0.0, 0.0, float(bs_height)), (0.0, 0.0), area_side)


class PerturbationKind(str, Enum):
    BUILDING_SHIFT = "building_shift"
    ADD_VEHICLES = "add_vehicles"


@dataclass(frozen=True)
class ScenePerturbation:
    kind: PerturbationKind
    shift_scale: float = 0.0
    vehicles: tuple[BuildingPrism, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if self.shift_scale < 0:
            raise SceneError("shift_scale must be >= 0")


def perturb_scene(scene: Scene, p: ScenePerturbation, seed: int) -> Scene:
    """Apply independent per-building footprint shifts, or append vehicle prisms."""
    if p.kind is PerturbationKind.BUILDING_SHIFT:
        if p.shift_scale == 0:
            return scene
        rng = np.random.default_rng(seed)
        offsets = rng.uniform(-p.shift_scale, p.shift_scale, size=(len(scene.buildings), 2))
        moved = tuple(b.translated(float(dx), float(dy))
                      for b, (dx, dy) in zip(scene.buildings, offsets))
        candidate = moved
    else:
        next_id = max((b.id for b in scene.buildings), default=-1) + 1
        vehicles = tuple(replace(v, id=next_id + k) for k, v in enumerate(p.vehicles))
        candidate = scene.buildings + vehicles
    try:
        return replace(scene, buildings=candidate)
    except SceneError as exc:
        raise SceneError(f"perturbation rejected: {exc}") from exc


def building_shift_offsets(scene: Scene, shift_scale: float, seed: int) -> np.ndarray:
    """The per-building offsets that ``perturb_scene`` draws for this seed."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-shift_scale, shift_scale, size=(len(scene.buildings), 2))


def place_vehicles(scene: Scene, count: int, seed: int, length: float = 4.5,
                   width: float = 1.8, height: float = 1.6,
                   bs_clearance: float = 3.0) -> tuple[BuildingPrism, ...]:
    """Drop ``count`` car-sized boxes at random free ground spots in the area."""
    from shapely.geometry import Point, Polygon

    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = scene.area_bounds
    occupied = [Polygon(b.footprint) for b in scene.buildings]
    bs = Point(scene.bs_position[0], scene.bs_position[1])
    out: list[BuildingPrism] = []
    for _ in range(1000 * max(count, 1)):
        if len(out) == count:
            break
        cx = rng.uniform(xmin + length, xmax - length)
        cy = rng.uniform(ymin + length, ymax - length)
        v = box_prism((cx, cy), length, width, height, len(out), rng.uniform(0, math.pi))
        poly = Polygon(v.footprint)
        if poly.distance(bs) < bs_clearance or any(poly.distance(o) < 0.5 for o in occupied):
            continue
        out.append(v)
        occupied.append(poly)
    if len(out) < count:
        raise SceneError(f"could only place {len(out)} of {count} vehicles")
    return tuple(out)
