"""Specular multipath between two points: image-method tracer and a shooting oracle.

Reflecting surfaces are the vertical walls of every prism plus the ground plane.
Rooftops block rays but never reflect. Direction conventions: ``depart_dir`` is
the unit propagation direction leaving ``tx``; ``arrive_dir`` is the unit
propagation direction of the final segment, i.e. pointing *into* ``rx``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scene import Scene, points_in_buildings, points_in_footprint

MAX_SUPPORTED_ORDER = 3
GROUND_FACE = -1

_T_EPS = 1e-9
_SIDE_EPS = 1e-9


class TracerError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    face_id: int
    point: np.ndarray
    normal: np.ndarray


@dataclass
class PathRecord:
    length_m: float
    depart_dir: np.ndarray
    arrive_dir: np.ndarray
    interactions: tuple[Interaction, ...] = ()

    @property
    def order(self) -> int:
        return len(self.interactions)

    @property
    def face_sequence(self) -> tuple[int, ...]:
        return tuple(i.face_id for i in self.interactions)


@dataclass
class PathSet:
    tx: np.ndarray
    rx: np.ndarray
    paths: list[PathRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([p.length_m for p in self.paths], dtype=np.float64)

    def vertices(self, path: PathRecord) -> np.ndarray:
        """Polyline tx, reflection points..., rx."""
        pts = [self.tx] + [i.point for i in path.interactions] + [self.rx]
        return np.asarray(pts, dtype=np.float64)


@dataclass(frozen=True)
class Faces:
    """Reflecting planes n.p = c. Rows 0..F-1 are walls, row F is the ground."""
    normals: np.ndarray      # (F+1, 3)
    offsets: np.ndarray      # (F+1,)
    a: np.ndarray            # (F, 2) wall start vertex
    b: np.ndarray            # (F, 2) wall end vertex
    top: np.ndarray          # (F,) wall top height
    building: np.ndarray     # (F,) owning building id
    ground: float

    @property
    def n_walls(self) -> int:
        return len(self.a)

    def face_id(self, row: int) -> int:
        return GROUND_FACE if row == self.n_walls else int(row)


def scene_faces(scene: Scene) -> Faces:
    a_list, b_list, top, bid = [], [], [], []
    for bld in scene.buildings:
        v = bld.vertices
        for i in range(len(v)):
            a_list.append(v[i])
            b_list.append(v[(i + 1) % len(v)])
            top.append(bld.height)
            bid.append(bld.id)
    a = np.asarray(a_list, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b_list, dtype=np.float64).reshape(-1, 2)
    e = b - a
    lens = np.hypot(e[:, 0], e[:, 1])
    # CCW footprint: outward normal is the right-hand perpendicular of each edge
    n2 = np.stack([e[:, 1], -e[:, 0]], axis=1) / lens[:, None] if len(a) else np.zeros((0, 2))
    normals = np.zeros((len(a) + 1, 3))
    normals[:-1, :2] = n2
    normals[-1] = (0.0, 0.0, 1.0)
    offsets = np.empty(len(a) + 1)
    offsets[:-1] = np.einsum("ij,ij->i", n2, a)
    offsets[-1] = scene.ground_height
    return Faces(normals, offsets, a, b, np.asarray(top, dtype=np.float64),
                 np.asarray(bid, dtype=np.int64), scene.ground_height)


def _mirror(p: np.ndarray, n: np.ndarray, c: np.ndarray) -> np.ndarray:
    dist = np.einsum("...j,...j->...", p, n) - c
    return p - 2.0 * dist[..., None] * n


def segments_blocked(faces: Faces, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """True where the open segment p->q crosses any wall rectangle.

    Segments whose endpoints are outside every prism can only enter a prism
    through a wall (the roof plane is crossed at most once), so walls suffice.
    """
    m = len(p)
    if m == 0 or faces.n_walls == 0:
        return np.zeros(m, dtype=bool)
    d = (q - p)[:, None, :2]                      # (M,1,2)
    e = (faces.b - faces.a)[None, :, :]           # (1,F,2)
    w = faces.a[None, :, :] - p[:, None, :2]      # (M,F,2)
    den = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * e[..., 1] - w[..., 1] * e[..., 0]) / den
        u = (w[..., 0] * d[..., 1] - w[..., 1] * d[..., 0]) / den
    ok = (den != 0) & (t > _T_EPS) & (t < 1.0 - _T_EPS) & (u >= 0.0) & (u <= 1.0)
    with np.errstate(invalid="ignore"):
        z = p[:, None, 2] + t * (q - p)[:, None, 2]
    ok &= (z >= faces.ground) & (z <= faces.top[None, :])
    return ok.any(axis=1)


@functools.lru_cache(maxsize=32)
def _sequences(n_faces: int, order: int) -> np.ndarray:
    """All face-row sequences of length ``order`` without immediate repeats."""
    if order == 0:
        return np.zeros((1, 0), dtype=np.int64)
    seqs = [s for s in itertools.product(range(n_faces), repeat=order)
            if all(s[i] != s[i + 1] for i in range(order - 1))]
    return np.asarray(seqs, dtype=np.int64).reshape(-1, order)


class ImageTracer:
    """Image-method tracer bound to one scene and one transmitter.

    Image trees depend only on ``tx``, so repeated traces from a fixed BS to
    many receivers reuse them.
    """

    def __init__(self, scene: Scene, tx: Sequence[float], max_order: int = 2,
                 ground_reflection: bool = True):
        if not 0 <= max_order <= MAX_SUPPORTED_ORDER:
            raise TracerError(f"max_order must be in [0, {MAX_SUPPORTED_ORDER}]")
        self.scene = scene
        self.tx = np.asarray(tx, dtype=np.float64)
        if point_blocked(scene, self.tx):
            raise TracerError("tx lies inside a building or below ground")
        self.max_order = max_order
        self.ground_reflection = ground_reflection
        self.faces = scene_faces(scene)
        self._levels = [self._build_level(m) for m in range(1, max_order + 1)]

    def _build_level(self, m: int):
        f = self.faces
        n_rows = f.n_walls + 1
        seqs = _sequences(n_rows, m)
        if not self.ground_reflection:
            seqs = seqs[~(seqs == f.n_walls).any(axis=1)]
        images = np.empty((len(seqs), m, 3))
        keep = np.ones(len(seqs), dtype=bool)
        prev = np.broadcast_to(self.tx, (len(seqs), 3))
        for k in range(m):
            n = f.normals[seqs[:, k]]
            c = f.offsets[seqs[:, k]]
            # the source (or its image) must face the reflecting plane
            keep &= np.einsum("ij,ij->i", prev, n) - c > _SIDE_EPS
            prev = _mirror(prev, n, c)
            images[:, k] = prev
        return seqs[keep], images[keep]

    def trace(self, rx: Sequence[float]) -> PathSet:
        rx = np.asarray(rx, dtype=np.float64)
        if np.array_equal(rx, self.tx):
            raise TracerError("tx and rx coincide")
        if point_blocked(self.scene, rx):
            raise TracerError("rx lies inside a building or below ground")
        found: list[tuple[tuple[int, ...], np.ndarray]] = []
        if not segments_blocked(self.faces, self.tx[None], rx[None])[0]:
            found.append(((), np.empty((0, 3))))
        for seqs, images in self._levels:
            found.extend(self._solve_level(seqs, images, rx))
        paths = [self._record(seq, pts, rx) for seq, pts in found]
        paths.sort(key=lambda p: (p.length_m, p.face_sequence))
        return PathSet(self.tx.copy(), rx, paths)

    def _solve_level(self, seqs, images, rx):
        f = self.faces
        m = seqs.shape[1]
        if len(seqs) == 0:
            return []
        alive = np.ones(len(seqs), dtype=bool)
        target = np.broadcast_to(rx, (len(seqs), 3)).copy()
        points = np.empty((len(seqs), m, 3))
        for k in range(m - 1, -1, -1):
            rows = seqs[:, k]
            n = f.normals[rows]
            c = f.offsets[rows]
            img = images[:, k]
            alive &= np.einsum("ij,ij->i", target, n) - c > _SIDE_EPS
            d = target - img
            den = np.einsum("ij,ij->i", d, n)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (c - np.einsum("ij,ij->i", img, n)) / den
            alive &= (den != 0) & (t > 0) & (t < 1)
            pt = img + t[:, None] * d
            alive &= self._on_face(rows, pt)
            points[:, k] = pt
            target = pt
            if not alive.any():
                return []
        idx = np.flatnonzero(alive)
        pts = points[idx]
        chain = np.concatenate([np.broadcast_to(self.tx, (len(idx), 1, 3)), pts,
                                np.broadcast_to(rx, (len(idx), 1, 3))], axis=1)
        starts = chain[:, :-1].reshape(-1, 3)
        ends = chain[:, 1:].reshape(-1, 3)
        blocked = segments_blocked(f, starts, ends).reshape(len(idx), m + 1).any(axis=1)
        return [(tuple(f.face_id(r) for r in seqs[i]), pts[j])
                for j, i in enumerate(idx) if not blocked[j]]

    def _on_face(self, rows: np.ndarray, pt: np.ndarray) -> np.ndarray:
        f = self.faces
        ok = np.ones(len(rows), dtype=bool)
        wall = rows < f.n_walls
        if wall.any():
            r = rows[wall]
            e = f.b[r] - f.a[r]
            u = np.einsum("ij,ij->i", pt[wall, :2] - f.a[r], e) / np.einsum("ij,ij->i", e, e)
            z = pt[wall, 2]
            ok[wall] = (u >= 0) & (u <= 1) & (z >= f.ground) & (z <= f.top[r])
        gnd = ~wall
        if gnd.any():
            inside = np.zeros(int(gnd.sum()), dtype=bool)
            for bld in self.scene.buildings:
                inside |= points_in_footprint(bld.vertices, pt[gnd, :2])
            ok[gnd] = ~inside
        return ok

    def _record(self, seq: tuple[int, ...], pts: np.ndarray, rx: np.ndarray) -> PathRecord:
        chain = np.vstack([self.tx[None], pts, rx[None]])
        seg = np.diff(chain, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        f = self.faces
        inter = tuple(
            Interaction(fid, pts[k].copy(),
                        f.normals[f.n_walls if fid == GROUND_FACE else fid].copy())
            for k, fid in enumerate(seq))
        return PathRecord(float(seg_len.sum()), seg[0] / seg_len[0], seg[-1] / seg_len[-1], inter)


def point_blocked(scene: Scene, p: np.ndarray) -> bool:
    return bool(p[2] <= scene.ground_height or points_in_buildings(scene, p[None])[0])


def trace_paths(scene: Scene, tx: Sequence[float], rx: Sequence[float], max_order: int = 2,
                ground_reflection: bool = True) -> PathSet:
    """LoS plus every valid specular wall/ground reflection path up to ``max_order``."""
    return ImageTracer(scene, tx, max_order, ground_reflection).trace(rx)


def specular_residuals(ps: PathSet, path: PathRecord) -> np.ndarray:
    """Angle (rad) between each outgoing segment and the mirror of the incoming one."""
    pts = ps.vertices(path)
    out = []
    for k, inter in enumerate(path.interactions, start=1):
        u = pts[k] - pts[k - 1]
        v = pts[k + 1] - pts[k]
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        n = inter.normal
        r = u - 2.0 * np.dot(u, n) * n
        out.append(math.atan2(np.linalg.norm(np.cross(r, v)), float(np.dot(r, v))))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# shooting-and-bouncing oracle
# ---------------------------------------------------------------------------

_FAR = 1e9


class _ShootingScene:
    """Independent ray/surface intersection model for the shooting oracle."""

    def __init__(self, scene: Scene, ground_reflection: bool):
        self.scene = scene
        self.ground_reflection = ground_reflection
        walls = []
        for bld in scene.buildings:
            v = bld.vertices
            for i in range(len(v)):
                walls.append((v[i], v[(i + 1) % len(v)], bld.height))
        self.n_walls = len(walls)
        self.wa = np.array([w[0] for w in walls]).reshape(-1, 2)
        self.wb = np.array([w[1] for w in walls]).reshape(-1, 2)
        self.wtop = np.array([w[2] for w in walls])
        self.g = scene.ground_height

    def wall_normal(self, i: int) -> np.ndarray:
        e = self.wb[i] - self.wa[i]
        n = np.array([e[1], -e[0], 0.0])
        return n / np.linalg.norm(n)

    def first_hit(self, o: np.ndarray, d: np.ndarray, skip: np.ndarray):
        """Nearest hit distance and surface code per ray.

        Codes: wall index >= 0, GROUND_FACE for the ground, -2 for a rooftop,
        -3 for no hit. ``skip`` holds the surface each ray just left.
        """
        r = len(o)
        best = np.full(r, _FAR)
        code = np.full(r, -3, dtype=np.int64)
        if self.n_walls:
            e = self.wb - self.wa
            w = self.wa[None] - o[:, None, :2]
            den = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (w[..., 0] * e[None, :, 1] - w[..., 1] * e[None, :, 0]) / den
                u = (w[..., 0] * d[:, None, 1] - w[..., 1] * d[:, None, 0]) / den
            z = o[:, None, 2] + s * d[:, None, 2]
            ok = (den != 0) & (s > 1e-9) & (u >= 0) & (u <= 1) & (z >= self.g) & (z <= self.wtop)
            ok &= np.arange(self.n_walls)[None, :] != skip[:, None]
            s = np.where(ok, s, np.inf)
            j = np.argmin(s, axis=1)
            sj = s[np.arange(r), j]
            hit = np.isfinite(sj)
            best[hit] = sj[hit]
            code[hit] = j[hit]
        with np.errstate(divide="ignore", invalid="ignore"):
            sg = (self.g - o[:, 2]) / d[:, 2]
        okg = (d[:, 2] < 0) & (sg > 1e-9) & (sg < best) & (skip != GROUND_FACE)
        best[okg] = sg[okg]
        code[okg] = GROUND_FACE
        for bld in self.scene.buildings:
            with np.errstate(divide="ignore", invalid="ignore"):
                sr = (bld.height - o[:, 2]) / d[:, 2]
            cand = (d[:, 2] < 0) & (sr > 1e-9) & (sr < best)
            if cand.any():
                p = o[cand] + sr[cand, None] * d[cand]
                inside = points_in_footprint(bld.vertices, p[:, :2])
                idx = np.flatnonzero(cand)[inside]
                best[idx] = sr[idx]
                code[idx] = -2
        return best, code

    def shoot(self, tx: np.ndarray, dirs: np.ndarray, max_order: int):
        """Follow rays; yields per-bounce (origins, dirs, seg_len, seq_codes, alive)."""
        r = len(dirs)
        o = np.broadcast_to(tx, (r, 3)).copy()
        d = dirs.copy()
        skip = np.full(r, -9, dtype=np.int64)
        seq = np.full((r, max_order), -9, dtype=np.int64)
        alive = np.ones(r, dtype=bool)
        out = []
        for bounce in range(max_order + 1):
            dist, code = self.first_hit(o, d, skip)
            out.append((o.copy(), d.copy(), dist.copy(), seq[:, :bounce].copy(), alive.copy()))
            if bounce == max_order:
                break
            refl = (code >= 0) | ((code == GROUND_FACE) & self.ground_reflection)
            alive = alive & refl
            o = o + dist[:, None] * d
            n = np.zeros((r, 3))
            wall = code >= 0
            if wall.any():
                e = self.wb[code[wall]] - self.wa[code[wall]]
                nn = np.stack([e[:, 1], -e[:, 0], np.zeros(len(e))], axis=1)
                n[wall] = nn / np.linalg.norm(nn, axis=1, keepdims=True)
            n[code == GROUND_FACE] = (0.0, 0.0, 1.0)
            d = d - 2.0 * np.einsum("ij,ij->i", d, n)[:, None] * n
            seq[:, bounce] = code
            skip = code
        return out


def _directions(az: np.ndarray, el: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def trace_paths_bruteforce(scene: Scene, tx: Sequence[float], rx: Sequence[float],
                           max_order: int = 2, angular_grid: int = 720,
                           ground_reflection: bool = True, seeds_per_sequence: int = 4,
                           tol: float = 1e-6) -> PathSet:
    """Shooting-and-bouncing oracle: dense launch grid, capture, local refinement.

    Rays launched on an ``angular_grid`` x ``angular_grid/2`` (azimuth, elevation)
    lattice are bounced specularly; for every surface sequence the rays passing
    closest to ``rx`` seed a least-squares refinement of the launch angles that
    drives the miss distance to zero. Test-only; slow on large scenes.
    """
    from scipy.optimize import least_squares

    if not 0 <= max_order <= MAX_SUPPORTED_ORDER:
        raise TracerError(f"max_order must be in [0, {MAX_SUPPORTED_ORDER}]")
    tx = np.asarray(tx, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    if np.array_equal(tx, rx):
        raise TracerError("tx and rx coincide")
    if point_blocked(scene, tx) or point_blocked(scene, rx):
        raise TracerError("endpoint lies inside a building or below ground")
    world = _ShootingScene(scene, ground_reflection)

    n_az, n_el = angular_grid, max(angular_grid // 2, 2)
    az = (np.arange(n_az) + 0.5) * (2 * math.pi / n_az) - math.pi
    el = (np.arange(n_el) + 0.5) * (math.pi / n_el) - math.pi / 2
    AZ, EL = np.meshgrid(az, el, indexing="ij")
    AZ, EL = AZ.ravel(), EL.ravel()
    legs = world.shoot(tx, _directions(AZ, EL), max_order)

    step = 2 * math.pi / n_az
    seeds: dict[tuple[int, ...], list[tuple[float, int]]] = {}
    travelled = np.zeros(len(AZ))
    for bounce, (o, d, dist, seq, alive) in enumerate(legs):
        s = np.einsum("ij,ij->i", rx - o, d)
        miss = np.linalg.norm(o + s[:, None] * d - rx, axis=1)
        # a ray one lattice step off the true launch direction misses by ~step*range
        interior = alive & (s > 0) & (s < dist) & (miss < 2.0 * step * (travelled + s) + 1e-6)
        travelled = travelled + np.minimum(dist, _FAR)
        idx = np.flatnonzero(interior)
        if len(idx) == 0:
            continue
        keys = seq[idx]
        if bounce:
            order = np.lexsort(keys.T[::-1])
            idx, keys = idx[order], keys[order]
            _, starts = np.unique(keys, axis=0, return_index=True)
            groups = np.split(idx, starts[1:])
        else:
            groups = [idx]
        for g in groups:
            key = tuple(int(v) for v in seq[g[0]])
            best = g[np.argsort(miss[g], kind="stable")[:seeds_per_sequence]]
            seeds[key] = [(float(miss[i]), int(i)) for i in best]

    def follow(angles, key):
        dvec = _directions(np.array([angles[0]]), np.array([angles[1]]))
        legs1 = world.shoot(tx, dvec, len(key))
        o, d, dist, seq, alive = legs1[len(key)]
        travelled = sum(float(l[2][0]) for l in legs1[:len(key)])
        same = bool(alive[0]) and tuple(int(v) for v in seq[0]) == key
        s = float(np.dot(rx - o[0], d[0]))
        return o[0], d[0], float(dist[0]), same, s, travelled

    def residual(angles, key):
        o, d, dist, same, s, _ = follow(angles, key)
        s = min(max(s, 0.0), dist)
        r = o + s * d - rx
        return r if same else r + 1e3

    found: list[tuple[tuple[int, ...], float, np.ndarray, np.ndarray, list]] = []
    for key in sorted(seeds, key=lambda k: (len(k), k)):
        for _, i in seeds[key]:
            sol = least_squares(residual, x0=[AZ[i], EL[i]], args=(key,), method="lm",
                                xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=200)
            o, d, dist, same, s, travelled = follow(sol.x, key)
            if not same or not 0 < s < dist:
                continue
            if np.linalg.norm(o + s * d - rx) > tol:
                continue
            pts = _bounce_points(world, tx, sol.x, len(key))
            found.append((key, travelled + s, _directions(np.array([sol.x[0]]),
                                                          np.array([sol.x[1]]))[0], d, pts))
            break

    paths = []
    for key, length, dep, arr, pts in found:
        inter = tuple(
            Interaction(fid, p, np.array([0.0, 0.0, 1.0]) if fid == GROUND_FACE
                        else world.wall_normal(fid))
            for fid, p in zip(key, pts))
        paths.append(PathRecord(float(length), dep, arr, inter))
    paths.sort(key=lambda p: (p.length_m, p.face_sequence))
    return PathSet(tx, rx, paths)


def _bounce_points(world: _ShootingScene, tx: np.ndarray, angles, order: int) -> list:
    legs = world.shoot(tx, _directions(np.array([angles[0]]), np.array([angles[1]])), order)
    return [legs[k][0][0] for k in range(1, order + 1)]
