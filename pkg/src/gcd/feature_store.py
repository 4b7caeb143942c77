"""Geometric feature set over a virtual user grid, its file format, and k-NN retrieval.

Each grid point keeps the (length, departure direction) of every path from the
BS. Grid index ``i = row * cols + col`` with rows along y and cols along x.
"""

from __future__ import annotations

import io
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .raytracer import ImageTracer
from .scene import Scene, points_in_buildings

MAGIC = b"GCDFEAT\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sH2ddII d32sQB")


class FeatureSetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSet:
    grid_origin: tuple[float, float]
    grid_step: float
    grid_dims: tuple[int, int]
    grid_height: float
    counts: np.ndarray     # (N,) paths per grid point
    records: np.ndarray    # (sum(counts), 4): length, kx, ky, kz
    scene_hash: str
    max_order: int = 2

    def __post_init__(self):
        if not self.grid_step > 0:
            raise FeatureSetError("grid_step must be positive")
        rows, cols = self.grid_dims
        if len(self.counts) != rows * cols:
            raise FeatureSetError("entry count does not match grid dims")
        if len(self.records) != int(self.counts.sum()):
            raise FeatureSetError("record count does not match per-point counts")
        object.__setattr__(self, "offsets", np.concatenate([[0], np.cumsum(self.counts)]))

    @property
    def n_points(self) -> int:
        return len(self.counts)

    @property
    def positions(self) -> np.ndarray:
        """(N, 2) xy of every grid point, row-major."""
        rows, cols = self.grid_dims
        r, c = np.divmod(np.arange(rows * cols), cols)
        x0, y0 = self.grid_origin
        return np.stack([x0 + c * self.grid_step, y0 + r * self.grid_step], axis=1)

    def paths_at(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(lengths (P,), departure directions (P, 3)) stored at grid point ``i``."""
        rec = self.records[self.offsets[i]:self.offsets[i + 1]]
        return rec[:, 0], rec[:, 1:4]

    def padded(self, indices: np.ndarray, max_paths: int | None = None):
        """Gather features for an index array into zero-padded arrays plus a mask.

        Negative indices mean "no neighbor" and yield fully masked rows.
        """
        indices = np.asarray(indices)
        flat = indices.ravel()
        cnt = np.where(flat >= 0, self.counts[np.maximum(flat, 0)], 0)
        width = int(cnt.max(initial=0)) if max_paths is None else max_paths
        lengths = np.ones((len(flat), width))
        dirs = np.zeros((len(flat), width, 3))
        mask = np.zeros((len(flat), width), dtype=bool)
        for j, (i, c) in enumerate(zip(flat, cnt)):
            c = min(int(c), width)
            if c:
                rec = self.records[self.offsets[i]:self.offsets[i] + c]
                lengths[j, :c] = rec[:, 0]
                dirs[j, :c] = rec[:, 1:4]
                mask[j, :c] = True
        shape = indices.shape
        return (lengths.reshape(*shape, width), dirs.reshape(*shape, width, 3),
                mask.reshape(*shape, width))

    def equals(self, other: FeatureSet) -> bool:
        return (self.grid_origin == other.grid_origin and self.grid_step == other.grid_step
                and self.grid_dims == other.grid_dims and self.grid_height == other.grid_height
                and self.scene_hash == other.scene_hash and self.max_order == other.max_order
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.records, other.records))


def grid_for_scene(scene: Scene, grid_step: float) -> tuple[tuple[float, float], tuple[int, int]]:
    xmin, xmax, ymin, ymax = scene.area_bounds
    cols = int(np.floor((xmax - xmin) / grid_step + 1e-9)) + 1
    rows = int(np.floor((ymax - ymin) / grid_step + 1e-9)) + 1
    return (xmin, ymin), (rows, cols)


def _trace_chunk(args):
    scene, tx, max_order, points = args
    tracer = ImageTracer(scene, tx, max_order)
    out = []
    for p in points:
        ps = tracer.trace(p)
        out.append(np.array([[q.length_m, *q.depart_dir] for q in ps.paths],
                            dtype=np.float64).reshape(-1, 4))
    return out


def build_feature_set(scene: Scene, grid_step: float, grid_height: float = 1.5,
                      max_order: int = 2, workers: int = 1) -> FeatureSet:
    """Trace from the BS to every grid point; points inside buildings stay empty.

    ``workers > 1`` fans chunks out to processes; results are re-assembled in
    grid order so the output does not depend on scheduling.
    """
    if not grid_step > 0:
        raise FeatureSetError("grid_step must be positive")
    origin, dims = grid_for_scene(scene, grid_step)
    rows, cols = dims
    r, c = np.divmod(np.arange(rows * cols), cols)
    pts = np.stack([origin[0] + c * grid_step, origin[1] + r * grid_step,
                    np.full(rows * cols, float(grid_height))], axis=1)
    valid = ~points_in_buildings(scene, pts)
    valid &= ~np.all(pts == np.asarray(scene.bs_position), axis=1)
    todo = pts[valid]
    if workers > 1 and len(todo) > 1:
        chunks = np.array_split(todo, workers * 4)
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_trace_chunk, [(scene, scene.bs_position, max_order, ch)
                                               for ch in chunks]))
        traced = [rec for part in parts for rec in part]
    else:
        traced = _trace_chunk((scene, scene.bs_position, max_order, todo))
    per_point: list[np.ndarray] = [np.zeros((0, 4))] * (rows * cols)
    for i, rec in zip(np.flatnonzero(valid), traced):
        per_point[i] = rec
    counts = np.array([len(p) for p in per_point], dtype=np.int64)
    records = np.concatenate(per_point, axis=0) if counts.sum() else np.zeros((0, 4))
    return FeatureSet(origin, float(grid_step), dims, float(grid_height), counts,
                      np.ascontiguousarray(records), scene.digest(), max_order)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _write_varint(buf: io.BytesIO, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.write(bytes([byte | 0x80]))
        else:
            buf.write(bytes([byte]))
            return


def _read_varint(data: memoryview, pos: int) -> tuple[int, int]:
    shift = result = 0
    while True:
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def feature_set_bytes(fs: FeatureSet) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, *fs.grid_origin, fs.grid_step,
                           fs.grid_dims[0], fs.grid_dims[1], fs.grid_height,
                           bytes.fromhex(fs.scene_hash), fs.n_points, fs.max_order))
    rec = fs.records.astype("<f8", copy=False)
    for i, c in enumerate(fs.counts):
        _write_varint(buf, int(c))
        buf.write(rec[fs.offsets[i]:fs.offsets[i + 1]].tobytes())
    return buf.getvalue()


def save_feature_set(fs: FeatureSet, path: str | Path) -> None:
    Path(path).write_bytes(feature_set_bytes(fs))


def load_feature_set(path: str | Path, scene: Scene | None = None) -> FeatureSet:
    """Read a feature set; with ``scene`` given, reject files built from another scene."""
    data = memoryview(Path(path).read_bytes())
    if len(data) < _HEADER.size:
        raise FeatureSetError("truncated feature-set file")
    (magic, version, ox, oy, step, rows, cols, height, digest, count,
     max_order) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureSetError("not a feature-set file")
    if version != FORMAT_VERSION:
        raise FeatureSetError(f"unsupported feature-set version {version}")
    pos = _HEADER.size
    counts = np.empty(count, dtype=np.int64)
    chunks = []
    for i in range(count):
        c, pos = _read_varint(data, pos)
        counts[i] = c
        nbytes = 32 * c
        chunks.append(np.frombuffer(data[pos:pos + nbytes], dtype="<f8").reshape(c, 4))
        pos += nbytes
    if pos != len(data):
        raise FeatureSetError("trailing bytes in feature-set file")
    records = np.concatenate(chunks).astype(np.float64) if chunks else np.zeros((0, 4))
    fs = FeatureSet((ox, oy), step, (rows, cols), height, counts,
                    np.ascontiguousarray(records), digest.hex(), max_order)
    if scene is not None and scene.digest() != fs.scene_hash:
        raise FeatureSetError("feature set was built from a different scene")
    return fs


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Neighbors:
    indices: np.ndarray
    distances: np.ndarray
    short: bool = False


def query_neighbors(fs: FeatureSet, position: Sequence[float], n: int) -> Neighbors:
    """The ``n`` nearest non-empty grid points in 2D, by (distance, index).

    Rings of grid cells are scanned outward from the cell nearest the query
    until no unscanned cell can beat the current n-th distance.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    qx, qy = float(position[0]), float(position[1])
    rows, cols = fs.grid_dims
    x0, y0 = fs.grid_origin
    step = fs.grid_step
    if n == 0:
        return Neighbors(np.zeros(0, dtype=np.int64), np.zeros(0))
    cc = int(np.clip(np.rint((qx - x0) / step), 0, cols - 1))
    rc = int(np.clip(np.rint((qy - y0) / step), 0, rows - 1))
    ex = abs(qx - (x0 + cc * step))
    ey = abs(qy - (y0 + rc * step))
    cand_idx: list[np.ndarray] = []
    cand_d: list[np.ndarray] = []
    max_ring = max(rc, rows - 1 - rc, cc, cols - 1 - cc)
    found = 0
    for ring in range(max_ring + 1):
        r_lo, r_hi = max(rc - ring, 0), min(rc + ring, rows - 1)
        c_lo, c_hi = max(cc - ring, 0), min(cc + ring, cols - 1)
        rr, cc_ = np.meshgrid(np.arange(r_lo, r_hi + 1), np.arange(c_lo, c_hi + 1),
                              indexing="ij")
        on_ring = (np.abs(rr - rc) == ring) | (np.abs(cc_ - cc) == ring)
        idx = (rr[on_ring] * cols + cc_[on_ring]).astype(np.int64)
        idx = idx[fs.counts[idx] > 0]
        if len(idx):
            r, c = np.divmod(idx, cols)
            d = np.hypot((x0 + c * step) - qx, (y0 + r * step) - qy)
            cand_idx.append(idx)
            cand_d.append(d)
            found += len(idx)
        if found >= n:
            kth = np.partition(np.concatenate(cand_d), n - 1)[n - 1]
            bound = (ring + 1) * step - max(ex, ey)
            if kth < bound:
                break
    if not cand_idx:
        return Neighbors(np.zeros(0, dtype=np.int64), np.zeros(0), short=True)
    idx = np.concatenate(cand_idx)
    d = np.concatenate(cand_d)
    order = np.lexsort((idx, d))[:n]
    return Neighbors(idx[order], d[order], short=len(order) < n)


def query_neighbors_bruteforce(fs: FeatureSet, position: Sequence[float], n: int) -> Neighbors:
    """Linear scan over every grid point; reference for ``query_neighbors``."""
    pos = fs.positions
    d = np.hypot(pos[:, 0] - float(position[0]), pos[:, 1] - float(position[1]))
    idx = np.flatnonzero(fs.counts > 0)
    order = np.lexsort((idx, d[idx]))[:n]
    return Neighbors(idx[order], d[idx][order], short=len(order) < n)


def apply_position_error(x: Sequence[float], l: float, seed: int) -> np.ndarray:
    """x + [c, d] with c, d ~ U[-l, l] independently."""
    if l < 0:
        raise ValueError("error scale must be >= 0")
    x = np.asarray(x, dtype=np.float64)[:2]
    if l == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + rng.uniform(-l, l, size=2)
