"""Channel datasets: sampling users, ground-truth synthesis, and the binary file format.

Record layout (little-endian, one per sample): user position (3 x f64), sample
seed (u64), full channel (N_t*N_c complex as interleaved re/im f64, antenna-major),
partial channel (N_t0*N_c0, same encoding), neighbor grid indices (n_max x i64,
-1 padded). A JSON metadata block after the fixed header describes the shapes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import (AntennaModel, MaterialModel, SystemConfig, extract_partial,
                      synthesize_channel)
from .feature_store import FeatureSet, query_neighbors
from .raytracer import ImageTracer
from .scene import Scene, points_in_buildings

MAGIC = b"GCDDATA\x00"
FORMAT_VERSION = 1
_FIXED = struct.Struct("<8sHQ")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class ChannelDataset:
    cfg: SystemConfig
    positions: np.ndarray      # (S, 3)
    seeds: np.ndarray          # (S,) uint64
    h_full: np.ndarray         # (S, N_t, N_c) complex128
    h_partial: np.ndarray      # (S, N_t0, N_c0) complex128
    neighbors: np.ndarray      # (S, n_max) int64
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_max(self) -> int:
        return self.neighbors.shape[1]

    def subset(self, idx) -> ChannelDataset:
        return ChannelDataset(self.cfg, self.positions[idx], self.seeds[idx], self.h_full[idx],
                              self.h_partial[idx], self.neighbors[idx], dict(self.meta))

    def equals(self, other: ChannelDataset) -> bool:
        return (self.cfg == other.cfg and self.meta == other.meta
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("positions", "seeds", "h_full", "h_partial", "neighbors")))


def neighbor_table(fs: FeatureSet, xy: np.ndarray, n_max: int) -> np.ndarray:
    out = np.full((len(xy), n_max), -1, dtype=np.int64)
    for i, p in enumerate(xy):
        nb = query_neighbors(fs, p, n_max)
        out[i, :len(nb.indices)] = nb.indices
    return out


def generate_dataset(scene: Scene, fs: FeatureSet, cfg: SystemConfig, n_samples: int,
                     seed: int, n_max: int = 8, max_order: int = 2,
                     height_range: tuple[float, float] = (1.0, 2.0),
                     bs_ant: AntennaModel | None = None,
                     material: MaterialModel | None = None) -> ChannelDataset:
    """Uniformly placed users with randomly oriented dipoles; outages are redrawn.

    ``scene`` produces the ground truth and may differ from the scene behind
    ``fs`` (e.g. vehicles present in reality but absent from the map).
    """
    rng = np.random.default_rng(seed)
    tracer = ImageTracer(scene, scene.bs_position, max_order)
    xmin, xmax, ymin, ymax = scene.area_bounds
    pos, seeds, full, part = [], [], [], []
    attempts = 0
    while len(pos) < n_samples:
        attempts += 1
        if attempts > 100 * max(n_samples, 10):
            raise DatasetError("too many outage/blocked draws; scene is unusable")
        p = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax),
                      rng.uniform(*height_range)])
        s = int(rng.integers(0, 2**63 - 1))
        if points_in_buildings(scene, p[None])[0]:
            continue
        ps = tracer.trace(p)
        if not ps.paths:
            continue
        h = synthesize_channel(ps, cfg, bs_ant, None, material, seed=s)
        hp = extract_partial(h, cfg)
        if not np.any(hp) or not np.any(h):
            continue
        pos.append(p)
        seeds.append(s)
        full.append(h)
        part.append(hp)
    positions = np.array(pos).reshape(-1, 3)
    meta = {"scene_hash": scene.digest(), "feature_scene_hash": fs.scene_hash,
            "seed": int(seed), "max_order": int(max_order)}
    return ChannelDataset(cfg, positions, np.array(seeds, dtype=np.uint64),
                          np.array(full).reshape(-1, *cfg.shape),
                          np.array(part).reshape(-1, *cfg.partial_shape),
                          neighbor_table(fs, positions[:, :2], n_max), meta)


def _record_dtype(cfg: SystemConfig, n_max: int) -> np.dtype:
    nt, nc = cfg.shape
    a, b = cfg.partial_shape
    return np.dtype([("position", "<f8", (3,)), ("seed", "<u8"),
                     ("full", "<f8", (nt * nc * 2,)), ("partial", "<f8", (a * b * 2,)),
                     ("neighbors", "<i8", (n_max,))])


def _interleave(h: np.ndarray) -> np.ndarray:
    s = h.reshape(len(h), -1)
    out = np.empty((len(h), s.shape[1] * 2))
    out[:, 0::2] = s.real
    out[:, 1::2] = s.imag
    return out


def _deinterleave(x: np.ndarray, shape) -> np.ndarray:
    out = np.empty((len(x), x.shape[1] // 2), dtype=np.complex128)
    out.real = x[:, 0::2]
    out.imag = x[:, 1::2]
    return out.reshape(len(x), *shape)


def dataset_bytes(ds: ChannelDataset) -> bytes:
    meta = {"cfg": ds.cfg.to_dict(), "n_max": ds.n_max, "meta": ds.meta}
    meta_b = json.dumps(meta, sort_keys=True).encode()
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.cfg, ds.n_max))
    rec["position"] = ds.positions
    rec["seed"] = ds.seeds
    rec["full"] = _interleave(ds.h_full)
    rec["partial"] = _interleave(ds.h_partial)
    rec["neighbors"] = ds.neighbors
    head = _FIXED.pack(MAGIC, FORMAT_VERSION, len(ds)) + struct.pack("<I", len(meta_b))
    return head + meta_b + rec.tobytes()


def save_dataset(ds: ChannelDataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path: str | Path) -> ChannelDataset:
    data = Path(path).read_bytes()
    magic, version, count = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetError("not a dataset file")
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    pos = _FIXED.size
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + mlen])
    pos += mlen
    cfg = SystemConfig.from_dict(meta["cfg"])
    dt = _record_dtype(cfg, meta["n_max"])
    if len(data) - pos != dt.itemsize * count:
        raise DatasetError("dataset file size does not match its header")
    rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
    return ChannelDataset(cfg, rec["position"].astype(np.float64), rec["seed"].astype(np.uint64),
                          _deinterleave(rec["full"], cfg.shape),
                          _deinterleave(rec["partial"], cfg.partial_shape),
                          rec["neighbors"].astype(np.int64), meta["meta"])
