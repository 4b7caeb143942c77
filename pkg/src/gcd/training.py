"""Training, evaluation, and checkpoint persistence for the deduction networks."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .alignment import DEFAULT_SIGMA_Z, PseudoChannelBank
from .channel import disturb_partial, nmse
from .dataset import ChannelDataset, neighbor_table
from .feature_store import FeatureSet, apply_position_error
from .net import DTYPE, DeductionNet, ModelConfig, build_model, channel_loss

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GCDCKPT\x00"
CKPT_VERSION = 1


class NumericError(RuntimeError):
    """Training diverged (NaN/Inf loss)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 500
    lr_initial: float = 1e-4
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_max: int = 16
    sigma_z: float = DEFAULT_SIGMA_Z
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_initial < 0:
            raise ValueError("invalid training configuration")
        if self.lr_decay_every < 1 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("invalid learning-rate schedule")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Source:
    """A dataset paired with the feature set its neighbor indices refer to."""
    dataset: ChannelDataset
    fs: FeatureSet
    bank: PseudoChannelBank | None = None

    def __post_init__(self):
        if self.bank is None:
            self.bank = PseudoChannelBank(self.fs, self.dataset.cfg)


@dataclass
class Batch:
    partial: torch.Tensor          # (B, N_t0, N_c0) normalized
    full: torch.Tensor | None      # (B, N_t, N_c) normalized
    pseudos: torch.Tensor          # (B, n, N_t, N_c) normalized
    present: torch.Tensor          # (B, n) bool
    power: np.ndarray              # (B,)


def make_batch(source: Source, idx: np.ndarray, n: np.ndarray | int, rng: np.random.Generator,
               sigma_z: float, neighbors: np.ndarray | None = None,
               partial: np.ndarray | None = None, with_full: bool = True) -> Batch:
    """Normalized network inputs for samples ``idx`` of one source.

    ``n`` is the pseudo-channel count per sample (or one value for all);
    ``neighbors``/``partial`` override the stored retrieval and pilots.
    """
    ds = source.dataset
    nb = ds.neighbors[idx] if neighbors is None else neighbors
    hp = ds.h_partial[idx] if partial is None else partial
    width = nb.shape[1]
    n = np.broadcast_to(np.asarray(n), (len(idx),))
    present = (np.arange(width)[None, :] < n[:, None]) & (nb >= 0)
    pseudo = source.bank.sample(np.where(present, nb, -1), rng, sigma_z)
    power = np.sum(np.abs(hp) ** 2, axis=(1, 2)) / hp[0].size
    if np.any(power == 0):
        raise ValueError("zero-power partial channel in batch")
    s = np.sqrt(power)
    full = torch.from_numpy(ds.h_full[idx] / s[:, None, None]) if with_full else None
    return Batch(torch.from_numpy(hp / s[:, None, None]), full,
                 torch.from_numpy(pseudo / s[:, None, None, None]),
                 torch.from_numpy(present), power)


def run_model(model: DeductionNet, batch: Batch) -> torch.Tensor:
    if model.cfg.kind == "cmixer":
        return model(batch.partial)
    return model(batch.partial, batch.pseudos, batch.present)


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    state: dict[str, torch.Tensor]
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    best_val: float = float("inf")

    def model(self) -> DeductionNet:
        m = build_model(self.model_cfg)
        m.load_state_dict(self.state)
        m.eval()
        return m


def _flatten_optimizer(opt: torch.optim.Optimizer, names: list[str]) -> dict[str, torch.Tensor]:
    sd = opt.state_dict()
    out = {}
    for pid, name in enumerate(names):
        st = sd["state"].get(pid)
        if not st:
            continue
        out[f"{name}/exp_avg"] = st["exp_avg"]
        out[f"{name}/exp_avg_sq"] = st["exp_avg_sq"]
        out[f"{name}/step"] = torch.as_tensor(st["step"], dtype=DTYPE).reshape(1)
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, names: list[str], flat: dict) -> None:
    sd = opt.state_dict()
    for pid, name in enumerate(names):
        if f"{name}/exp_avg" in flat:
            sd["state"][pid] = {"step": flat[f"{name}/step"].reshape(()).clone(),
                                "exp_avg": flat[f"{name}/exp_avg"].clone(),
                                "exp_avg_sq": flat[f"{name}/exp_avg_sq"].clone()}
    opt.load_state_dict(sd)


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    tensors = [("param", k, v) for k, v in ck.state.items()]
    tensors += [("optim", k, v) for k, v in ck.optimizer.items()]
    index, blobs, offset = [], [], 0
    for group, name, t in tensors:
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        b = np.ascontiguousarray(arr).tobytes()
        index.append({"group": group, "name": name, "shape": list(arr.shape),
                      "dtype": "<f8", "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {"model": ck.model_cfg.to_dict(), "train": ck.train_cfg.to_dict(),
              "epoch": ck.epoch, "rng_state": ck.rng_state, "best_val": ck.best_val,
              "tensors": index}
    hb = json.dumps(header, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<HQ", CKPT_VERSION, len(hb)) + hb + b"".join(blobs)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack_from("<HQ", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<HQ")
    header = json.loads(data[start:start + hlen])
    base = start + hlen
    state, optim = {}, {}
    for t in header["tensors"]:
        arr = np.frombuffer(data, dtype=t["dtype"], count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=base + t["offset"]).reshape(t["shape"])
        (state if t["group"] == "param" else optim)[t["name"]] = torch.from_numpy(arr.copy())
    return Checkpoint(ModelConfig(**header["model"]), TrainConfig(**header["train"]), state, optim,
                      header["epoch"], header["rng_state"], header["best_val"])


def _batches(order: np.ndarray, batch_size: int):
    """Yield each batch as a list of (source index, sample indices) groups."""
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        src = chunk[:, 0]
        yield [(int(s), chunk[src == s, 1]) for s in np.unique(src)]


def _index(sources: Sequence[Source]) -> np.ndarray:
    return np.concatenate([np.stack([np.full(len(s.dataset), k), np.arange(len(s.dataset))], 1)
                           for k, s in enumerate(sources)])


def evaluate_loss(model: DeductionNet, sources: Sequence[Source], n: int, sigma_z: float,
                  seed: int, batch_size: int = 256) -> float:
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for k, src in enumerate(sources):
            for start in range(0, len(src.dataset), batch_size):
                idx = np.arange(start, min(start + batch_size, len(src.dataset)))
                b = make_batch(src, idx, n, rng, sigma_z)
                total += float(channel_loss(b.full, run_model(model, b))) * len(idx)
                count += len(idx)
    return total / count


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]


def train(model_cfg: ModelConfig, train_sources: Sequence[Source], val_sources: Sequence[Source],
          tc: TrainConfig, log_path: str | Path | None = None,
          init: Checkpoint | None = None, resume: bool = False) -> TrainResult:
    """Adam with step-decayed learning rate; returns the best-validation checkpoint.

    Every epoch reshuffles with a seeded generator, draws a fresh pseudo-channel
    count in [0, n_max] per sample, and re-draws all placeholders. ``init``
    warm-starts the weights; with ``resume`` the optimizer moments, RNG state
    and epoch counter of ``init`` are restored too.
    """
    if not train_sources or not val_sources:
        raise ValueError("training and validation data must be nonempty")
    model = build_model(model_cfg)
    if init is not None:
        model.load_state_dict(init.state)
    names = [k for k, _ in model.named_parameters()]
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr_initial, betas=(tc.beta1, tc.beta2),
                           eps=tc.eps)
    rng = np.random.default_rng(tc.seed)
    start_epoch = 0
    if init is not None and resume:
        _restore_optimizer(opt, names, init.optimizer)
        if init.rng_state:
            rng.bit_generator.state = init.rng_state
        start_epoch = init.epoch
    index = _index(train_sources)
    history: list[dict] = []
    best = Checkpoint(model_cfg, tc, {k: v.clone() for k, v in model.state_dict().items()},
                      best_val=evaluate_loss(model, val_sources, tc.n_max, tc.sigma_z, tc.seed + 1))
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "wall_seconds"])
    try:
        for epoch in range(start_epoch, tc.epochs):
            lr = tc.lr_initial * tc.lr_decay_factor ** (epoch // tc.lr_decay_every)
            for g in opt.param_groups:
                g["lr"] = lr
            t0 = time.perf_counter()
            order = index[rng.permutation(len(index))]
            model.train()
            run_loss, seen = 0.0, 0
            for groups in _batches(order, tc.batch_size):
                size = sum(len(idx) for _, idx in groups)
                loss = 0.0
                for s, idx in groups:
                    n = rng.integers(0, tc.n_max + 1, size=len(idx))
                    b = make_batch(train_sources[s], idx, n, rng, tc.sigma_z)
                    # per-source means weighted back into one batch mean
                    loss = loss + channel_loss(b.full, run_model(model, b)) * (len(idx) / size)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch}; "
                                       f"check learning rate ({lr}) and initialization")
                opt.zero_grad()
                loss.backward()
                if lr > 0:
                    opt.step()
                run_loss += loss.item() * size
                seen += size
            model.eval()
            val = evaluate_loss(model, val_sources, tc.n_max, tc.sigma_z, tc.seed + 1)
            row = {"epoch": epoch + 1, "lr": lr, "train_loss": run_loss / seen, "val_loss": val,
                   "wall_seconds": time.perf_counter() - t0}
            history.append(row)
            if writer:
                writer.writerow([row[k] for k in ("epoch", "lr", "train_loss", "val_loss",
                                                  "wall_seconds")])
                fh.flush()
            log.info("epoch %d lr %.3g train %.5f val %.5f", epoch + 1, lr, row["train_loss"], val)
            if val < best.best_val:
                best = Checkpoint(model_cfg, tc,
                                  {k: v.clone() for k, v in model.state_dict().items()},
                                  _flatten_optimizer(opt, names), epoch + 1,
                                  _rng_state(rng), val)
    finally:
        if fh:
            fh.close()
    return TrainResult(best, history)


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st))


def finetune_steps(ck: Checkpoint, source: Source, steps: int, tc: TrainConfig,
                   eval_every: int, evaluate) -> list[tuple[int, object]]:
    """``steps`` Adam updates on ``source``; ``evaluate(model)`` runs every ``eval_every``."""
    model = ck.model()
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr_initial, betas=(tc.beta1, tc.beta2),
                           eps=tc.eps)
    rng = np.random.default_rng(tc.seed)
    out = [(0, evaluate(model))]
    n_samples = len(source.dataset)
    perm = rng.permutation(n_samples)
    pos = 0
    for step in range(1, steps + 1):
        if pos + tc.batch_size > n_samples:
            perm = rng.permutation(n_samples)
            pos = 0
        idx = np.sort(perm[pos:pos + tc.batch_size])
        pos += tc.batch_size
        model.train()
        n = rng.integers(0, tc.n_max + 1, size=len(idx))
        b = make_batch(source, idx, n, rng, tc.sigma_z)
        loss = channel_loss(b.full, run_model(model, b))
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at finetune step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % eval_every == 0:
            model.eval()
            out.append((step, evaluate(model)))
    return out


def predict(model: DeductionNet, source: Source, n: int, sigma_z: float, seed: int,
            position_error: float = 0.0, sigma_d: float = 0.0,
            batch_size: int = 256) -> np.ndarray:
    """Denormalized channel estimates for every sample of ``source``.

    ``position_error`` re-runs retrieval from perturbed positions; ``sigma_d``
    multiplicatively disturbs the pilots. Both use per-sample seeds derived
    from ``seed`` so different schemes see identical inputs.
    """
    ds = source.dataset
    rng = np.random.default_rng(seed)
    n_neighbors = max(n, 1)
    neighbors = ds.neighbors
    if position_error > 0 or neighbors.shape[1] < n:
        xy = np.array([apply_position_error(p[:2], position_error, seed * 1_000_003 + i)
                       for i, p in enumerate(ds.positions)])
        neighbors = neighbor_table(source.fs, xy, n_neighbors)
    partial = ds.h_partial
    if sigma_d > 0:
        partial = np.stack([disturb_partial(hp, sigma_d, seed * 7_919 + i)
                            for i, hp in enumerate(partial)])
    out = np.empty_like(ds.h_full)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            b = make_batch(source, idx, n, rng, sigma_z, neighbors=neighbors[idx],
                           partial=partial[idx], with_full=False)
            y = run_model(model, b).numpy()
            out[idx] = y * np.sqrt(b.power)[:, None, None]
    return out


def per_sample_nmse(truth: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    return np.array([nmse(t, e) for t, e in zip(truth, estimate)])
