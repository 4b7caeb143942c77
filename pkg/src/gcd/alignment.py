"""Pseudo channels from retrieved geometric features, and power normalization.

A pseudo channel keeps the obtainable part of every path (free-space loss,
subcarrier delay ramp, array phase) and replaces the rest with an independent
placeholder ``z ~ CN(0, sigma_z^2)``: total complex variance ``sigma_z^2``,
``sigma_z^2 / 2`` per real component.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import SystemConfig, steering
from .feature_store import FeatureSet

DEFAULT_SIGMA_Z = 0.5


def draw_placeholders(rng: np.random.Generator, shape, sigma_z: float) -> np.ndarray:
    scale = sigma_z / np.sqrt(2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def obtainable_terms(lengths: np.ndarray, directions: np.ndarray,
                     cfg: SystemConfig) -> np.ndarray:
    """(P, N_t, N_c) per-path obtainable channel terms (no placeholder)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    gain = cfg.wavelength / (4.0 * np.pi * lengths)
    return gain[:, None, None] * steering(cfg, lengths, directions)


def build_pseudo_channel(lengths: np.ndarray, directions: np.ndarray, cfg: SystemConfig,
                         sigma_z: float = DEFAULT_SIGMA_Z, seed: int = 0,
                         z: np.ndarray | None = None) -> np.ndarray:
    """Pseudo channel from one grid point's (lengths, departure directions).

    ``z`` overrides the drawn placeholders (one per path); used by tests.
    """
    if not sigma_z > 0:
        raise ValueError("sigma_z must be positive")
    lengths = np.asarray(lengths, dtype=np.float64).reshape(-1)
    if len(lengths) == 0:
        return np.zeros(cfg.shape, dtype=np.complex128)
    if z is None:
        z = draw_placeholders(np.random.default_rng(seed), len(lengths), sigma_z)
    terms = obtainable_terms(lengths, np.asarray(directions).reshape(-1, 3), cfg)
    return np.einsum("p,pij->ij", np.asarray(z, dtype=np.complex128), terms)


class PseudoChannelBank:
    """Per-grid-point obtainable terms, precomputed for fast batched sampling.

    ``terms`` has shape ``(N, P_max, N_t, N_c)``; padded paths are zero so a
    placeholder drawn for them contributes nothing.
    """

    def __init__(self, fs: FeatureSet, cfg: SystemConfig):
        self.cfg = cfg
        self.fs = fs
        lengths, dirs, mask = fs.padded(np.arange(fs.n_points))
        self.max_paths = lengths.shape[1]
        flat = obtainable_terms(lengths.reshape(-1), dirs.reshape(-1, 3), cfg)
        flat[~mask.reshape(-1)] = 0.0
        self.terms = flat.reshape(fs.n_points, self.max_paths, *cfg.shape)
        self.mask = mask

    def build(self, indices: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Pseudo channels for ``indices`` (any shape; -1 = absent -> zeros)."""
        indices = np.asarray(indices)
        safe = np.maximum(indices, 0)
        out = np.einsum("...p,...pij->...ij", z, self.terms[safe])
        out[indices < 0] = 0.0
        return out

    def sample(self, indices: np.ndarray, rng: np.random.Generator,
               sigma_z: float = DEFAULT_SIGMA_Z) -> np.ndarray:
        z = draw_placeholders(rng, np.asarray(indices).shape + (self.max_paths,), sigma_z)
        return self.build(indices, z)


@dataclass(frozen=True)
class NormalizationState:
    power: float

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("normalization power must be positive")


def partial_power(h_partial: np.ndarray) -> float:
    return float(np.sum(np.abs(h_partial) ** 2)) / h_partial.size


def normalize_bundle(h_full: np.ndarray | None, h_partial: np.ndarray,
                     pseudos: np.ndarray | list | None = None):
    """Scale every matrix by 1/sqrt(P_H), P_H = mean |H[Omega]|^2.

    Returns ``((h_full, h_partial, pseudos), state)``; ``h_full`` passes through
    as ``None`` when absent (inference).
    """
    p = partial_power(h_partial)
    if p == 0:
        raise ValueError("zero-power partial channel (outage sample)")
    state = NormalizationState(p)
    s = np.sqrt(p)
    full = None if h_full is None else h_full / s
    ps = None if pseudos is None else np.asarray(pseudos) / s
    return (full, h_partial / s, ps), state


def denormalize(h: np.ndarray, state: NormalizationState) -> np.ndarray:
    return h * np.sqrt(state.power)
