"""MIMO-OFDM channel synthesis from traced paths, pilot masking, and disturbances.

Channels are complex ``(n_bs_antennas, n_subcarriers)`` arrays, antenna-major.
The BS array is a ULA along ``array_axis`` with the reference antenna at index 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.constants import speed_of_light

from .raytracer import PathSet

C0 = speed_of_light


@dataclass(frozen=True)
class SystemConfig:
    f_center: float = 5e9
    bandwidth: float = 40e6
    n_subcarriers: int = 256
    n_bs_antennas: int = 16
    omega_t: tuple[int, ...] = (0, 4, 8, 12)
    omega_c: tuple[int, ...] = tuple(range(0, 256, 16))
    antenna_spacing: float | None = None   # None -> half wavelength
    array_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "omega_t", tuple(int(i) for i in self.omega_t))
        object.__setattr__(self, "omega_c", tuple(int(i) for i in self.omega_c))
        if not self.bandwidth / self.n_subcarriers > 0:
            raise ValueError("subcarrier spacing must be positive")
        for name, idx, n in (("omega_t", self.omega_t, self.n_bs_antennas),
                             ("omega_c", self.omega_c, self.n_subcarriers)):
            if not idx:
                raise ValueError(f"{name} must be nonempty")
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= n:
                raise ValueError(f"{name} out of range [0, {n})")
        axis = np.asarray(self.array_axis, dtype=np.float64)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError("array_axis must be a unit vector")

    @classmethod
    def full(cls) -> SystemConfig:
        """Full-scale configuration: 16 antennas x 256 subcarriers, 4x16 pilots."""
        return cls()

    @classmethod
    def desk(cls) -> SystemConfig:
        """Desk-scale configuration: 8 antennas x 32 subcarriers, 2x8 pilots."""
        return cls(n_subcarriers=32, n_bs_antennas=8, omega_t=(0, 4),
                   omega_c=tuple(range(0, 32, 4)))

    @property
    def wavelength(self) -> float:
        return C0 / self.f_center

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength

    @property
    def delta_f(self) -> float:
        return self.bandwidth / self.n_subcarriers

    @property
    def spacing(self) -> float:
        return self.wavelength / 2.0 if self.antenna_spacing is None else self.antenna_spacing

    @property
    def antenna_positions(self) -> np.ndarray:
        """(N_t, 3) offsets of each BS antenna from the reference antenna."""
        n = np.arange(self.n_bs_antennas, dtype=np.float64)
        return n[:, None] * self.spacing * np.asarray(self.array_axis)[None, :]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_bs_antennas, self.n_subcarriers)

    @property
    def partial_shape(self) -> tuple[int, int]:
        return (len(self.omega_t), len(self.omega_c))

    def to_dict(self) -> dict:
        return {
            "f_center": self.f_center, "bandwidth": self.bandwidth,
            "n_subcarriers": self.n_subcarriers, "n_bs_antennas": self.n_bs_antennas,
            "omega_t": list(self.omega_t), "omega_c": list(self.omega_c),
            "antenna_spacing": self.antenna_spacing, "array_axis": list(self.array_axis),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SystemConfig:
        d = dict(d)
        for k in ("omega_t", "omega_c", "array_axis"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class AntennaKind(str, Enum):
    ISOTROPIC = "isotropic"
    DIPOLE = "dipole"


@dataclass(frozen=True)
class AntennaModel:
    kind: AntennaKind = AntennaKind.ISOTROPIC
    orientation: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "kind", AntennaKind(self.kind))
        o = np.asarray(self.orientation, dtype=np.float64)
        if abs(np.linalg.norm(o) - 1.0) > 1e-12:
            raise ValueError("antenna orientation must be a unit vector")

    def pattern(self, direction: np.ndarray) -> np.ndarray:
        if self.kind is AntennaKind.DIPOLE:
            return dipole_pattern(np.asarray(self.orientation), direction)
        return isotropic_pattern(direction)


@dataclass(frozen=True)
class MaterialModel:
    relative_permittivity: float = 5.31
    overrides: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.relative_permittivity < 1 or any(v < 1 for v in self.overrides.values()):
            raise ValueError("relative permittivity must be >= 1")

    def permittivity(self, face_id: int) -> float:
        return self.overrides.get(face_id, self.relative_permittivity)


def dipole_pattern(axis: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Hertzian dipole far field: theta-polarized, magnitude sin(theta).

    Equals the component of ``axis`` orthogonal to ``direction``; zero on axis.
    """
    axis = np.asarray(axis, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return (axis - np.dot(axis, d) * d).astype(np.complex128)


def isotropic_pattern(direction: np.ndarray) -> np.ndarray:
    """Unit-gain pattern with vertical (theta) polarization in every direction."""
    d = np.asarray(direction, dtype=np.float64)
    v = np.array([0.0, 0.0, 1.0]) - d[2] * d
    nv = np.linalg.norm(v)
    if nv < 1e-12:
        v = np.array([1.0, 0.0, 0.0]) - d[0] * d
        nv = np.linalg.norm(v)
    return (v / nv).astype(np.complex128)


def random_dipole(seed: int) -> AntennaModel:
    """Dipole with orientation uniform on the sphere."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    return AntennaModel(AntennaKind.DIPOLE, tuple(float(x) for x in v))


def fresnel_coefficients(cos_i: float, eps_r: float) -> tuple[float, float]:
    """(perpendicular, parallel) reflection coefficients for a lossless dielectric."""
    sin2 = 1.0 - cos_i * cos_i
    root = np.sqrt(eps_r - sin2)
    gs = (cos_i - root) / (cos_i + root)
    gp = (eps_r * cos_i - root) / (eps_r * cos_i + root)
    return float(gs), float(gp)


def reflection_matrix(incident: np.ndarray, normal: np.ndarray, eps_r: float) -> np.ndarray:
    """3x3 map from incident field to reflected field at one specular bounce."""
    u = incident / np.linalg.norm(incident)
    n = normal
    v = u - 2.0 * np.dot(u, n) * n
    s = np.cross(u, n)
    ns = np.linalg.norm(s)
    if ns < 1e-12:
        # normal incidence: any transverse basis works
        s = np.cross(u, [1.0, 0.0, 0.0] if abs(u[0]) < 0.9 else [0.0, 1.0, 0.0])
        ns = np.linalg.norm(s)
    s /= ns
    p_in = np.cross(s, u)
    p_out = np.cross(s, v)
    gs, gp = fresnel_coefficients(abs(float(np.dot(u, n))), eps_r)
    return gs * np.outer(s, s) + gp * np.outer(p_out, p_in)


def scattering_matrix(ps: PathSet, path, material: MaterialModel) -> np.ndarray:
    """Ordered product of per-bounce reflection matrices (identity for LoS)."""
    xi = np.eye(3)
    pts = ps.vertices(path)
    for k, inter in enumerate(path.interactions, start=1):
        xi = reflection_matrix(pts[k] - pts[k - 1], inter.normal,
                               material.permittivity(inter.face_id)) @ xi
    return xi


def path_amplitudes(ps: PathSet, cfg: SystemConfig, bs_ant: AntennaModel,
                    user_ant: AntennaModel, material: MaterialModel) -> np.ndarray:
    """Per-path amplitude: free-space loss times rx^H . Xi . tx polarization."""
    lam = cfg.wavelength
    out = np.empty(len(ps.paths), dtype=np.complex128)
    for i, path in enumerate(ps.paths):
        ct = bs_ant.pattern(path.depart_dir)
        cr = user_ant.pattern(-path.arrive_dir)
        xi = scattering_matrix(ps, path, material)
        out[i] = lam / (4.0 * np.pi * path.length_m) * (np.conj(cr) @ xi @ ct)
    return out


def steering(cfg: SystemConfig, lengths: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """(P, N_t, N_c) array of exp(-j2pi n_c df tau) * exp(j k d_nt . k_T) per path."""
    tau = np.asarray(lengths, dtype=np.float64) / C0
    nc = np.arange(cfg.n_subcarriers)
    freq = np.exp(-2j * np.pi * np.mod(np.outer(tau * cfg.delta_f, nc), 1.0))
    ant = np.exp(1j * cfg.wavenumber * (np.asarray(directions) @ cfg.antenna_positions.T))
    return ant[:, :, None] * freq[:, None, :]


def synthesize_channel(ps: PathSet, cfg: SystemConfig, bs_ant: AntennaModel | None = None,
                       user_ant: AntennaModel | None = None,
                       material: MaterialModel | None = None, seed: int = 0) -> np.ndarray:
    """Ground-truth channel at the t = 0 snapshot (Doppler factor is 1).

    ``user_ant=None`` draws a randomly oriented dipole from ``seed``.
    """
    bs_ant = bs_ant or AntennaModel()
    user_ant = user_ant or random_dipole(seed)
    material = material or MaterialModel()
    if not ps.paths:
        return np.zeros(cfg.shape, dtype=np.complex128)
    alpha = path_amplitudes(ps, cfg, bs_ant, user_ant, material)
    lengths = ps.lengths
    carrier = np.exp(-2j * np.pi * np.mod(cfg.f_center * lengths / C0, 1.0))
    dirs = np.array([p.depart_dir for p in ps.paths])
    return np.einsum("p,pij->ij", alpha * carrier, steering(cfg, lengths, dirs))


def extract_partial(h: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    if h.shape != cfg.shape:
        raise ValueError(f"channel shape {h.shape} does not match config {cfg.shape}")
    return h[np.ix_(cfg.omega_t, cfg.omega_c)]


def disturb_partial(hp: np.ndarray, sigma_d: float, seed: int) -> np.ndarray:
    """Elementwise product with real N(1, sigma_d^2) multipliers."""
    if sigma_d < 0:
        raise ValueError("sigma_d must be >= 0")
    if sigma_d == 0:
        return hp.copy()
    rng = np.random.default_rng(seed)
    return hp * rng.normal(1.0, sigma_d, size=hp.shape)


def nmse(truth: np.ndarray, estimate: np.ndarray) -> float:
    if truth.shape != estimate.shape:
        raise ValueError("shape mismatch")
    p = float(np.sum(np.abs(truth) ** 2))
    if p == 0:
        raise ValueError("NMSE undefined for a zero-power channel")
    return float(np.sum(np.abs(truth - estimate) ** 2)) / p


def nmse_db(values: Sequence[float] | np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(np.asarray(values, dtype=np.float64))
