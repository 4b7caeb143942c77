import cmath
import math

import numpy as np
import pytest

from gcd.channel import (C0, AntennaModel, MaterialModel, SystemConfig, dipole_pattern,
                         disturb_partial, extract_partial, fresnel_coefficients, nmse,
                         random_dipole, reflection_matrix, synthesize_channel)
from gcd.raytracer import ImageTracer, PathRecord, PathSet
from gcd.scene import generate_scene, point_in_building

CFG = SystemConfig.desk()
ISO = AntennaModel()


def los_pathset(length, direction=(0.0, 1.0, 0.0)):
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    tx = np.zeros(3)
    return PathSet(tx, tx + length * d, [PathRecord(length, d, d.copy())])


def oracle_entry(cfg, paths, nt, nc):
    """Direct per-entry evaluation of the path sum with scalar math."""
    lam = C0 / cfg.f_center
    k = 2 * math.pi / lam
    df = cfg.bandwidth / cfg.n_subcarriers
    total = 0j
    for amp, length, direction in paths:
        tau = length / C0
        pos = nt * (lam / 2) * np.array(cfg.array_axis)
        total += (amp * cmath.exp(-2j * math.pi * cfg.f_center * tau)
                  * cmath.exp(-2j * math.pi * nc * df * tau)
                  * cmath.exp(1j * k * float(np.dot(pos, direction))))
    return total


def test_empty_pathset_gives_zero():
    h = synthesize_channel(PathSet(np.zeros(3), np.ones(3), []), CFG, ISO, ISO)
    assert h.shape == CFG.shape
    assert not h.any()


def test_single_los_closed_form():
    d = C0 / (4 * CFG.delta_f)
    h = synthesize_channel(los_pathset(d), CFG, ISO, ISO, MaterialModel())
    amp = CFG.wavelength / (4 * math.pi * d)
    np.testing.assert_allclose(np.abs(h), amp, rtol=1e-12)
    ratio = h[0, 1:] / h[0, :-1]
    np.testing.assert_allclose(ratio, np.exp(-1j * math.pi / 2), rtol=1e-12, atol=1e-12)


def test_two_path_alternation():
    d1 = 40.0
    d2 = d1 + C0 / (2 * CFG.delta_f)
    ps = los_pathset(d1)
    ps.paths.append(PathRecord(d2, ps.paths[0].depart_dir.copy(), ps.paths[0].arrive_dir.copy()))
    h = synthesize_channel(ps, CFG, ISO, ISO)
    lam = CFG.wavelength
    terms = [(lam / (4 * math.pi * d), d, np.array([0.0, 1.0, 0.0])) for d in (d1, d2)]
    want = np.array([oracle_entry(CFG, terms, 0, nc) for nc in range(CFG.n_subcarriers)])
    np.testing.assert_allclose(h[0], want, rtol=1e-10)
    mag = np.abs(h[0])
    a1, a2 = (lam / (4 * math.pi * d) for d in (d1, d2))
    hi, lo = a1 + a2, a1 - a2
    # adjacent subcarriers alternate between the two extremes' sides
    even, odd = mag[0::2], mag[1::2]
    assert np.all((even > odd[: len(even)]) == (even[0] > odd[0]))
    assert np.all(mag <= hi + 1e-15) and np.all(mag >= lo - 1e-15)


def test_dipole_pattern():
    axis = np.array([0.0, 0.0, 1.0])
    v = dipole_pattern(axis, np.array([1.0, 0.0, 0.0]))
    assert abs(np.linalg.norm(v) - 1) < 1e-12
    np.testing.assert_allclose(v, axis, atol=1e-15)
    assert np.linalg.norm(dipole_pattern(axis, axis)) == 0
    th = math.radians(30)
    d = np.array([math.sin(th), 0.0, math.cos(th)])
    assert abs(np.linalg.norm(dipole_pattern(axis, d)) - 0.5) < 1e-12


def test_dipole_pattern_bounded():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a, d = rng.standard_normal(3), rng.standard_normal(3)
        a /= np.linalg.norm(a)
        d /= np.linalg.norm(d)
        v = dipole_pattern(a, d)
        assert np.linalg.norm(v) <= 1 + 1e-12
        assert abs(np.dot(v.real, d)) < 1e-12


def test_fresnel_limits():
    eps = 5.31
    gs, gp = fresnel_coefficients(1.0, eps)
    want = (1 - math.sqrt(eps)) / (1 + math.sqrt(eps))
    assert gs == pytest.approx(want, abs=1e-15)
    assert gp == pytest.approx(-want, abs=1e-15)
    gs, gp = fresnel_coefficients(0.0, eps)
    assert gs == pytest.approx(-1.0) and gp == pytest.approx(-1.0)
    for c in np.linspace(0, 1, 50):
        gs, gp = fresnel_coefficients(c, eps)
        assert abs(gs) <= 1 and abs(gp) <= 1


def test_reflection_matrix_transverse():
    u = np.array([1.0, -1.0, -0.3])
    n = np.array([0.0, 1.0, 0.0])
    m = reflection_matrix(u, n, 4.0)
    v = u - 2 * np.dot(u, n) * n
    v /= np.linalg.norm(v)
    # outputs are transverse to the reflected direction
    rng = np.random.default_rng(1)
    for _ in range(10):
        assert abs(np.dot(m @ rng.standard_normal(3), v)) < 1e-12


def test_extract_partial_full():
    cfg = SystemConfig.full()
    h = np.arange(16 * 256).reshape(16, 256).astype(complex) * (1 + 0.5j)
    hp = extract_partial(h, cfg)
    assert hp.shape == (4, 16)
    assert hp[0, 0] == h[0, 0]
    assert hp[3, 15] == h[12, 240]


def test_extract_partial_full_mask_and_projection():
    cfg = SystemConfig(n_subcarriers=8, n_bs_antennas=4, omega_t=range(4), omega_c=range(8))
    h = np.random.default_rng(0).standard_normal((4, 8)) + 0j
    np.testing.assert_array_equal(extract_partial(h, cfg), h)
    sc = generate_scene(1, 4, 120, 10)
    ps = ImageTracer(sc, sc.bs_position, 2).trace((30.0, 20.0, 1.5))
    full = synthesize_channel(ps, CFG, seed=3)
    part = extract_partial(full, CFG)
    for a, i in enumerate(CFG.omega_t):
        for b, j in enumerate(CFG.omega_c):
            assert part[a, b] == full[i, j]


def test_extract_partial_out_of_range():
    with pytest.raises(ValueError):
        SystemConfig(n_subcarriers=8, n_bs_antennas=4, omega_t=(0, 4), omega_c=(0,))
    with pytest.raises(ValueError):
        extract_partial(np.zeros((3, 3)), CFG)


def test_disturb_partial():
    hp = np.full((4, 16), 1.0 + 2.0j)
    np.testing.assert_array_equal(disturb_partial(hp, 0.0, 1), hp)
    big = np.ones((100, 1000), dtype=complex)
    m = disturb_partial(big, 0.1, 5).real
    assert 0.999 <= m.mean() <= 1.001
    assert 0.099 <= m.std() <= 0.101
    np.testing.assert_array_equal(disturb_partial(hp, 0.1, 9), disturb_partial(hp, 0.1, 9))
    with pytest.raises(ValueError):
        disturb_partial(hp, -0.1, 0)


def test_nmse():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((8, 32)) + 1j * rng.standard_normal((8, 32))
    assert nmse(h, h) == 0
    assert nmse(h, np.zeros_like(h)) == 1
    assert nmse(h, 2 * h) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        nmse(np.zeros_like(h), h)


def test_seed_draws_user_dipole():
    ps = los_pathset(50.0, (0.3, 0.8, -0.1))
    a = synthesize_channel(ps, CFG, seed=11)
    b = synthesize_channel(ps, CFG, user_ant=random_dipole(11))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, synthesize_channel(ps, CFG, seed=12))


def random_pathsets(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    scenes = [generate_scene(s, 6, 120, 10) for s in range(5)]
    tracers = [ImageTracer(s, s.bs_position, 2) for s in scenes]
    while len(out) < count:
        k = int(rng.integers(len(scenes)))
        rx = np.array([*rng.uniform(-60, 60, 2), rng.uniform(1, 2)])
        if point_in_building(scenes[k], rx):
            continue
        ps = tracers[k].trace(rx)
        if len(ps) >= 2:
            out.append(ps)
    return out


@pytest.fixture(scope="module")
def pathsets():
    return random_pathsets(100)


def test_linearity_in_paths(pathsets):
    ant = random_dipole(4)
    for ps in pathsets:
        half = len(ps.paths) // 2
        a = PathSet(ps.tx, ps.rx, ps.paths[:half])
        b = PathSet(ps.tx, ps.rx, ps.paths[half:])
        h = synthesize_channel(ps, CFG, ISO, ant)
        hs = synthesize_channel(a, CFG, ISO, ant) + synthesize_channel(b, CFG, ISO, ant)
        assert np.max(np.abs(h - hs)) <= 1e-12 * np.max(np.abs(h))


def test_single_path_power_and_ula_progression(pathsets):
    ant = random_dipole(8)
    for ps in pathsets:
        for p in ps.paths:
            one = PathSet(ps.tx, ps.rx, [p])
            h = synthesize_channel(one, CFG, ISO, ant)
            mag = np.abs(h)
            np.testing.assert_allclose(mag, mag[0, 0], rtol=1e-12)
            if mag[0, 0] == 0:
                continue
            r = h[1:] / h[:-1]
            np.testing.assert_allclose(r, r[0, 0], rtol=1e-12)
