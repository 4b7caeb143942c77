import math

import numpy as np
import pytest

from gcd.raytracer import (GROUND_FACE, ImageTracer, TracerError, specular_residuals,
                           trace_paths, trace_paths_bruteforce)
from gcd.scene import BuildingPrism, Scene, box_prism, generate_scene, point_in_building

EMPTY = Scene((), (0.0, 0.0, 10.0), (0.0, 0.0), 400.0)
WALL = BuildingPrism(((-100, -10), (100, -10), (100, 0), (-100, 0)), 100.0, 0)
WALL_SCENE = Scene((WALL,), (0.0, 5.0, 1.5), (0.0, 0.0), 400.0)


def blocked_scene():
    return Scene((box_prism((50, 0), 10, 10, 40, 0),), (0, 0, 10), (0, 0), 400)


def test_empty_scene_los_only():
    ps = trace_paths(EMPTY, (0, 0, 10), (100, 0, 1.5), max_order=0)
    assert len(ps) == 1
    assert ps.paths[0].length_m == pytest.approx(math.hypot(100, 8.5), abs=1e-12)
    assert ps.paths[0].length_m == pytest.approx(100.36060, abs=5e-6)


def test_empty_scene_ground_reflection():
    ps = trace_paths(EMPTY, (0, 0, 10), (100, 0, 1.5), max_order=1)
    assert [p.face_sequence for p in ps.paths] == [(), (GROUND_FACE,)]
    assert ps.paths[1].length_m == pytest.approx(math.hypot(100, 11.5), abs=1e-12)


def test_single_wall_image():
    ps = trace_paths(WALL_SCENE, (0, 5, 1.5), (10, 5, 1.5), max_order=1, ground_reflection=False)
    assert len(ps) == 2
    assert ps.paths[0].length_m == pytest.approx(10.0, abs=1e-12)
    assert ps.paths[1].length_m == pytest.approx(math.sqrt(200), abs=1e-12)
    image = np.array([0.0, -5.0, 1.5])
    assert ps.paths[1].length_m == pytest.approx(np.linalg.norm(ps.rx - image), abs=1e-12)
    np.testing.assert_allclose(ps.paths[1].interactions[0].point, [5, 0, 1.5], atol=1e-12)


def test_blocked_los():
    assert len(trace_paths(blocked_scene(), (0, 0, 10), (100, 0, 1.5), max_order=0)) == 0


def test_rejects_bad_inputs():
    with pytest.raises(TracerError):
        trace_paths(EMPTY, (0, 0, 10), (1, 1, 1), max_order=4)
    with pytest.raises(TracerError):
        trace_paths(EMPTY, (0, 0, 10), (0, 0, 10))
    s = blocked_scene()
    with pytest.raises(TracerError):
        trace_paths(s, (0, 0, 10), (50, 0, 5))
    with pytest.raises(TracerError):
        trace_paths(EMPTY, (0, 0, 10), (3, 3, -1))


def test_bruteforce_examples():
    a = trace_paths_bruteforce(EMPTY, (0, 0, 10), (100, 0, 1.5), max_order=0, angular_grid=360)
    assert len(a) == 1
    assert abs(a.paths[0].length_m - math.hypot(100, 8.5)) < 1e-6
    b = trace_paths_bruteforce(WALL_SCENE, (0, 5, 1.5), (10, 5, 1.5), max_order=1,
                               angular_grid=360, ground_reflection=False)
    assert len(b) == 2
    np.testing.assert_allclose(b.lengths, [10.0, math.sqrt(200)], atol=1e-6)
    c = trace_paths_bruteforce(blocked_scene(), (0, 0, 10), (100, 0, 1.5), max_order=0,
                               angular_grid=360)
    assert len(c) == 0


def _random_link(scene, rng):
    while True:
        p = np.array([*rng.uniform(-60, 60, 2), rng.uniform(1, 2)])
        if not point_in_building(scene, p):
            return p


@pytest.fixture(scope="module")
def traced():
    out = []
    rng = np.random.default_rng(42)
    for seed in range(6):
        sc = generate_scene(seed, 6, 120, 10)
        tracer = ImageTracer(sc, sc.bs_position, 2)
        for _ in range(10):
            rx = _random_link(sc, rng)
            out.append((sc, tracer.trace(rx)))
    return out


def test_path_invariants(traced):
    for sc, ps in traced:
        lengths = ps.lengths
        assert np.all(np.diff(lengths) >= 0)
        seqs = [p.face_sequence for p in ps.paths]
        assert len(set(seqs)) == len(seqs)
        for p in ps.paths:
            assert p.length_m > 0
            assert abs(np.linalg.norm(p.depart_dir) - 1) < 1e-12
            assert abs(np.linalg.norm(p.arrive_dir) - 1) < 1e-12
            assert p.order == len(p.interactions)
            if p.order == 0:
                # propagation convention: LoS departs and arrives along the same vector
                np.testing.assert_allclose(p.depart_dir, p.arrive_dir, atol=1e-12)
            assert np.all(specular_residuals(ps, p) < 1e-9)


def test_image_identity(traced):
    for sc, ps in traced:
        for p in ps.paths:
            img = ps.tx.copy()
            for inter in p.interactions:
                n = inter.normal
                img = img - 2 * (np.dot(img - inter.point, n)) * n
            assert abs(np.linalg.norm(ps.rx - img) - p.length_m) < 1e-9


def test_reciprocity(traced):
    for sc, ps in traced:
        back = trace_paths(sc, ps.rx, ps.tx, 2)
        np.testing.assert_allclose(np.sort(back.lengths), np.sort(ps.lengths), atol=1e-9)
        fwd = {p.face_sequence: p for p in ps.paths}
        for q in back.paths:
            p = fwd[q.face_sequence[::-1]]
            np.testing.assert_allclose(q.depart_dir, -p.arrive_dir, atol=1e-9)
            np.testing.assert_allclose(q.arrive_dir, -p.depart_dir, atol=1e-9)


def test_order_three_superset():
    sc = generate_scene(3, 5, 120, 10)
    rng = np.random.default_rng(1)
    rx = _random_link(sc, rng)
    p2 = trace_paths(sc, sc.bs_position, rx, 2)
    p3 = trace_paths(sc, sc.bs_position, rx, 3)
    s2 = {p.face_sequence for p in p2.paths}
    s3 = {p.face_sequence for p in p3.paths}
    assert s2 <= s3
    assert all(len(s) <= 3 for s in s3)


def test_tracer_reuse_matches_fresh():
    sc = generate_scene(4, 6, 120, 10)
    tracer = ImageTracer(sc, sc.bs_position, 2)
    rng = np.random.default_rng(9)
    for _ in range(5):
        rx = _random_link(sc, rng)
        a = tracer.trace(rx)
        b = trace_paths(sc, sc.bs_position, rx, 2)
        assert [p.face_sequence for p in a.paths] == [p.face_sequence for p in b.paths]
        np.testing.assert_array_equal(a.lengths, b.lengths)
