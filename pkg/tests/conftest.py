import numpy as np
import pytest

from gcd.channel import SystemConfig
from gcd.dataset import generate_dataset
from gcd.feature_store import build_feature_set
from gcd.harness import ExperimentSpec, ScenarioSpec, SweepSpec, FinetuneSpec
from gcd.scene import Scene, generate_scene
from gcd.training import Source, TrainConfig

SMALL = SystemConfig(n_subcarriers=8, n_bs_antennas=4, omega_t=(0, 2), omega_c=(0, 4))
TINY_MODEL = {"K": 1, "L": 1, "hidden": 16, "heads": 4}


def small_spec(**over) -> ExperimentSpec:
    base = dict(
        scenarios=(ScenarioSpec(3, n_buildings=3, area_side=60.0),),
        system=SMALL, grid_step=10.0, max_order=1, n_train=24, n_val=8, n_test=10, n_max=3,
        model=TINY_MODEL,
        train=TrainConfig(epochs=2, batch_size=8, lr_initial=1e-3, lr_decay_every=10, n_max=3),
        sweeps=SweepSpec(position_error=(0.0, 3.0), disturbance=(0.0, 0.1),
                         building_shift=(0.0, 1.0), vehicles=(0, 2)),
        finetune=FinetuneSpec(steps=4, eval_every=2, lr=1e-4, batch_size=8),
    )
    base.update(over)
    return ExperimentSpec(**base)


@pytest.fixture(scope="session")
def small_sources():
    scene = generate_scene(3, 3, 60.0, 10.0)
    fs = build_feature_set(scene, 10.0, 1.5, 1)
    tr = generate_dataset(scene, fs, SMALL, 24, 1, 3, 1)
    va = generate_dataset(scene, fs, SMALL, 8, 2, 3, 1)
    return Source(tr, fs), Source(va, fs)


@pytest.fixture(scope="session")
def los_sources():
    """Open-field scene: every user sees the BS, a learnable toy problem."""
    scene = Scene((), (0.0, 0.0, 10.0), (0.0, 0.0), 120.0)
    cfg = SystemConfig.desk()
    fs = build_feature_set(scene, 4.0, 1.5, 0)
    tr = generate_dataset(scene, fs, cfg, 50, 1, 8, 0)
    va = generate_dataset(scene, fs, cfg, 20, 2, 8, 0)
    return Source(tr, fs), Source(va, fs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
