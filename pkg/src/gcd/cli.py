"""Command-line entry point: ``gcd <subcommand> ...``.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .channel import SystemConfig
from .dataset import DatasetError, generate_dataset, load_dataset, save_dataset
from .feature_store import FeatureSetError, build_feature_set, load_feature_set, save_feature_set
from .harness import (SWEEP_AXES, Prepared, Report, ScenarioSpec, SpecError, desk_spec, evaluate,
                      load_spec, prepare_scenario, run_cross_scenario, run_finetune,
                      run_single_scenario, run_sweep)
from .raytracer import TracerError
from .scene import SceneError, generate_scene, load_scene, save_scene
from .training import NumericError, Source, load_checkpoint, save_checkpoint, train

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("gcd")


def _spec(args):
    spec = load_spec(args.config) if args.config else desk_spec()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "out", None):
        over["output_dir"] = str(args.out)
    return replace(spec, **over) if over else spec


def _system(name: str) -> SystemConfig:
    if name not in ("desk", "full"):
        raise SpecError("--system must be 'desk' or 'full'")
    return getattr(SystemConfig, name)()


def cmd_scene_gen(args):
    scene = generate_scene(args.seed, args.buildings, args.side, args.bs_height)
    save_scene(scene, args.out)
    print(f"scene {scene.digest()[:12]} with {len(scene.buildings)} buildings -> {args.out}")


def cmd_build_featureset(args):
    scene = load_scene(args.scene)
    fs = build_feature_set(scene, args.step, args.height, args.max_order, args.workers)
    save_feature_set(fs, args.out)
    print(f"{fs.n_points} grid points, {int((fs.counts == 0).sum())} empty -> {args.out}")


def cmd_gen_dataset(args):
    scene = load_scene(args.scene)
    fs = load_feature_set(args.featureset)
    ds = generate_dataset(scene, fs, _system(args.system), args.samples, args.seed, args.n_max,
                          args.max_order)
    save_dataset(ds, args.out)
    print(f"{len(ds)} samples -> {args.out}")


def _source(dataset, featureset):
    ds = load_dataset(dataset)
    fs = load_feature_set(featureset)
    if ds.meta.get("feature_scene_hash") not in (None, fs.scene_hash):
        raise FeatureSetError(f"{dataset} was not built against {featureset}")
    return Source(ds, fs)


def cmd_train(args):
    spec = _spec(args)
    tr = _source(args.dataset, args.featureset)
    va = _source(args.val, args.featureset)
    if tr.dataset.cfg != spec.system:
        spec = replace(spec, system=tr.dataset.cfg)
    res = train(spec.model_config(args.kind), [tr], [va],
                replace(spec.train, seed=spec.seed), args.log)
    save_checkpoint(res.checkpoint, args.out)
    print(f"best epoch {res.checkpoint.epoch} val {res.checkpoint.best_val:.6g} -> {args.out}")


def cmd_eval(args):
    spec = _spec(args)
    ck = load_checkpoint(args.checkpoint)
    src = _source(args.dataset, args.featureset)
    n = spec.n_max if args.n is None else args.n
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    report = Report(Path(args.report).stem, meta={"checkpoint_sha256": digest})
    report.add(ck.model_cfg.kind, evaluate(ck, src, spec, n, args.position_error, args.sigma_d))
    report.save(Path(args.report).parent)
    print(report.table())


def _scenario(spec, seed, splits=("train", "val", "test")) -> Prepared:
    sc = next((s for s in (*spec.scenarios, *spec.heldout) if s.seed == seed), ScenarioSpec(seed))
    return prepare_scenario(spec, sc, splits)


def cmd_single(args):
    spec = _spec(args)
    res = run_single_scenario(spec)
    print(res.report.table())


def cmd_sweep(args):
    spec = _spec(args)
    ck = load_checkpoint(args.checkpoint)
    prep = _scenario(spec, spec.scenarios[0].seed, ("test",))
    values = None
    if args.values:
        values = [float(v) for v in args.values.split(",")]
        if args.axis in ("neighbors", "vehicles"):
            values = [int(v) for v in values]
    print(run_sweep(spec, args.axis, ck, prep, values).table())


def cmd_cross(args):
    spec = _spec(args)
    print(run_cross_scenario(spec).report.table())


def cmd_finetune(args):
    spec = _spec(args)
    ck = load_checkpoint(args.checkpoint)
    new_seed = args.new if args.new is not None else spec.heldout[0].seed
    prev_seed = args.previous if args.previous is not None else spec.scenarios[0].seed
    new = _scenario(spec, new_seed)
    prev = _scenario(spec, prev_seed, ("test",))
    print(run_finetune(spec, ck, new, prev, args.steps).table())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcd", description="Geometry-aided channel deduction pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--seed", type=int, default=None if name not in SEEDED else 0,
                       help="random seed")
        s.set_defaults(fn=fn)
        return s

    s = add("scene-gen", cmd_scene_gen, "generate a procedural scene")
    s.add_argument("--buildings", type=int, default=8)
    s.add_argument("--side", type=float, default=120.0)
    s.add_argument("--bs-height", type=float, default=10.0)
    s.add_argument("--out", type=Path, required=True)

    s = add("build-featureset", cmd_build_featureset, "ray-trace the virtual user grid")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--step", type=float, default=4.0)
    s.add_argument("--height", type=float, default=1.5)
    s.add_argument("--max-order", type=int, default=2)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", type=Path, required=True)

    s = add("gen-dataset", cmd_gen_dataset, "sample users and synthesize channels")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--featureset", type=Path, required=True)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--system", default="desk")
    s.add_argument("--n-max", type=int, default=8)
    s.add_argument("--max-order", type=int, default=2)
    s.add_argument("--out", type=Path, required=True)

    s = add("train", cmd_train, "train a network on a dataset")
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--val", type=Path, required=True)
    s.add_argument("--featureset", type=Path, required=True)
    s.add_argument("--config", type=Path, help="experiment spec (YAML/JSON)")
    s.add_argument("--kind", choices=("gcd", "cmixer"), default="gcd")
    s.add_argument("--log", type=Path, help="per-epoch CSV log")
    s.add_argument("--out", type=Path, required=True)

    s = add("eval", cmd_eval, "evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--featureset", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--n", type=int)
    s.add_argument("--position-error", type=float, default=0.0)
    s.add_argument("--sigma-d", type=float, default=0.0)
    s.add_argument("--report", type=Path, required=True, help="report path stem (.csv/.json)")

    s = add("single-scenario", cmd_single, "full single-scenario experiment")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path)

    s = add("sweep", cmd_sweep, "robustness sweep of a trained checkpoint")
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--values", help="comma-separated axis values")
    s.add_argument("--out", type=Path)

    s = add("cross-scenario", cmd_cross, "joint training and zero-shot evaluation")
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--out", type=Path)

    s = add("finetune", cmd_finetune, "finetune a checkpoint on a new scenario")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--config", type=Path, required=True)
    s.add_argument("--new", type=int, help="scenario seed to finetune on")
    s.add_argument("--previous", type=int, help="previous scenario seed to monitor")
    s.add_argument("--steps", type=int)
    s.add_argument("--out", type=Path)
    return p


# commands whose seed has a concrete default instead of deferring to a spec file
SEEDED = {"scene-gen", "gen-dataset"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SpecError, SceneError, FeatureSetError, DatasetError, TracerError, ValueError,
            OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
