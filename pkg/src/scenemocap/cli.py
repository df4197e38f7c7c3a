"""Command-line entry point: ``scenemocap <command> --config run.json [options]``.

Commands:
    scenario   write a synthetic scenario (scene, observations, contacts,
               initial states, ground truth) plus a ready-to-run config
    annotate   label body/scene contacts along a trajectory
    optimize   run the three-stage refinement on one sequence
    bench      evaluate the full method on synthetic scenarios
    ablate     run one ablation suite

Every run is determined by its config document, ``--set`` overrides and the
seed. Exit codes: 0 success, 1 runtime failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text, check_version, read_json
from .contacts import DIST_THRESH, VEL_THRESH, annotate_trajectory, load_labels, save_labels
from .kinematics import CameraIntrinsics, SkeletonTemplate, fk_batch, surface_from_fk
from .manifold import PoseManifold
from .objective import load_observations, save_observations
from .pipeline import PipelineInputs, StageConfig, load_states, run_pipeline, save_states
from .scene import SceneFormatError, SceneIndex, load_cloud, write_ply

logger = logging.getLogger("scenemocap")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
CONFIG_VERSION = "1.0"
COMMANDS = ("scenario", "annotate", "optimize", "bench", "ablate")
PATH_KEYS = ("scene", "observations", "contacts", "init", "trajectory", "template", "manifold", "camera")


class InputError(Exception):
    """Invalid configuration or input file (exit code 2)."""


@dataclass
class RunConfig:
    """Parsed run configuration.

    ``options`` holds the command-specific keys of the config document (file
    paths already resolved against the config's directory).
    """

    command: str
    seed: int
    out: Path
    threads: int = 1
    stage: StageConfig = field(default_factory=StageConfig)
    options: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# configuration


def parse_value(text):
    """JSON literal if it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(doc, dotted, value):
    """Set ``doc["a"]["b"] = value`` for ``dotted == "a.b"``, creating levels as needed."""
    keys = dotted.split(".")
    if not all(keys):
        raise InputError(f"bad override key {dotted!r}")
    node = doc
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise InputError(f"override {dotted!r}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def _load_document(path):
    if path is None:
        return {"version": CONFIG_VERSION}, Path.cwd()
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        doc = read_json(path)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: config must be a JSON object")
    try:
        check_version(doc, CONFIG_VERSION, "config")
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    return doc, path.parent


def build_config(args):
    """RunConfig from parsed command-line arguments."""
    doc, base = _load_document(args.config)
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise InputError(f"override {item!r} is not of the form key=value")
        set_dotted(doc, key.strip(), parse_value(val))
    seed = args.seed if args.seed is not None else doc.get("seed")
    if seed is None:
        raise InputError("a seed is required (--seed or 'seed' in the config)")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise InputError(f"seed must be a non-negative integer, got {seed!r}")
    threads = args.threads if args.threads is not None else doc.get("threads", 1)
    if not isinstance(threads, int) or threads < 1:
        raise InputError("threads must be a positive integer")
    out = args.out or doc.get("out")
    if out is None:
        raise InputError("an output directory is required (--out or 'out' in the config)")
    try:
        stage = StageConfig.from_dict(doc.get("stage", {}))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid stage config: {exc}") from None
    options = {k: v for k, v in doc.items() if k not in ("version", "seed", "threads", "out", "stage")}
    for k in PATH_KEYS:
        if isinstance(options.get(k), str):
            options[k] = (base / options[k]).resolve()
    return RunConfig(args.command, int(seed), Path(out), threads, stage, options)


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.options.get(k) is None]
    if missing:
        raise InputError(f"{cfg.command}: missing config keys {missing}")
    for k in keys:
        v = cfg.options[k]
        if isinstance(v, Path) and not v.is_file():
            raise InputError(f"{k} file not found: {v}")


def _load(what, fn, path):
    try:
        return fn(path)
    except (SceneFormatError, InputError):
        raise
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {what} file {path}: {exc}") from None


def _template(cfg):
    if cfg.options.get("template") is None:
        return SkeletonTemplate.default()
    _require(cfg, "template")
    return _load("template", SkeletonTemplate.load, cfg.options["template"])


def _camera(cfg):
    cam = cfg.options.get("camera")
    if cam is None:
        return CameraIntrinsics.default()
    if isinstance(cam, Path):
        _require(cfg, "camera")
        cam = _load("camera", read_json, cam)
    try:
        return CameraIntrinsics.from_dict(cam)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"invalid camera: {exc}") from None


def _scenario_kwargs(cfg):
    kw = dict(cfg.options.get("scenario", {}))
    if not isinstance(kw, dict):
        raise InputError("'scenario' must be an object")
    return kw


def _cases(cfg):
    from .bench.scenarios import KINDS

    kinds = cfg.options.get("kinds", list(KINDS))
    seeds = cfg.options.get("seeds")
    if seeds is None:
        seeds = list(range(cfg.seed, cfg.seed + int(cfg.options.get("n_seeds", 1))))
    bad = [k for k in kinds if k not in KINDS]
    if bad:
        raise InputError(f"unknown scenario kinds {bad}")
    return [(k, int(s)) for k in kinds for s in seeds]


# ---------------------------------------------------------------------------
# commands


def cmd_scenario(cfg):
    """Write a synthetic scenario as separate input files plus an optimize config."""
    from .bench.scenarios import LABEL_DIST, make_scenario

    kind = cfg.options.get("kind", "floor")
    try:
        sc = make_scenario(kind, seed=cfg.seed, **_scenario_kwargs(cfg))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid scenario settings: {exc}") from None
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_ply(out / "scene.ply", sc.scene.points)
    atomic_write_text(out / "camera.json", json.dumps(sc.cam.to_dict(), indent=1))
    save_observations(out / "observations.json", sc.obs)
    save_labels(out / "contacts.json", sc.gt_contacts)
    save_states(out / "init.json", sc.phi0)
    save_states(out / "ground_truth.json", sc.gt_states, sc.gt_scale)
    sc.save(out / "scenario.json")
    run_cfg = {
        "version": CONFIG_VERSION,
        "seed": cfg.seed,
        "scene": "scene.ply",
        "camera": "camera.json",
        "observations": "observations.json",
        "contacts": "contacts.json",
        "init": "init.json",
        "stage": {},
    }
    atomic_write_text(out / "config.json", json.dumps(run_cfg, indent=1, sort_keys=True))
    ann_cfg = {"version": CONFIG_VERSION, "seed": cfg.seed, "scene": "scene.ply",
               "trajectory": "ground_truth.json", "fps": sc.fps,
               "dist_thresh": _scenario_kwargs(cfg).get("label_dist", LABEL_DIST)}
    atomic_write_text(out / "annotate.json", json.dumps(ann_cfg, indent=1, sort_keys=True))
    logger.info("wrote %s scenario (seed %d, %d frames) to %s", kind, cfg.seed, sc.T, out)
    return EXIT_OK


def cmd_annotate(cfg):
    """Contact labels for a trajectory against a scene cloud."""
    _require(cfg, "scene", "trajectory")
    cloud = _load("scene", load_cloud, cfg.options["scene"])
    states, scale = _load("trajectory", load_states, cfg.options["trajectory"])
    if scale is None:
        scale = cfg.options.get("scale")
    if scale is None:
        raise InputError("trajectory has no scale; set 'scale' in the config")
    template = _template(cfg)
    X, G = fk_batch(states, float(scale), template)
    V = surface_from_fk(X, G, float(scale), template)
    fps = float(cfg.options.get("fps", 30.0))
    labels = annotate_trajectory(V, SceneIndex(cloud), float(cfg.options.get("dist_thresh", DIST_THRESH)),
                                 float(cfg.options.get("vel_thresh", VEL_THRESH)), 1.0 / fps)
    save_labels(cfg.out / "contacts.json", labels)
    counts = [int((lab.body > 0.5).sum()) for lab in labels]
    logger.info("annotated %d frames, body contacts per frame %s", len(labels), counts)
    return EXIT_OK


def cmd_optimize(cfg):
    """Run the pipeline on one sequence; writes result.json and optional PLY dumps."""
    _require(cfg, "scene", "observations", "contacts", "init")
    cloud = _load("scene", load_cloud, cfg.options["scene"])
    obs = _load("observations", load_observations, cfg.options["observations"])
    contacts = _load("contacts", load_labels, cfg.options["contacts"])
    phi0, _ = _load("init", load_states, cfg.options["init"])
    template = _template(cfg)
    cam = _camera(cfg)
    if cfg.options.get("manifold") is not None:
        _require(cfg, "manifold")
        manifold = _load("manifold", PoseManifold.load, cfg.options["manifold"])
    else:
        from .bench.scenarios import shared_manifold

        manifold = shared_manifold()
    if any(c.env.size != len(cloud) for c in contacts):
        raise InputError("contact labels do not match the scene size")
    if any(c.body.size != template.N for c in contacts):
        raise InputError("contact labels do not match the body template")
    try:
        inputs = PipelineInputs(phi0, obs, contacts, SceneIndex(cloud), cam, template, manifold)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    res = run_pipeline(inputs, cfg.stage, seed=cfg.seed, threads=cfg.threads,
                       h0=float(cfg.options.get("h0", 1.0)))
    res.save(cfg.out / "result.json")
    if cfg.options.get("dump_ply", False):
        res.dump_surfaces(cfg.out / "ply", template)
    n_flag = int(sum(res.flagged))
    logger.info("optimised %d frames, scale %s, %d flagged", len(phi0), np.round(res.window_scale, 4), n_flag)
    return EXIT_OK


def _write_tables(out, stem, result):
    atomic_write_text(out / f"{stem}.csv", result.to_csv())
    atomic_write_text(out / f"{stem}.json", result.to_json())


def cmd_bench(cfg):
    """Metrics of the full method on synthetic scenarios (one CSV row per scenario)."""
    from .bench.ablation import run_ablation

    try:
        res = run_ablation("full", base_cfg=cfg.stage, scenario_kw=_scenario_kwargs(cfg), threads=cfg.threads,
                           cases=_cases(cfg))
    except TypeError as exc:
        raise InputError(f"invalid scenario settings: {exc}") from None
    _write_tables(cfg.out, "bench", res)
    logger.info("bench: %d runs, mean MPJPE %.2f mm", len(res.rows),
                res.summary["full"]["mpjpe_mm"]["mean"])
    return EXIT_OK


def cmd_ablate(cfg):
    """One ablation suite; writes <suite>.csv and <suite>.json."""
    from .bench.ablation import SUITES, run_ablation

    suite = cfg.options.get("suite")
    if suite not in SUITES:
        raise InputError(f"unknown or missing suite {suite!r}; choose from {sorted(SUITES)}")
    try:
        res = run_ablation(suite, base_cfg=cfg.stage, scenario_kw=_scenario_kwargs(cfg), threads=cfg.threads,
                           cases=_cases(cfg))
    except TypeError as exc:
        raise InputError(f"invalid scenario settings: {exc}") from None
    _write_tables(cfg.out, suite, res)
    for variant, stats in res.summary.items():
        logger.info("%s: MPJPE %.2f +- %.2f mm", variant, stats["mpjpe_mm"]["mean"], stats["mpjpe_mm"]["std"])
    return EXIT_OK


HANDLERS = {
    "scenario": cmd_scenario,
    "annotate": cmd_annotate,
    "optimize": cmd_optimize,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


# ---------------------------------------------------------------------------
# entry point


def make_parser():
    parser = argparse.ArgumentParser(prog="scenemocap", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__.splitlines()[0])
        p.add_argument("--config", help="run config (JSON)")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field by dotted key, e.g. stage.n_sam=200")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name == "scenario":
            p.add_argument("--kind", help="floor, wall, seat or combo")
        if name == "ablate":
            p.add_argument("--suite", help="ablation suite name")
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    for flag in ("kind", "suite"):
        if getattr(args, flag, None) is not None:
            args.set = (args.set or []) + [f"{flag}={json.dumps(getattr(args, flag))}"]
    try:
        cfg = build_config(args)
        return HANDLERS[args.command](cfg)
    except (InputError, SceneFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
