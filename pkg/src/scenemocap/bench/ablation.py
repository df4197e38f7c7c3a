"""Benchmark and ablation runs over seeded scenarios.

Each suite is a list of named variants, each a set of overrides on the base
``StageConfig``. Every (variant, scenario kind, seed) run yields one table
row; a summary aggregates mean and standard deviation per variant.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..kinematics import fk_batch, surface_from_fk
from ..pipeline import PipelineInputs, StageConfig, run_pipeline
from .metrics import evaluate, mpjpe, non_penetration_pct
from .scenarios import default_template, make_scenario, shared_manifold

SUMMARY_VERSION = "1.0"
SAMPLE_COUNTS = (50, 200, 1000, 2000)

SUITES = {
    "full": [("full", {})],
    "sampling_count": [(f"{s}_n{n}", {"sampler": s, "n_sam": n, "use_refine": False})
                       for s in ("manifold", "naive") for n in SAMPLE_COUNTS],
    "iterations": [(f"iter{i}", {"iterations": i, "use_refine": False}) for i in (0, 1, 2)],
    "naive_vs_manifold": [("manifold", {"use_refine": False}), ("naive", {"sampler": "naive", "use_refine": False})],
    "no_S": [("full", {}), ("no_S", {"use_sampling": False})],
    "no_R": [("full", {}), ("no_R", {"use_refine": False})],
    "no_SR": [("full", {}), ("no_SR", {"use_sampling": False, "use_refine": False})],
    "no_Lcon": [("full", {}), ("no_Lcon", {"weights": {"lambda_con": 0.0}})],
    "no_Lsli": [("full", {}), ("no_Lsli", {"weights": {"lambda_sli": 0.0}})],
    "confidence_merge": [("merge", {"iterations": 0}), ("no_merge", {"iterations": 0, "confidence_merge": False})],
}

# scenario settings a suite needs unless the caller overrides them: the sampling
# ablations run on longer, partly occluded clips, where pose sampling has room to act
_SAMPLING_SCENE = {"occlusion_rate": 0.3, "T": 20}
SUITE_SCENARIO = {
    "sampling_count": _SAMPLING_SCENE,
    "iterations": _SAMPLING_SCENE,
    "naive_vs_manifold": _SAMPLING_SCENE,
    "confidence_merge": {"occlusion_rate": 0.3},
}


def apply_overrides(cfg, overrides):
    """Copy of ``cfg`` with top-level fields replaced and ``weights``/``optimizer`` merged."""
    kw = dict(overrides)
    for nested in ("weights", "optimizer"):
        if isinstance(kw.get(nested), dict):
            kw[nested] = dataclasses.replace(getattr(cfg, nested), **kw[nested])
    return cfg.replace(**kw)


@dataclass
class AblationResult:
    suite: str
    rows: list
    summary: dict

    def to_csv(self):
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"version": SUMMARY_VERSION, "suite": self.suite, "summary": self.summary},
                          indent=1, sort_keys=True)

    def column(self, variant, name):
        return np.array([r[name] for r in self.rows if r["variant"] == variant], dtype=np.float64)


def _stage_metrics(states, h, sc, template):
    X, G = fk_batch(states, h, template)
    V = surface_from_fk(X, G, h, template)
    gX, _ = fk_batch(sc.gt_states, sc.gt_scale, template)
    return mpjpe(X, gX), non_penetration_pct(V, solids=sc.solids)


def run_one(sc, cfg, seed, template=None, manifold=None, threads=1):
    """Pipeline on one scenario; returns (TrajectoryResult, flat metrics dict)."""
    template = template or default_template()
    manifold = manifold if manifold is not None else shared_manifold()
    inp = PipelineInputs(sc.phi0, sc.obs, sc.gt_contacts, sc.index, sc.cam, template, manifold)
    res = run_pipeline(inp, cfg, seed=seed, threads=threads)
    h = res.scale
    row = evaluate(res.phi_ref, h, sc, template).to_dict()
    for name, states in (("opt", res.phi_opt), ("sam", res.phi_sam_hat)):
        row[f"mpjpe_{name}_mm"], row[f"non_penet_{name}_pct"] = _stage_metrics(states, h, sc, template)
    st2 = [w.get("stage2") for w in res.diagnostics["windows"]]
    row["flagged_frames"] = int(sum(res.flagged))
    row["max_inside_sam"] = max((max(d["inside_count"]) for d in st2 if d), default=0)
    # both the selected and the smoothed stage-II states must respect gamma on unflagged frames
    row["gamma_violations"] = int(sum(
        max(c, cs) > cfg.gamma and not f for d in st2 if d
        for c, cs, f in zip(d["inside_count"], d["inside_count_smoothed"], d["flagged"])))
    row["scale"] = float(np.mean(h))
    return res, row


def run_ablation(suite, kinds=("floor", "wall", "seat", "combo"), seeds=range(3), base_cfg=None,
                 scenario_kw=None, threads=1, cases=None):
    """Run every variant of ``suite`` on every (kind, seed) scenario.

    ``cases`` (a list of (kind, seed) pairs) replaces the kinds x seeds grid.

    ``threads`` runs independent scenario runs concurrently; results are
    collected in a fixed order so the output does not depend on it.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    base_cfg = base_cfg or StageConfig()
    skw = {**SUITE_SCENARIO.get(suite, {}), **(scenario_kw or {})}
    template, manifold = default_template(), shared_manifold()
    cases = list(cases) if cases is not None else [(k, s) for k in kinds for s in seeds]
    scen = {(k, s): make_scenario(k, seed=s, template=template, **skw) for k, s in cases}
    jobs = [(name, apply_overrides(base_cfg, ov), k, s) for name, ov in SUITES[suite] for k, s in cases]

    def job(j):
        name, cfg, k, s = j
        _, row = run_one(scen[(k, s)], cfg, s, template, manifold)
        return {"suite": suite, "variant": name, "kind": k, "seed": int(s), **row}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(job, jobs))
    else:
        rows = [job(j) for j in jobs]
    return AblationResult(suite, rows, summarize(rows))


def summarize(rows):
    """Mean and population std of every numeric column, per variant."""
    out = {}
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    skip = {"suite", "variant", "kind", "seed"}
    for v in variants:
        sel = [r for r in rows if r["variant"] == v]
        stats = {"runs": len(sel)}
        for key in sel[0]:
            if key in skip:
                continue
            vals = np.array([r[key] for r in sel], dtype=np.float64)
            stats[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        out[v] = stats
    return out


def samples_to_reach(counts, errors, target):
    """Smallest sample count at which a (count, error) curve reaches ``target``.

    Interpolates linearly in log(count) between measured points; returns
    ``inf`` if the curve never reaches the target.
    """
    counts = np.asarray(counts, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if errors[0] <= target:
        return float(counts[0])
    for i in range(1, len(counts)):
        if errors[i] <= target:
            a, b = errors[i - 1], errors[i]
            f = (a - target) / (a - b)
            return float(np.exp(np.log(counts[i - 1]) + f * (np.log(counts[i]) - np.log(counts[i - 1]))))
    return float("inf")


__all__ = ["SUITES", "SAMPLE_COUNTS", "AblationResult", "run_ablation", "run_one", "summarize",
           "samples_to_reach", "apply_overrides"]
