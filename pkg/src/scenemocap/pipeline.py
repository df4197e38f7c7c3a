"""Three-stage refinement of monocular 3D motion against a scene point cloud.

Stage I fits per-frame root translation and one shared body scale so that
the body reprojects onto the 2D keypoints while its contact vertices meet
the scene contact points. Stage II searches each frame by sampling and
keeps only candidates that do not push more than ``gamma`` scene points
inside the body. Stage III polishes all DoF by gradient descent while
staying close to the sampled solution.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from ._io import atomic_write_text, check_version
from .contacts import EffectiveContacts, effective_contacts
from .kinematics import (
    SCALE_MAX,
    SCALE_MIN,
    STATE_DIM,
    CameraIntrinsics,
    SkeletonTemplate,
    fk_batch,
    inside_counts_from_fk,
    surface_from_fk,
)
from .manifold import LATENT_SIGMA, sample_poses, sample_poses_naive, sample_root
from .objective import REFINE_DATA_WEIGHT, LossWeights, WindowObjective
from .optim import OptimizerConfig, minimize
from .scene import SceneIndex, write_ply

logger = logging.getLogger(__name__)

RESULT_VERSION = "1.0"
STATES_VERSION = "1.0"


@dataclass(frozen=True)
class StageConfig:
    """Settings of all three stages.

    ``sampler`` is ``"manifold"`` or ``"naive"``; ``confidence_merge``
    blends decoded poses with the input pose by joint confidence;
    ``use_sampling`` and ``use_refine`` switch stages II and III;
    ``keep_elites`` lets the elites of one sampling generation compete with
    the candidates redrawn around them.
    """

    T: int = 5
    n_sam: int = 1000
    U: int = 3
    iterations: int = 1
    gamma: int = 5
    psi_max: int = 10
    smoothing_sigma_frames: float = 1.0
    latent_sigma: float = LATENT_SIGMA
    sampler: str = "manifold"
    confidence_merge: bool = True
    keep_elites: bool = False
    use_sampling: bool = True
    use_refine: bool = True
    refine_data_weight: float = REFINE_DATA_WEIGHT
    stage1_param: str = "direct"
    stage1_scale_step: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.n_sam >= self.U >= 1:
            raise ValueError("need n_sam >= U >= 1")
        if self.gamma < 0 or self.iterations < 0 or self.psi_max < 1:
            raise ValueError("gamma and iterations must be >= 0, psi_max >= 1")
        if self.sampler not in ("manifold", "naive"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.stage1_param not in ("ray", "direct"):
            raise ValueError(f"unknown stage-1 parameterisation {self.stage1_param!r}")
        if self.smoothing_sigma_frames < 0:
            raise ValueError("smoothing_sigma_frames must be >= 0")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)


def gaussian_smooth_trajectory(states, sigma_frames):
    """Per-DoF Gaussian filter along time with reflective boundaries."""
    x = np.asarray(states, dtype=np.float64)
    if sigma_frames == 0 or x.shape[0] < 2:
        return x.copy()
    return gaussian_filter1d(x, sigma_frames, axis=0, mode="reflect", truncate=4.0)


def _eff_list(contacts):
    return [c if isinstance(c, EffectiveContacts) else effective_contacts(c) for c in contacts]


def _counts(scene, x, h, template):
    X, _ = fk_batch(np.atleast_2d(x), h, template)
    return inside_counts_from_fk(scene, X, h, template)


# ---------------------------------------------------------------------------
# stage I


def stage1_contact_opt(phi0, obs, contacts, scene, cam, cfg, template, h0=1.0):
    """Fit per-frame root translations and one shared scale; pose and orientation stay fixed.

    With ``cfg.stage1_param == "ray"`` the search runs over ``tau / h`` and
    ``log h``: reprojection depends on the first group only, so the contact
    term alone moves the body along the camera rays. ``"direct"`` searches
    over ``tau`` and ``h`` themselves.

    Returns:
        (states (T, D), h, diagnostics dict)
    """
    phi0 = np.asarray(phi0, dtype=np.float64)
    T = phi0.shape[0]
    w = cfg.weights.replace(lambda_sli=0.0, lambda_data=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        obj = WindowObjective(template, cam, scene, obs, contacts, w, smooth="translation")
    lo, hi = np.log(SCALE_MIN), np.log(SCALE_MAX)

    ray = cfg.stage1_param == "ray"
    # the scale coordinate is stored divided by c, so its steps are c^2 times smaller
    c = np.sqrt(cfg.stage1_scale_step)
    if not ray:
        lo, hi = SCALE_MIN / c, SCALE_MAX / c

    def unpack(v):
        h = np.exp(v[-1]) if ray else c * v[-1]
        x = phi0.copy()
        x[:, :3] = (h if ray else 1.0) * v[:-1].reshape(T, 3)
        return x, h

    def fun(v):
        x, h = unpack(v)
        f, g, gh = obj.value_and_grad(x, h)
        g_tau = g[:, :3]
        if not ray:
            return f, np.concatenate([g_tau.ravel(), [c * gh]])
        g_s = h * gh + np.sum(g_tau * x[:, :3])
        return f, np.concatenate([(h * g_tau).ravel(), [g_s]])

    def project(v):
        v = v.copy()
        v[-1] = min(max(v[-1], lo), hi)
        return v

    h0 = min(max(float(h0), SCALE_MIN), SCALE_MAX)
    if ray:
        v0 = np.concatenate([phi0[:, :3].ravel() / h0, [np.log(h0)]])
    else:
        v0 = np.concatenate([phi0[:, :3].ravel(), [h0 / c]])
    res = minimize(fun, v0, cfg.optimizer, project)
    x, h = unpack(res.x)
    h = min(max(float(h), SCALE_MIN), SCALE_MAX)
    diag = {"loss_init": res.trace[0], "loss_final": res.loss, "iterations": res.n_iter,
            "converged": res.converged}
    return x, h, diag


# ---------------------------------------------------------------------------
# stage II


def _frame_rng(seed, frame, generation, psi):
    return np.random.default_rng([int(seed), int(frame), int(generation), int(psi)])


def _draw(centres, n_each, conf, psi, rng, manifold, cfg):
    """Candidate full states around each centre state (rows of ``centres``)."""
    out = []
    w = conf if cfg.confidence_merge else np.zeros_like(conf)
    for c in centres:
        taus, phis = sample_root(c[:3], c[3:6], psi, n_each, rng)
        if cfg.sampler == "manifold":
            thetas = sample_poses(manifold, c[6:], w, cfg.latent_sigma, n_each, rng)
        else:
            thetas = sample_poses_naive(c[6:], psi, n_each, rng)
        out.append(np.concatenate([taus, phis, thetas], axis=1))
    return np.concatenate(out, axis=0)


def _evaluate(obj, t, xs, h, prev_state, prev_common, pool, threads):
    if pool is None or threads <= 1 or len(xs) < 2 * threads:
        return obj.frame_costs(t, xs, h, prev_state=prev_state, prev_common=prev_common)
    parts = np.array_split(np.arange(len(xs)), threads)
    futs = [pool.submit(obj.frame_costs, t, xs[p], h, prev_state, None, True, prev_common) for p in parts]
    res = [f.result() for f in futs]
    return np.concatenate([r[0] for r in res]), np.concatenate([r[1] for r in res])


def _elites(cost, counts, gamma, U):
    """Indices of the ``U`` lowest-cost candidates with at most ``gamma`` points inside, sorted by cost."""
    ok = np.flatnonzero((counts <= gamma) & np.isfinite(cost))
    order = ok[np.lexsort((ok, cost[ok]))]
    return order[:U]


def stage2_sampling(phi_opt, h, obs, contacts, scene, manifold, cfg, seed, template, cam,
                    prev_state=None, prev_contacts=None, frame_offset=0, threads=1):
    """Collision-constrained sampling search, one frame after another.

    For every frame: draw ``n_sam`` candidates around the stage-I state,
    keep the ``U`` cheapest ones with at most ``gamma`` scene points inside
    the body, and per iteration redraw ``n_sam // U`` candidates around each
    of them; the elites of the last generation are the cheapest admissible
    redrawn candidates (with ``cfg.keep_elites`` the previous elites compete
    too). If no first-generation candidate is admissible the root sampling
    range grows (``psi += 1``) up to ``psi_max``, after which the
    least-colliding candidate is kept and the frame is flagged. The selected
    trajectory is then Gaussian-smoothed; frames that the smoothing pushes
    back into collision keep their unsmoothed state.

    Random streams are keyed by (seed, frame, generation, psi), so the
    result does not depend on ``threads``.

    Returns:
        (smoothed states (T, D), diagnostics dict holding the unsmoothed states).
    """
    phi_opt = np.asarray(phi_opt, dtype=np.float64)
    T = phi_opt.shape[0]
    effs = _eff_list(contacts)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        obj = WindowObjective(template, cam, scene, obs, effs, cfg.weights, smooth="state", ref_states=phi_opt)
    prev_eff = None if prev_contacts is None else _eff_list([prev_contacts])[0]
    selected = np.empty_like(phi_opt)
    diag = {"psi": [], "flagged": [], "inside_count": [], "best_cost": [], "survivors_gen0": [],
            "elite_costs": []}
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for t in range(T):
            frame = frame_offset + t
            if t > 0:
                prev_common = obj.common_prev[t]
            elif prev_eff is not None:
                prev_common = np.intersect1d(effs[0].body_idx, prev_eff.body_idx)
            else:
                prev_common = np.zeros(0, dtype=np.int64)
            conf = obs[t].confidences
            flagged = False
            for psi in range(1, cfg.psi_max + 1):
                rng = _frame_rng(seed, frame, 0, psi)
                xs = _draw(phi_opt[t:t + 1], cfg.n_sam, conf, psi, rng, manifold, cfg)
                cost, counts = _evaluate(obj, t, xs, h, prev_state, prev_common, pool, threads)
                elite = _elites(cost, counts, cfg.gamma, cfg.U)
                if elite.size:
                    break
            else:
                flagged = True
            n_surv = int(np.sum((counts <= cfg.gamma) & np.isfinite(cost)))
            if flagged:
                # least-colliding candidate, ties by cost then index
                pick = np.lexsort((np.arange(len(xs)), cost, counts))[0]
                best_x, best_cost, best_count = xs[pick], cost[pick], counts[pick]
                elite_costs = []
                logger.warning("frame %d: no candidate within gamma=%d after psi=%d; keeping least-colliding",
                               frame, cfg.gamma, cfg.psi_max)
            else:
                pool_x, pool_c, pool_n = xs[elite], cost[elite], counts[elite]
                elite_costs = pool_c.tolist()
                n_each = cfg.n_sam // cfg.U
                for gen in range(1, cfg.iterations + 1):
                    rng = _frame_rng(seed, frame, gen, psi)
                    new = _draw(pool_x, n_each, conf, psi, rng, manifold, cfg)
                    c_new, n_new = _evaluate(obj, t, new, h, prev_state, prev_common, pool, threads)
                    if cfg.keep_elites:
                        new = np.concatenate([pool_x, new])
                        c_new = np.concatenate([pool_c, c_new])
                        n_new = np.concatenate([pool_n, n_new])
                    keep = _elites(c_new, n_new, cfg.gamma, cfg.U)
                    if keep.size == 0:
                        # no regenerated candidate is admissible: stay with the previous elites
                        continue
                    pool_x, pool_c, pool_n = new[keep], c_new[keep], n_new[keep]
                best_x, best_cost, best_count = pool_x[0], pool_c[0], pool_n[0]
            selected[t] = best_x
            prev_state = best_x
            diag["psi"].append(psi)
            diag["flagged"].append(flagged)
            diag["inside_count"].append(int(best_count))
            diag["best_cost"].append(float(best_cost))
            diag["survivors_gen0"].append(n_surv)
            diag["elite_costs"].append(elite_costs)
    finally:
        if pool is not None:
            pool.shutdown()

    smoothed = gaussian_smooth_trajectory(selected, cfg.smoothing_sigma_frames)
    counts_s = _counts(scene, smoothed, h, template)
    reverted = [t for t in range(T) if counts_s[t] > cfg.gamma and not diag["flagged"][t]]
    smoothed[reverted] = selected[reverted]
    diag["reverted"] = reverted
    diag["inside_count_smoothed"] = [int(c) for c in _counts(scene, smoothed, h, template)]
    diag["selected"] = selected
    return smoothed, diag


# ---------------------------------------------------------------------------
# stage III


def stage3_refine(phi_sam_hat, h, obs, contacts, scene, cfg, template, cam):
    """Gradient refinement of all DoF with the data term anchored to the sampled states.

    Returns:
        (states (T, D), diagnostics dict)
    """
    x0 = np.asarray(phi_sam_hat, dtype=np.float64)
    T = x0.shape[0]
    w = cfg.weights.replace(lambda_data=cfg.refine_data_weight)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        obj = WindowObjective(template, cam, scene, obs, contacts, w, smooth="state", ref_states=x0)

    def fun(v):
        f, g, _ = obj.value_and_grad(v.reshape(T, -1), h)
        return f, g.ravel()

    res = minimize(fun, x0.ravel(), cfg.optimizer)
    diag = {"loss_init": res.trace[0], "loss_final": res.loss, "iterations": res.n_iter,
            "converged": res.converged}
    return res.x.reshape(T, -1), diag


# ---------------------------------------------------------------------------
# full pipeline


@dataclass(eq=False)
class PipelineInputs:
    phi0: np.ndarray
    obs: list
    contacts: list
    scene: SceneIndex
    cam: CameraIntrinsics
    template: SkeletonTemplate
    manifold: object = None

    def __post_init__(self):
        self.phi0 = np.asarray(self.phi0, dtype=np.float64).reshape(-1, STATE_DIM)
        n = self.phi0.shape[0]
        if len(self.obs) != n or len(self.contacts) != n:
            raise ValueError("phi0, observations and contacts must have the same number of frames")


@dataclass(eq=False)
class TrajectoryResult:
    """Per-frame states after each stage plus diagnostics.

    ``window_scale`` holds the scale fitted for each window of ``T`` frames;
    ``scale`` repeats it per frame.
    """

    phi0: np.ndarray
    phi_opt: np.ndarray
    phi_sam_hat: np.ndarray
    phi_ref: np.ndarray
    window_scale: list
    T: int
    flagged: list
    diagnostics: dict

    @property
    def scale(self):
        return np.repeat(self.window_scale, self.T)[: len(self.phi0)]

    def to_dict(self):
        return {
            "version": RESULT_VERSION,
            "T": self.T,
            "window_scale": list(map(float, self.window_scale)),
            "flagged": list(map(bool, self.flagged)),
            "phi0": self.phi0.tolist(),
            "phi_opt": self.phi_opt.tolist(),
            "phi_sam_hat": self.phi_sam_hat.tolist(),
            "phi_ref": self.phi_ref.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d):
        check_version(d, RESULT_VERSION, "result")
        return cls(np.asarray(d["phi0"]), np.asarray(d["phi_opt"]), np.asarray(d["phi_sam_hat"]),
                   np.asarray(d["phi_ref"]), list(d["window_scale"]), int(d["T"]), list(d["flagged"]),
                   d["diagnostics"])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path):
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump_surfaces(self, out_dir, template, stage="phi_ref"):
        """Write one PLY of body surface vertices per frame; returns the paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        states = getattr(self, stage)
        paths = []
        for t, (x, h) in enumerate(zip(states, self.scale)):
            X, G = fk_batch(x, h, template)
            p = out_dir / f"{stage}_{t:04d}.ply"
            write_ply(p, surface_from_fk(X, G, h, template)[0])
            paths.append(p)
        return paths


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, float) and not np.isfinite(o):
        return None
    return o


def save_states(path, states, scale=None):
    """Write per-frame states (T, 69) and an optional scale as a versioned JSON document."""
    doc = {"version": STATES_VERSION, "states": np.asarray(states, dtype=np.float64).tolist(),
           "scale": None if scale is None else float(scale)}
    atomic_write_text(path, json.dumps(doc))


def load_states(path):
    """Inverse of ``save_states``; returns (states (T, 69), scale or None)."""
    d = json.loads(Path(path).read_text())
    check_version(d, STATES_VERSION, "states")
    x = np.asarray(d["states"], dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != STATE_DIM or not np.all(np.isfinite(x)):
        raise ValueError(f"states must be a finite (T, {STATE_DIM}) array")
    scale = d.get("scale")
    return x, None if scale is None else float(scale)


def run_pipeline(inputs, cfg=StageConfig(), seed=0, threads=1, h0=1.0):
    """Run stages I to III over consecutive windows of ``cfg.T`` frames."""
    if cfg.use_sampling and inputs.manifold is None and cfg.sampler == "manifold":
        raise ValueError("manifold sampling needs a pose manifold")
    n = inputs.phi0.shape[0]
    effs = _eff_list(inputs.contacts)
    phi_opt = np.empty_like(inputs.phi0)
    phi_sam = np.empty_like(inputs.phi0)
    phi_ref = np.empty_like(inputs.phi0)
    scales, flagged = [], []
    diag = {"config": cfg.to_dict(), "seed": int(seed), "windows": []}
    prev_state, prev_eff = None, None
    for start in range(0, n, cfg.T):
        sl = slice(start, min(start + cfg.T, n))
        obs, eff = inputs.obs[sl], effs[sl]
        wd = {"start": start}
        x1, h, wd["stage1"] = stage1_contact_opt(inputs.phi0[sl], obs, eff, inputs.scene, inputs.cam, cfg,
                                                 inputs.template, h0)
        phi_opt[sl] = x1
        if cfg.use_sampling:
            x2, d2 = stage2_sampling(x1, h, obs, eff, inputs.scene, inputs.manifold, cfg, seed, inputs.template,
                                     inputs.cam, prev_state, prev_eff, start, threads)
            prev_state = d2["selected"][-1]
            d2["selected"] = d2["selected"].tolist()
            wd["stage2"] = d2
            flagged += d2["flagged"]
        else:
            x2 = x1
            flagged += [False] * len(x1)
        phi_sam[sl] = x2
        prev_eff = eff[-1]
        if cfg.use_refine:
            x3, wd["stage3"] = stage3_refine(x2, h, obs, eff, inputs.scene, cfg, inputs.template, inputs.cam)
        else:
            x3 = x2
        phi_ref[sl] = x3
        scales.append(h)
        diag["windows"].append(wd)
    return TrajectoryResult(inputs.phi0.copy(), phi_opt, phi_sam, phi_ref, scales, cfg.T, flagged, diag)


__all__ = [
    "RESULT_VERSION",
    "StageConfig",
    "PipelineInputs",
    "TrajectoryResult",
    "gaussian_smooth_trajectory",
    "stage1_contact_opt",
    "stage2_sampling",
    "stage3_refine",
    "run_pipeline",
    "atomic_write_text",
    "save_states",
    "load_states",
]
