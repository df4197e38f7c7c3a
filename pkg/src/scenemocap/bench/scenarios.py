"""Procedural test scenes with ground-truth motion, contacts and 2D detections.

Every scenario places a body in front of the camera, builds box-shaped
scene geometry that touches the contacting limbs (feet on a floor, a hand
on a side wall, thighs on a seat), samples the box faces to a point cloud,
and simulates an upstream monocular estimate: 2D keypoints with pixel noise
and confidences, plus a scale-ambiguous initial 3D state with pose noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .._io import atomic_write_text, check_version
from ..contacts import annotate_trajectory, labels_from_dict, labels_to_dict
from ..kinematics import (
    STATE_DIM,
    CameraIntrinsics,
    SkeletonTemplate,
    capsules_from_fk,
    fk_batch,
    inside_counts_from_fk,
    project,
    surface_from_fk,
)
from ..manifold import default_manifold, pose_trajectory
from ..objective import Observation2D
from ..scene import SceneIndex, ScenePointCloud

SCENARIO_VERSION = "1.0"
KINDS = ("floor", "wall", "seat", "combo")
FPS = 10.0
GAMMA = 5
POINT_SPACING = 0.04
CONTACT_GAP = 0.004
# distance threshold of the contact oracle used for ground-truth labels; tighter
# than the annotation default so labelled vertices really touch the surface
LABEL_DIST = 0.03
# lag-one correlation of the simulated upstream pose errors
NOISE_CORR = 0.9

# primitives held still per kind so that contacting limbs stay put
_LEG_PRIMS = ("gait", "squat", "l_lift", "r_lift", "sway", "ankles")
_TORSO_PRIMS = ("lean", "side_bend", "twist")
_LEFT_ARM_PRIMS = ("l_raise", "l_flex", "l_forward")
_SETUP = {
    "floor": ("stand", _LEG_PRIMS),
    "wall": ("reach", _LEG_PRIMS + _TORSO_PRIMS + _LEFT_ARM_PRIMS),
    "seat": ("sit", _LEG_PRIMS),
    "combo": ("sit", _LEG_PRIMS + _TORSO_PRIMS + _LEFT_ARM_PRIMS),
}


@lru_cache(maxsize=1)
def default_template():
    return SkeletonTemplate.default()


@lru_cache(maxsize=1)
def shared_manifold():
    """Pose manifold fitted once on the procedural corpus (seed 0)."""
    return default_manifold(default_template())


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid ``lo <= p <= hi``."""

    lo: tuple
    hi: tuple

    def contains(self, pts):
        p = np.asarray(pts, dtype=np.float64)
        return np.all((p > np.asarray(self.lo)) & (p < np.asarray(self.hi)), axis=-1)


@dataclass(eq=False)
class Scenario:
    kind: str
    scene: ScenePointCloud
    cam: CameraIntrinsics
    gt_states: np.ndarray
    gt_scale: float
    gt_contacts: list
    obs: list
    phi0: np.ndarray
    solids: list
    seed: int
    occluded: np.ndarray = field(default=None)
    fps: float = FPS

    @property
    def T(self):
        return self.gt_states.shape[0]

    @property
    def index(self):
        if not hasattr(self, "_index"):
            self._index = SceneIndex(self.scene)
        return self._index

    def to_dict(self):
        return {
            "version": SCENARIO_VERSION,
            "kind": self.kind,
            "seed": int(self.seed),
            "fps": self.fps,
            "cam": self.cam.to_dict(),
            "scene": self.scene.points.tolist(),
            "gt_states": self.gt_states.tolist(),
            "gt_scale": self.gt_scale,
            "gt_contacts": labels_to_dict(self.gt_contacts),
            "obs": [o.to_dict() for o in self.obs],
            "phi0": self.phi0.tolist(),
            "solids": [[list(b.lo), list(b.hi)] for b in self.solids],
            "occluded": [] if self.occluded is None else self.occluded.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        check_version(d, SCENARIO_VERSION, "scenario")
        return cls(
            kind=d["kind"],
            scene=ScenePointCloud(np.asarray(d["scene"])),
            cam=CameraIntrinsics.from_dict(d["cam"]),
            gt_states=np.asarray(d["gt_states"], dtype=np.float64),
            gt_scale=float(d["gt_scale"]),
            gt_contacts=labels_from_dict(d["gt_contacts"]),
            obs=[Observation2D.from_dict(o) for o in d["obs"]],
            phi0=np.asarray(d["phi0"], dtype=np.float64),
            solids=[Box(tuple(lo), tuple(hi)) for lo, hi in d["solids"]],
            seed=int(d["seed"]),
            occluded=np.asarray(d.get("occluded", []), dtype=bool),
            fps=float(d.get("fps", FPS)),
        )

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# geometry


def _grid(a0, a1, b0, b1, rng, spacing=POINT_SPACING):
    na = max(2, int(round((a1 - a0) / spacing)) + 1)
    nb = max(2, int(round((b1 - b0) / spacing)) + 1)
    a, b = np.meshgrid(np.linspace(a0, a1, na), np.linspace(b0, b1, nb), indexing="ij")
    a = a.ravel() + rng.uniform(-0.25, 0.25, a.size) * spacing
    b = b.ravel() + rng.uniform(-0.25, 0.25, b.size) * spacing
    return np.clip(a, a0, a1), np.clip(b, b0, b1)


def _plane_x(x, y0, y1, z0, z1, rng):
    y, z = _grid(y0, y1, z0, z1, rng)
    return np.stack([np.full_like(y, x), y, z], axis=1)


def _plane_y(y, x0, x1, z0, z1, rng):
    x, z = _grid(x0, x1, z0, z1, rng)
    return np.stack([x, np.full_like(x, y), z], axis=1)


def _plane_z(z, x0, x1, y0, y1, rng):
    x, y = _grid(x0, x1, y0, y1, rng)
    return np.stack([x, y, np.full_like(x, z)], axis=1)


def _capsule_extent(X, h, template, bones=None, axis=1, sign=1):
    """Extreme coordinate over capsules along ``sign * axis`` (all frames)."""
    a, b, r = capsules_from_fk(X, h, template)
    if bones is not None:
        sel = [list(template.bones).index(k) for k in bones]
        a, b, r = a[:, sel], b[:, sel], r[:, sel]
    ends = np.maximum(sign * a[..., axis], sign * b[..., axis]) + r
    return sign * ends.max()


def _build_scene(kind, X, h, template, rng):
    """Scene points and solids touching the body trajectory ``X`` (T, K, 3)."""
    names = list(template.names)
    j = names.index
    root = X[:, 0].mean(axis=0)
    pts, solids = [], []
    big = 50.0

    y_floor = _capsule_extent(X, h, template, axis=1, sign=1) + CONTACT_GAP
    pts.append(_plane_y(y_floor, root[0] - 1.2, root[0] + 1.2, root[2] - 1.0, root[2] + 1.2, rng))
    solids.append(Box((-big, y_floor, 0.0), (big, y_floor + 1.0, big)))

    if kind in ("seat", "combo"):
        thigh = [j("l_hip"), j("r_hip"), j("l_knee"), j("r_knee")]
        shin = [j("l_ankle"), j("r_ankle")]
        y_top = _capsule_extent(X, h, template, bones=thigh, axis=1, sign=1) + CONTACT_GAP
        z_front = _capsule_extent(X, h, template, bones=shin, axis=2, sign=1) + CONTACT_GAP
        z_back = root[2] + 0.3
        x0, x1 = root[0] - 0.3, root[0] + 0.3
        if z_back - z_front < 0.15:
            raise _Retry("seat too shallow")
        pts += [
            _plane_y(y_top, x0, x1, z_front, z_back, rng),
            _plane_z(z_front, x0, x1, y_top, y_floor, rng),
            _plane_z(z_back, x0, x1, y_top, y_floor, rng),
            _plane_x(x0, y_top, y_floor, z_front, z_back, rng),
            _plane_x(x1, y_top, y_floor, z_front, z_back, rng),
        ]
        solids.append(Box((x0, y_top, z_front), (x1, y_floor, z_back)))

    if kind in ("wall", "combo"):
        x_wall = _capsule_extent(X, h, template, axis=0, sign=1) + CONTACT_GAP
        pts.append(_plane_x(x_wall, y_floor - 2.0, y_floor, root[2] - 1.0, root[2] + 1.0, rng))
        solids.append(Box((x_wall, -big, 0.0), (x_wall + 1.0, big, big)))

    cloud = np.concatenate(pts)
    cloud = cloud[cloud[:, 2] > 0.1]
    return ScenePointCloud(cloud), solids


class _Retry(Exception):
    pass


_STANCE = {"gait": 0.0, "l_lift": 0.0, "r_lift": 0.0}


def _flatten_feet(x, h, template):
    """Set each ankle's flexion so the foot segment lies parallel to the floor.

    Uses the first frame; the legs are held still, so the result applies to
    the whole clip.
    """
    names = list(template.names)
    for ankle, foot in (("l_ankle", "l_foot"), ("r_ankle", "r_foot")):
        a, f = names.index(ankle), names.index(foot)
        col = 6 + 3 * a
        lo, hi = template.joint_limits[a, 0]

        def slope(v):
            y = x[:1].copy()
            y[0, col:col + 3] = (v, 0.0, 0.0)
            X, _ = fk_batch(y, h, template)
            return X[0, f, 1] - X[0, a, 1]

        grid = np.linspace(lo, hi, 23)
        vals = np.array([slope(v) for v in grid])
        sign = np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))
        if sign.size == 0:
            continue
        v = brentq(slope, grid[sign[0]], grid[sign[0] + 1], xtol=1e-12)
        x[:, col:col + 3] = (v, 0.0, 0.0)
    return x


# ---------------------------------------------------------------------------
# upstream estimate simulation


def simulate_observations(joints, cam, noise_px, occluded, rng):
    """2D detections from ground-truth joints (T, K, 3).

    Visible joints get Gaussian pixel noise and confidence
    ``max(0.71, 1 - 0.05 * error_px)``; occluded joints get four times the
    noise plus a 5 px bias and a confidence drawn from U(0.05, 0.3).
    """
    T, K, _ = joints.shape
    out = []
    for t in range(T):
        uv = project(joints[t], cam)
        eps = noise_px * rng.standard_normal((K, 2))
        occ_eps = 4.0 * noise_px * rng.standard_normal((K, 2)) + 5.0 * rng.choice([-1.0, 1.0], (K, 2))
        low = rng.uniform(0.05, 0.3, K)
        err = np.where(occluded[:, None], occ_eps, eps)
        conf = np.where(occluded, low, np.maximum(0.71, 1.0 - 0.05 * np.linalg.norm(eps, axis=1)))
        out.append(Observation2D(uv + err, conf))
    return out


def _ar1(shape, corr, rng):
    """Stationary unit-variance AR(1) noise along axis 0."""
    e = rng.standard_normal(shape)
    out = np.empty(shape)
    out[0] = e[0]
    for t in range(1, shape[0]):
        out[t] = corr * out[t - 1] + np.sqrt(1.0 - corr**2) * e[t]
    return out


def initial_estimate(gt_states, gt_scale, occluded, rng, pose_noise=0.02, occluded_pose_noise=0.25,
                     orient_noise=0.02, h0=1.0, noise_corr=NOISE_CORR, root_noise=0.0):
    """Scale-ambiguous initial states with temporally correlated pose noise.

    The root translation is rescaled along its ray so that a body of scale
    ``h0`` covers the same image region as the true body. Orientation and
    joint-angle errors follow an AR(1) process with lag-one correlation
    ``noise_corr``, like the slowly drifting errors of a video pose estimator.
    """
    x = np.array(gt_states, dtype=np.float64)
    T = x.shape[0]
    K = (x.shape[1] - 6) // 3
    sd = np.where(np.repeat(occluded, 3), occluded_pose_noise, pose_noise)
    x[:, 0:3] *= h0 / gt_scale
    x[:, 0:3] += root_noise * _ar1((T, 3), noise_corr, rng)
    x[:, 3:6] += orient_noise * _ar1((T, 3), noise_corr, rng)
    x[:, 6:] += sd * _ar1((T, 3 * K), noise_corr, rng)
    return x


def make_scenario(kind="floor", T=5, noise=2.0, occlusion_rate=0.0, seed=0, pose_noise=0.02,
                  occluded_pose_noise=0.25, template=None, cam=None, max_attempts=50, label_dist=LABEL_DIST,
                  root_noise=0.0):
    """Build a seeded scenario.

    Args:
        kind: one of ``floor``, ``wall``, ``seat``, ``combo``.
        T: number of frames (sampled at 10 fps).
        noise: keypoint noise std in pixels.
        occlusion_rate: probability that a joint is occluded for the whole clip.
        pose_noise: std (rad) of the initial-estimate joint-angle noise on visible joints.
        label_dist: distance threshold (m) of the contact oracle.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    template = template or default_template()
    cam = cam or CameraIntrinsics.default()
    family, frozen = _SETUP[kind]
    ss = np.random.SeedSequence([int(seed), KINDS.index(kind)])
    s_motion, s_scene, s_obs, s_init = ss.spawn(4)
    rng = np.random.default_rng(s_motion)
    for _ in range(max_attempts):
        h = float(rng.uniform(0.85, 1.15))
        theta = pose_trajectory(template, family, T, rng, frozen=frozen, jitter=0.0, time_step=1.0 / FPS,
                                hold=_STANCE)
        x = np.zeros((T, STATE_DIM))
        x[:, 0] = rng.uniform(-0.3, 0.3)
        x[:, 1] = rng.uniform(-0.25, 0.15)
        x[:, 2] = rng.uniform(3.0, 4.5)
        x[:, 3:6] = [rng.uniform(-0.1, 0.1), rng.uniform(-0.5, 0.5), rng.uniform(-0.05, 0.05)]
        x[:, 6:] = theta
        x = _flatten_feet(x, h, template)
        X, G = fk_batch(x, h, template)
        try:
            cloud, solids = _build_scene(kind, X, h, template, np.random.default_rng(s_scene))
        except _Retry:
            continue
        index = SceneIndex(cloud)
        if np.any(inside_counts_from_fk(index, X, h, template) > GAMMA):
            continue
        V = surface_from_fk(X, G, h, template)
        labels = annotate_trajectory(V, index, dist_thresh=label_dist, dt=1.0 / FPS)
        if min(int((lab.body > 0.5).sum()) for lab in labels) == 0:
            continue
        break
    else:
        raise RuntimeError(f"could not build a consistent {kind} scenario for seed {seed}")
    rng_obs = np.random.default_rng(s_obs)
    occluded = rng_obs.random(template.K) < occlusion_rate
    obs = simulate_observations(X, cam, noise, occluded, rng_obs)
    phi0 = initial_estimate(x, h, occluded, np.random.default_rng(s_init), pose_noise, occluded_pose_noise,
                            root_noise=root_noise)
    sc = Scenario(kind, cloud, cam, x, h, labels, obs, phi0, solids, int(seed), occluded)
    sc._index = index
    return sc


def depth_offset(phi0, d):
    """Initial states pushed ``d`` metres further along the optical axis."""
    x = np.array(phi0, dtype=np.float64)
    x[:, 2] += d
    return x


__all__ = [
    "KINDS",
    "FPS",
    "GAMMA",
    "Box",
    "Scenario",
    "make_scenario",
    "simulate_observations",
    "initial_estimate",
    "depth_offset",
    "default_template",
    "shared_manifold",
]
