"""Loss terms, composite objectives and their gradients.

Component losses are exposed as small functions over a single state. The
optimisers use :class:`WindowObjective`, which evaluates the same terms over
a window of frames, returns analytic gradients, and scores batches of
candidate states for the sampling stage.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import _kernels
from ._io import atomic_write_text, check_version, read_json
from .contacts import EffectiveContacts, effective_contacts
from .kinematics import (
    Z_MIN,
    KinematicState,
    PointBehindCamera,
    SkeletonTemplate,
    fk_batch,
    inside_counts_from_fk,
    left_jacobian,
    project,
    rodrigues,
    surface_from_fk,
)

logger = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    pass


@lru_cache(maxsize=1)
def _default_template():
    return SkeletonTemplate.default()


def _vec(state):
    if isinstance(state, KinematicState):
        return state.to_vector()
    return np.asarray(state, dtype=np.float64)


@dataclass(frozen=True)
class Observation2D:
    """2D keypoints (K, 2) in pixels with per-joint confidences (K,)."""

    keypoints: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        w = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if kp.shape[0] != w.shape[0]:
            raise ValueError("keypoints and confidences disagree on joint count")
        if not (np.all(np.isfinite(kp)) and np.all(np.isfinite(w))):
            raise ValueError("observations must be finite")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("confidences must lie in [0, 1]")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "confidences", w)

    def to_dict(self):
        return {"keypoints": self.keypoints.tolist(), "confidences": self.confidences.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["keypoints"]), np.asarray(d["confidences"]))


OBS_VERSION = "1.0"


def observations_to_dict(frames):
    """Versioned JSON document for a list of per-frame Observation2D."""
    return {"version": OBS_VERSION, "frames": [o.to_dict() for o in frames]}


def observations_from_dict(d):
    check_version(d, OBS_VERSION, "observation")
    return [Observation2D.from_dict(f) for f in d["frames"]]


def save_observations(path, frames):
    atomic_write_text(path, json.dumps(observations_to_dict(frames)))


def load_observations(path):
    return observations_from_dict(read_json(path))


@dataclass(frozen=True)
class LossWeights:
    lambda_2d: float = 1.0
    lambda_smooth: float = 0.01
    lambda_con: float = 0.01
    lambda_sli: float = 0.05
    lambda_data: float = 0.1

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{k} must be a non-negative real, got {v}")

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return dict(self.__dict__)


REFINE_DATA_WEIGHT = 1.0


# ---------------------------------------------------------------------------
# component losses


def loss_2d_from_joints(X, obs, cam):
    uv = project(X, cam)
    r = (uv - obs.keypoints) / np.array([cam.image_w, cam.image_h])
    return float(np.sum(obs.confidences * np.sum(r * r, axis=-1)) / len(obs.confidences))


def loss_2d(state, scale, obs, cam, template=None):
    """Confidence-weighted mean squared reprojection error, keypoints normalised by image size."""
    template = template or _default_template()
    X, _ = fk_batch(_vec(state), scale, template)
    return loss_2d_from_joints(X[0], obs, cam)


def loss_smooth(a, b):
    d = _vec(a) - _vec(b)
    return float(d @ d)


def loss_contact(surface, eff, scene, warn=True):
    """Sum over contact body vertices of the squared distance to the nearest contact scene point."""
    if eff.body_idx.size == 0 or eff.env_idx.size == 0:
        if warn:
            warnings.warn("empty effective contact set; contact loss is zero", RuntimeWarning, stacklevel=2)
        return 0.0
    V = np.asarray(surface, dtype=np.float64)[eff.body_idx]
    _, d2 = _kernels.nearest_sq(V, scene.points[eff.env_idx])
    return float(d2.sum())


def loss_sliding(v_contact, v_contact_prev):
    d = np.asarray(v_contact, dtype=np.float64) - np.asarray(v_contact_prev, dtype=np.float64)
    return float(np.sum(d * d))


def loss_data(state, ref_state):
    return loss_smooth(state, ref_state)


def _as_eff(c):
    if isinstance(c, EffectiveContacts):
        return c
    return effective_contacts(c)


def loss_opt(states, scale, obs, contacts, scene, weights, cam, template=None, smooth="translation"):
    """Window objective of the contact-based stage: reprojection, smoothness and contact terms.

    ``smooth`` selects whether consecutive-frame smoothness acts on the root
    translation only (``"translation"``) or on the whole state (``"state"``).
    """
    template = template or _default_template()
    x = np.stack([_vec(s) for s in states])
    total = 0.0
    X, G = fk_batch(x, scale, template)
    V = surface_from_fk(X, G, scale, template)
    for t in range(len(x)):
        eff = _as_eff(contacts[t])
        total += weights.lambda_2d * loss_2d_from_joints(X[t], obs[t], cam)
        if weights.lambda_con:
            total += weights.lambda_con * loss_contact(V[t], eff, scene, warn=False)
        if t > 0 and weights.lambda_smooth:
            a, b = (x[t, :3], x[t - 1, :3]) if smooth == "translation" else (x[t], x[t - 1])
            total += weights.lambda_smooth * loss_smooth(a, b)
    return float(total)


def loss_sam(state, ref_state, prev_state, scale, obs, contacts, scene, weights, cam,
             template=None, prev_contacts=None):
    """Per-frame sample cost: reprojection, whole-state smoothness, contact, sliding and data terms.

    ``prev_state`` may be None for the first frame of a window, in which case
    smoothness and sliding vanish. Sliding compares vertices that are body
    contacts in both this frame and the previous one.
    """
    template = template or _default_template()
    eff = _as_eff(contacts)
    x = _vec(state)
    X, G = fk_batch(x, scale, template)
    V = surface_from_fk(X, G, scale, template)[0]
    total = weights.lambda_2d * loss_2d_from_joints(X[0], obs, cam)
    if weights.lambda_con:
        total += weights.lambda_con * loss_contact(V, eff, scene, warn=False)
    total += weights.lambda_data * loss_data(x, ref_state)
    if prev_state is not None:
        xp = _vec(prev_state)
        total += weights.lambda_smooth * loss_smooth(x, xp)
        if weights.lambda_sli and prev_contacts is not None:
            common = np.intersect1d(eff.body_idx, _as_eff(prev_contacts).body_idx)
            if common.size:
                Xp, Gp = fk_batch(xp, scale, template)
                Vp = surface_from_fk(Xp, Gp, scale, template, idx=common)[0]
                total += weights.lambda_sli * loss_sliding(V[common], Vp)
    return float(total)


def numerical_gradient(fun, x, step=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    f0 = fun(x)
    if not np.isfinite(f0):
        raise NonFiniteLoss(f"loss is not finite at the evaluation point ({f0})")
    g = np.empty_like(x)
    e = np.zeros_like(x)
    for i in range(x.size):
        e.flat[i] = step
        g.flat[i] = (fun(x + e) - fun(x - e)) / (2 * step)
        e.flat[i] = 0.0
    return g


gradient = numerical_gradient


# ---------------------------------------------------------------------------
# window objective


class WindowObjective:
    """Composite loss over a window of T frames with analytic gradients.

    Per frame t the loss is
    ``l2d * L2D + lcon * Lcon + ldata * |x_t - ref_t|^2``; between
    consecutive frames it adds ``lsmooth * |s_t - s_{t-1}|^2`` (``s`` is the
    root translation or the whole state) and ``lsli * |V_t - V_{t-1}|^2``
    over vertices that are body contacts in both frames.
    """

    def __init__(self, template, cam, scene, obs, contacts, weights, smooth="state", ref_states=None):
        self.template = template
        self.cam = cam
        self.scene = scene
        self.obs = list(obs)
        self.eff = [_as_eff(c) for c in contacts]
        if len(self.obs) != len(self.eff):
            raise ValueError("observations and contacts must cover the same frames")
        self.weights = weights
        if smooth not in ("state", "translation"):
            raise ValueError(f"unknown smoothness mode {smooth!r}")
        self.smooth = smooth
        self.ref = None if ref_states is None else np.asarray(ref_states, dtype=np.float64)
        self.T = len(self.obs)
        self.kp = np.stack([o.keypoints for o in self.obs])
        self.conf = np.stack([o.confidences for o in self.obs])
        self.img = np.array([cam.image_w, cam.image_h])
        self.env_pts = [scene.points[e.env_idx] if not e.empty else None for e in self.eff]
        self.common_prev = [np.zeros(0, dtype=np.int64)] + [
            np.intersect1d(self.eff[t].body_idx, self.eff[t - 1].body_idx) for t in range(1, self.T)
        ]
        empty = [t for t, e in enumerate(self.eff) if e.empty]
        if empty and weights.lambda_con:
            warnings.warn(f"frames {empty} have no effective contacts; their contact loss is zero",
                          RuntimeWarning, stacklevel=2)

    # -- full window --------------------------------------------------------

    def value(self, x, h):
        return self.value_and_grad(x, h, need_grad=False)[0]

    def value_and_grad(self, x, h, need_grad=True):
        """Loss, gradient wrt states (T, D) and derivative wrt scale h."""
        w = self.weights
        tpl = self.template
        x = np.asarray(x, dtype=np.float64).reshape(self.T, -1)
        X, G = fk_batch(x, h, tpl)
        V = surface_from_fk(X, G, h, tpl)
        gX = np.zeros_like(X)
        gV = np.zeros_like(V)
        gx = np.zeros_like(x)
        total = 0.0

        # reprojection
        z = X[..., 2]
        bad = np.argwhere(~(z > Z_MIN))
        if bad.size:
            t, k = bad[0]
            raise PointBehindCamera(k, z[t, k], Z_MIN)
        cam = self.cam
        u = cam.fx * X[..., 0] / z + cam.cx
        v = cam.fy * X[..., 1] / z + cam.cy
        ru = (u - self.kp[..., 0]) / self.img[0]
        rv = (v - self.kp[..., 1]) / self.img[1]
        K = X.shape[1]
        total += w.lambda_2d * np.sum(self.conf * (ru * ru + rv * rv)) / K
        if need_grad and w.lambda_2d:
            cu = 2 * w.lambda_2d * self.conf * ru / (K * self.img[0])
            cv = 2 * w.lambda_2d * self.conf * rv / (K * self.img[1])
            gX[..., 0] += cu * cam.fx / z
            gX[..., 1] += cv * cam.fy / z
            gX[..., 2] -= (cu * cam.fx * X[..., 0] + cv * cam.fy * X[..., 1]) / (z * z)

        for t in range(self.T):
            eff = self.eff[t]
            if w.lambda_con and not eff.empty:
                Vc = V[t, eff.body_idx]
                j, d2 = _kernels.nearest_sq(Vc, self.env_pts[t])
                total += w.lambda_con * d2.sum()
                if need_grad:
                    gV[t, eff.body_idx] += 2 * w.lambda_con * (Vc - self.env_pts[t][j])
            if self.ref is not None and w.lambda_data:
                d = x[t] - self.ref[t]
                total += w.lambda_data * d @ d
                gx[t] += 2 * w.lambda_data * d
            if t == 0:
                continue
            if w.lambda_smooth:
                n = 3 if self.smooth == "translation" else x.shape[1]
                d = x[t, :n] - x[t - 1, :n]
                total += w.lambda_smooth * d @ d
                gx[t, :n] += 2 * w.lambda_smooth * d
                gx[t - 1, :n] -= 2 * w.lambda_smooth * d
            c = self.common_prev[t]
            if w.lambda_sli and c.size:
                d = V[t, c] - V[t - 1, c]
                total += w.lambda_sli * np.sum(d * d)
                gV[t, c] += 2 * w.lambda_sli * d
                gV[t - 1, c] -= 2 * w.lambda_sli * d

        total = float(total)
        if not np.isfinite(total):
            raise NonFiniteLoss(f"window loss is {total}")
        if not need_grad:
            return total, None, None
        g_state, g_h = self._backprop(x, h, X, G, V, gX, gV)
        return total, gx + g_state, g_h

    def _backprop(self, x, h, X, G, V, gX, gV):
        """Chain point-position gradients back to (tau, phi, theta) and h."""
        tpl = self.template
        T, K = X.shape[:2]
        par = tpl.parent
        tau = x[:, :3]
        out = np.zeros_like(x)
        out[:, :3] = gX.sum(axis=1) + gV.sum(axis=1)
        g_h = (np.einsum("tkc,tkc->", gX, X - tau[:, None]) + np.einsum("tnc,tnc->", gV, V - tau[:, None])) / h

        # per-frame force and moment sums, keyed by the joint frame each point rides on
        S = np.zeros((T, K, 3))
        Q = np.zeros((T, K, 3))
        jf = par[1:]
        np.add.at(S, (slice(None), jf), gX[:, 1:])
        np.add.at(Q, (slice(None), jf), np.cross(X[:, 1:], gX[:, 1:]))
        vf = tpl.vertex_frame
        np.add.at(S, (slice(None), vf), gV)
        np.add.at(Q, (slice(None), vf), np.cross(V, gV))
        for k in range(K - 1, 0, -1):
            S[:, par[k]] += S[:, k]
            Q[:, par[k]] += Q[:, k]
        moment = Q - np.cross(X, S)  # about each joint centre

        theta = x[:, 6:].reshape(T, K, 3)
        Jl = left_jacobian(theta)
        Gp = np.empty((T, K, 3, 3))
        Gp[:, 0] = rodrigues(x[:, 3:6])
        Gp[:, 1:] = G[:, par[1:]]
        a = np.einsum("tkji,tkj->tki", Gp, moment)
        out[:, 6:] = np.einsum("tkji,tkj->tki", Jl, a).reshape(T, -1)
        out[:, 3:6] = np.einsum("tji,tj->ti", left_jacobian(x[:, 3:6]), moment[:, 0])
        return out, g_h

    # -- batched per-frame scoring ----------------------------------------

    def frame_costs(self, t, xs, h, prev_state=None, ref_state=None, with_collisions=True, prev_common=None):
        """Per-frame cost of each candidate state in ``xs`` (B, D).

        The previous frame's state enters the smoothness and sliding terms;
        ``ref_state`` (defaults to this frame's reference) enters the data
        term. Candidates with a joint behind the near plane get an infinite
        cost. ``prev_common`` overrides the vertices shared with the previous
        frame's contacts (needed when that frame lies outside the window).

        Returns:
            costs (B,) and, if requested, inside-body scene point counts (B,).
        """
        w = self.weights
        tpl = self.template
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        B = xs.shape[0]
        X, G = fk_batch(xs, h, tpl)
        z = X[..., 2]
        valid = np.all(z > Z_MIN, axis=1)
        zs = np.where(valid[:, None], z, 1.0)
        cam = self.cam
        ru = (cam.fx * X[..., 0] / zs + cam.cx - self.kp[t, :, 0]) / self.img[0]
        rv = (cam.fy * X[..., 1] / zs + cam.cy - self.kp[t, :, 1]) / self.img[1]
        cost = w.lambda_2d * np.sum(self.conf[t] * (ru * ru + rv * rv), axis=1) / X.shape[1]

        eff = self.eff[t]
        if prev_common is None:
            prev_common = self.common_prev[t]
        need_sli = prev_state is not None and w.lambda_sli and prev_common.size
        if (w.lambda_con and not eff.empty) or need_sli:
            V = surface_from_fk(X, G, h, tpl, idx=eff.body_idx)
            if w.lambda_con and not eff.empty:
                _, d2 = _kernels.nearest_sq(V.reshape(-1, 3), self.env_pts[t])
                cost += w.lambda_con * d2.reshape(B, -1).sum(axis=1)
            if need_sli:
                c = prev_common
                pos = np.searchsorted(eff.body_idx, c)
                Xp, Gp = fk_batch(prev_state, h, tpl)
                Vp = surface_from_fk(Xp, Gp, h, tpl, idx=c)
                d = V[:, pos] - Vp
                cost += w.lambda_sli * np.sum(d * d, axis=(1, 2))

        ref = ref_state if ref_state is not None else (None if self.ref is None else self.ref[t])
        if ref is not None and w.lambda_data:
            d = xs - ref
            cost += w.lambda_data * np.einsum("bi,bi->b", d, d)
        if prev_state is not None and w.lambda_smooth:
            n = 3 if self.smooth == "translation" else xs.shape[1]
            d = xs[:, :n] - np.asarray(prev_state)[:n]
            cost += w.lambda_smooth * np.einsum("bi,bi->b", d, d)
        cost = np.where(valid, cost, np.inf)
        if not with_collisions:
            return cost
        counts = inside_counts_from_fk(self.scene, X, h, tpl)
        return cost, counts


__all__ = [
    "Observation2D",
    "LossWeights",
    "NonFiniteLoss",
    "REFINE_DATA_WEIGHT",
    "loss_2d",
    "loss_smooth",
    "loss_contact",
    "loss_sliding",
    "loss_data",
    "loss_opt",
    "loss_sam",
    "numerical_gradient",
    "gradient",
    "WindowObjective",
    "observations_to_dict",
    "observations_from_dict",
    "save_observations",
    "load_observations",
]
