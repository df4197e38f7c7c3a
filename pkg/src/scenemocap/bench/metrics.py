"""Evaluation metrics for predicted body trajectories.

Joint and vertex errors are reported in millimetres, translations and bone
lengths in metres. Trajectories are (T, K, 3) joints or (T, N, 3) vertices
in the camera frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..kinematics import fk_batch, surface_from_fk

PCK_THRESHOLD = 0.15
PENETRATION_EPS = 0.01
PLANE_NEIGHBOURS = 8
PLANE_REACH = 0.1
EVAL_FPS = 10.0


@dataclass(frozen=True)
class MetricReport:
    mpjpe_mm: float
    mpjpe_pa_mm: float
    pck_pct: float
    pck_pa_pct: float
    pve_mm: float
    pve_pa_mm: float
    trans_err_m: float
    bone_len_err_m: float
    non_penet_pct: float
    e_smooth: float
    sliding_err_mm: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite")
        if not (0 <= self.pck_pct <= 100 and 0 <= self.pck_pa_pct <= 100):
            raise ValueError("PCK must lie in [0, 100]")

    def to_dict(self):
        return asdict(self)


def similarity_align(pred, gt):
    """Least-squares similarity transform (rotation, scale, shift) of ``pred`` (P, 3) onto ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    a, b = pred - mp, gt - mg
    var = np.sum(a * a)
    if var == 0:
        return np.broadcast_to(mg, pred.shape).copy()
    U, S, Vt = np.linalg.svd(b.T @ a)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    s = np.trace(np.diag(S) @ D) / var
    return s * a @ R.T + mg


def _aligned(pred, gt, procrustes):
    if not procrustes:
        return np.asarray(pred, dtype=np.float64)
    return np.stack([similarity_align(p, g) for p, g in zip(pred, gt)])


def _dists(pred, gt, procrustes):
    p = _aligned(pred, gt, procrustes)
    return np.linalg.norm(p - np.asarray(gt, dtype=np.float64), axis=-1)


def mpjpe(pred_joints, gt_joints, procrustes=False):
    """Mean per-joint position error in mm."""
    return float(1000.0 * _dists(pred_joints, gt_joints, procrustes).mean())


def pck(pred_joints, gt_joints, threshold=PCK_THRESHOLD, procrustes=False):
    """Percentage of joints within ``threshold`` metres of the ground truth."""
    return float(100.0 * np.mean(_dists(pred_joints, gt_joints, procrustes) <= threshold))


def pve(pred_vertices, gt_vertices, procrustes=False):
    """Mean per-vertex surface error in mm."""
    return float(1000.0 * _dists(pred_vertices, gt_vertices, procrustes).mean())


def translation_and_bone_errors(pred_states, pred_scale, gt_states, gt_scale, template):
    """Mean root translation error and mean absolute error of the summed scaled bone lengths (m)."""
    pred_states = np.atleast_2d(pred_states)
    gt_states = np.atleast_2d(gt_states)
    trans = np.linalg.norm(pred_states[:, :3] - gt_states[:, :3], axis=1).mean()
    total = template.bone_lengths().sum()
    ph = np.broadcast_to(np.asarray(pred_scale, dtype=np.float64), (len(pred_states),))
    gh = np.broadcast_to(np.asarray(gt_scale, dtype=np.float64), (len(gt_states),))
    bone = np.mean(np.abs(ph - gh)) * total
    return float(trans), float(bone)


def penetrating_vertices(vertices, solids=None, scene=None, eps=PENETRATION_EPS):
    """Boolean mask of vertices (..., 3) that lie inside the scene.

    With ``solids`` (objects exposing ``contains``) the test is exact. For a
    raw point cloud (``scene``: SceneIndex) a vertex penetrates when it lies
    more than ``eps`` behind the plane fitted to its 8 nearest scene points,
    with the plane normal oriented towards the camera, and the nearest point
    is within 10 cm.
    """
    V = np.asarray(vertices, dtype=np.float64)
    flat = V.reshape(-1, 3)
    if solids is not None:
        mask = np.zeros(len(flat), dtype=bool)
        for s in solids:
            mask |= s.contains(flat)
        return mask.reshape(V.shape[:-1])
    if scene is None:
        raise ValueError("need solids or a scene index")
    k = min(PLANE_NEIGHBOURS, len(scene))
    dist, idx = scene.tree.query(flat, k=k)
    dist = dist.reshape(len(flat), -1)
    idx = idx.reshape(len(flat), -1)
    mask = np.zeros(len(flat), dtype=bool)
    for i in np.flatnonzero(dist[:, 0] <= PLANE_REACH):
        nb = scene.points[idx[i]]
        c = nb.mean(axis=0)
        if len(nb) < 3:
            n = flat[i] - c
            nrm = np.linalg.norm(n)
            n = n / nrm if nrm > 0 else np.array([0.0, 0.0, -1.0])
        else:
            n = np.linalg.svd(nb - c)[2][-1]
        if n @ (-c) < 0:  # point the normal at the camera
            n = -n
        mask[i] = (flat[i] - c) @ n < -eps
    return mask.reshape(V.shape[:-1])


def non_penetration_pct(surface_traj, solids=None, scene=None, eps=PENETRATION_EPS):
    """100 times the mean over frames of the fraction of non-penetrating vertices."""
    V = np.asarray(surface_traj, dtype=np.float64)
    if V.ndim == 2:
        V = V[None]
    pen = penetrating_vertices(V, solids, scene, eps)
    return float(100.0 * np.mean(1.0 - pen.mean(axis=1)))


def e_smooth(joint_traj, fps=None):
    """Mean magnitude of second-order differences of joint positions.

    In mm per frame squared, or mm/s^2 when ``fps`` is given. Zero for
    fewer than three frames.
    """
    J = np.asarray(joint_traj, dtype=np.float64)
    if J.shape[0] < 3:
        return 0.0
    acc = J[2:] - 2 * J[1:-1] + J[:-2]
    val = 1000.0 * np.linalg.norm(acc, axis=-1).mean()
    return float(val * fps**2) if fps else float(val)


def sliding_error(vertex_traj, contact_mask):
    """Mean displacement (mm) of vertices in contact in two consecutive frames.

    Args:
        vertex_traj: (T, N, 3) predicted vertices.
        contact_mask: (T, N) boolean contact labels.
    """
    V = np.asarray(vertex_traj, dtype=np.float64)
    m = np.asarray(contact_mask, dtype=bool)
    both = m[1:] & m[:-1]
    if V.shape[0] < 2 or not both.any():
        return 0.0
    d = np.linalg.norm(V[1:] - V[:-1], axis=-1)
    return float(1000.0 * d[both].mean())


def downsample(traj, fps, target=EVAL_FPS):
    """Keep every ``round(fps / target)``-th frame (all frames when fps <= target)."""
    step = max(1, int(round(fps / target)))
    return np.asarray(traj)[::step]


def evaluate(pred_states, pred_scale, scenario, template):
    """All metrics of a predicted trajectory against a scenario's ground truth."""
    x = np.atleast_2d(np.asarray(pred_states, dtype=np.float64))
    T = x.shape[0]
    ph = np.broadcast_to(np.asarray(pred_scale, dtype=np.float64), (T,))
    X, G = fk_batch(x, ph, template)
    V = surface_from_fk(X, G, ph, template)
    gX, gG = fk_batch(scenario.gt_states, scenario.gt_scale, template)
    gV = surface_from_fk(gX, gG, scenario.gt_scale, template)
    contact = np.stack([c.body > 0.5 for c in scenario.gt_contacts])
    smooth = e_smooth(X)
    fps = scenario.fps
    X, gX, V, gV, contact = (downsample(a, fps) for a in (X, gX, V, gV, contact))
    xs, gs, hs = downsample(x, fps), downsample(scenario.gt_states, fps), downsample(ph, fps)
    trans, bone = translation_and_bone_errors(xs, hs, gs, scenario.gt_scale, template)
    return MetricReport(
        mpjpe_mm=mpjpe(X, gX),
        mpjpe_pa_mm=mpjpe(X, gX, procrustes=True),
        pck_pct=pck(X, gX),
        pck_pa_pct=pck(X, gX, procrustes=True),
        pve_mm=pve(V, gV),
        pve_pa_mm=pve(V, gV, procrustes=True),
        trans_err_m=trans,
        bone_len_err_m=bone,
        non_penet_pct=non_penetration_pct(V, solids=scenario.solids),
        e_smooth=smooth,
        sliding_err_mm=sliding_error(V, contact),
    )


__all__ = [
    "MetricReport",
    "similarity_align",
    "mpjpe",
    "pck",
    "pve",
    "translation_and_bone_errors",
    "penetrating_vertices",
    "non_penetration_pct",
    "e_smooth",
    "sliding_error",
    "downsample",
    "evaluate",
]
