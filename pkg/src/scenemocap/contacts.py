"""Dense contact labels: geometric annotation, label corruption and effective-contact selection.

The geometric oracle stands in for a learned contact estimator and emits
labels in the same representation: per-vertex body probabilities and
per-point scene probabilities.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._io import atomic_write_text, check_version

logger = logging.getLogger(__name__)

LABELS_VERSION = "1.0"
DIST_THRESH = 0.05
VEL_THRESH = 0.1


@dataclass(frozen=True, eq=False)
class ContactLabels:
    body: np.ndarray
    env: np.ndarray

    def __post_init__(self):
        body = np.asarray(self.body, dtype=np.float64).reshape(-1)
        env = np.asarray(self.env, dtype=np.float64).reshape(-1)
        for name, arr in (("body", body), ("env", env)):
            if arr.size and (np.any(~np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1):
                raise ValueError(f"{name} contact probabilities must lie in [0, 1]")
        object.__setattr__(self, "body", body)
        object.__setattr__(self, "env", env)


@dataclass(frozen=True, eq=False)
class EffectiveContacts:
    body_idx: np.ndarray
    env_idx: np.ndarray

    def __post_init__(self):
        for name in ("body_idx", "env_idx"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if arr.size and (arr.min() < 0 or len(np.unique(arr)) != arr.size):
                raise ValueError(f"{name} must hold unique non-negative indices")
            object.__setattr__(self, name, arr)

    @property
    def empty(self):
        return self.body_idx.size == 0 or self.env_idx.size == 0


def effective_contacts(labels, threshold=0.5):
    """Indices whose probability strictly exceeds ``threshold``."""
    return EffectiveContacts(np.flatnonzero(labels.body > threshold), np.flatnonzero(labels.env > threshold))


def annotate_body_contacts(surface_traj, scene, dist_thresh=DIST_THRESH, vel_thresh=VEL_THRESH, dt=1.0 / 30.0):
    """Binary per-frame body labels from distance and velocity thresholds.

    A vertex is in contact when it is closer than ``dist_thresh`` to its
    nearest scene point and its speed is below ``vel_thresh``. Speed uses a
    forward difference, and a backward difference on the last frame. A
    single frame has no velocity, so only the distance test applies.

    Args:
        surface_traj: (T, N, 3) surface vertices per frame.
        scene: SceneIndex.
        dt: frame interval in seconds.

    Returns:
        (T, N) float array of 0/1 labels.
    """
    V = np.asarray(surface_traj, dtype=np.float64)
    if V.ndim == 2:
        V = V[None]
    T, N, _ = V.shape
    _, d2 = scene.nearest_many(V.reshape(-1, 3))
    near = (d2 < dist_thresh**2).reshape(T, N)
    if T == 1:
        warnings.warn("single-frame trajectory: velocity criterion skipped", RuntimeWarning, stacklevel=2)
        return near.astype(np.float64)
    vel = np.empty_like(V)
    vel[:-1] = (V[1:] - V[:-1]) / dt
    vel[-1] = (V[-1] - V[-2]) / dt
    slow = np.linalg.norm(vel, axis=-1) < vel_thresh
    return (near & slow).astype(np.float64)


def transfer_env_contacts(body_labels, surface, scene, threshold=0.5):
    """Label the nearest scene point of every contacting body vertex.

    Returns an (M,) array of 0/1 scene labels.
    """
    env = np.zeros(len(scene))
    hits = np.flatnonzero(np.asarray(body_labels) > threshold)
    if hits.size:
        idx, _ = scene.nearest_many(np.asarray(surface)[hits])
        env[idx] = 1.0
    return env


def gaussian_kernel1d(sigma, truncate=4.0):
    """Normalised 1-D Gaussian weights with radius ``int(truncate * sigma + 0.5)``."""
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def smooth_env_labels(grid_labels, sigma_bins=1.0, truncate=4.0, renormalize=True):
    """Separable 3-D Gaussian smoothing of a label grid, zero outside the grid.

    With ``renormalize``, an input that peaks at 1 yields an output rescaled
    to peak at 1 as well; without it the filter preserves total mass away
    from the grid boundary.
    """
    g = np.asarray(grid_labels, dtype=np.float64)
    if g.ndim != 3:
        raise ValueError("label grid must be 3-D")
    w = gaussian_kernel1d(sigma_bins, truncate)
    out = g
    for axis in range(3):
        out = ndimage.correlate1d(out, w, axis=axis, mode="constant", cval=0.0)
    if renormalize and g.size and g.max() == 1.0 and out.max() > 0:
        out = out / out.max()
    return out


def corrupt_labels(labels, flip_rate_fp, flip_rate_fn, rng_seed):
    """Independently flip negatives to 1 and positives to 0 at the given rates.

    Works on a 1-D probability array (positives are entries > 0.5) or on
    ContactLabels, where body and scene labels use separate streams.
    Deterministic for a fixed seed.
    """
    for r in (flip_rate_fp, flip_rate_fn):
        if not 0.0 <= r <= 1.0:
            raise ValueError("flip rates must lie in [0, 1]")
    if isinstance(labels, ContactLabels):
        ss = np.random.SeedSequence(rng_seed)
        sb, se = ss.spawn(2)
        return ContactLabels(
            _flip(labels.body, flip_rate_fp, flip_rate_fn, np.random.default_rng(sb)),
            _flip(labels.env, flip_rate_fp, flip_rate_fn, np.random.default_rng(se)),
        )
    return _flip(np.asarray(labels, dtype=np.float64), flip_rate_fp, flip_rate_fn, np.random.default_rng(rng_seed))


def _flip(p, fp, fn, rng):
    u = rng.random(p.shape)
    pos = p > 0.5
    out = p.copy()
    out[~pos & (u < fp)] = 1.0
    out[pos & (u < fn)] = 0.0
    return out


def classification_scores(pred, truth, threshold=0.5):
    """Precision, recall and accuracy of binarised predictions."""
    p = np.asarray(pred) > threshold
    t = np.asarray(truth) > threshold
    tp = np.sum(p & t)
    precision = tp / p.sum() if p.sum() else 0.0
    recall = tp / t.sum() if t.sum() else 0.0
    accuracy = np.mean(p == t) if p.size else 1.0
    return {"precision": float(precision), "recall": float(recall), "accuracy": float(accuracy)}


def annotate_trajectory(surface_traj, scene, dist_thresh=DIST_THRESH, vel_thresh=VEL_THRESH, dt=1.0 / 30.0):
    """Per-frame ContactLabels (body labels plus transferred scene labels)."""
    V = np.asarray(surface_traj, dtype=np.float64)
    body = annotate_body_contacts(V, scene, dist_thresh, vel_thresh, dt)
    return [ContactLabels(b, transfer_env_contacts(b, v, scene)) for b, v in zip(body, V)]


# ---------------------------------------------------------------------------
# serialisation


def labels_to_dict(frames):
    """JSON document for a list of per-frame ContactLabels.

    Body labels are stored densely; scene labels as the sorted indices of
    points whose probability exceeds 0.5, plus the scene size.
    """
    if not frames:
        raise ValueError("no frames to serialise")
    return {
        "version": LABELS_VERSION,
        "num_body": int(frames[0].body.size),
        "num_env": int(frames[0].env.size),
        "frames": [
            {"body": f.body.tolist(), "env_idx": np.flatnonzero(f.env > 0.5).tolist()} for f in frames
        ],
    }


def labels_from_dict(d):
    check_version(d, LABELS_VERSION, "contact label")
    M = int(d["num_env"])
    frames = []
    for f in d["frames"]:
        env = np.zeros(M)
        env[np.asarray(f["env_idx"], dtype=np.int64)] = 1.0
        frames.append(ContactLabels(np.asarray(f["body"]), env))
    return frames


def save_labels(path, frames):
    atomic_write_text(path, json.dumps(labels_to_dict(frames)))


def load_labels(path):
    return labels_from_dict(json.loads(Path(path).read_text()))
