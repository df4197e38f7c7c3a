"""Linear latent pose manifold and the pose / root samplers built on it.

The manifold is a principal-component model of relative joint rotations.
Latent coordinates are whitened, so a latent standard deviation of 0.1
means one tenth of the corpus spread along every retained direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text

MANIFOLD_VERSION = "1.0"
LATENT_DIM = 16
LATENT_SIGMA = 0.1
ROOT_TRANS_RANGE = 0.03
ROOT_ORIENT_RANGE = 0.01
NAIVE_POSE_RANGE = 0.26


class DegenerateCorpus(ValueError):
    def __init__(self, rank, d):
        self.rank = rank
        super().__init__(f"pose corpus has rank {rank}, fewer than the {d} latent dimensions requested")


@dataclass(frozen=True, eq=False)
class PoseManifold:
    mean_pose: np.ndarray
    basis: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64)
        gram = basis.T @ basis
        if not np.allclose(gram, np.eye(basis.shape[1]), atol=1e-8):
            raise ValueError("manifold basis columns must be orthonormal")
        object.__setattr__(self, "mean_pose", np.asarray(self.mean_pose, dtype=np.float64))
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=np.float64))

    @property
    def d(self):
        return self.basis.shape[1]

    def encode(self, theta):
        """Whitened latent code(s) of pose vector(s) (..., 3K) -> (..., d)."""
        return ((np.asarray(theta) - self.mean_pose) @ self.basis) / self.scales

    def decode(self, z):
        return self.mean_pose + (np.asarray(z) * self.scales) @ self.basis.T

    def to_dict(self):
        return {
            "version": MANIFOLD_VERSION,
            "mean": self.mean_pose.tolist(),
            "basis": self.basis.tolist(),
            "scales": self.scales.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        major = str(d.get("version", "")).split(".")[0]
        if major != MANIFOLD_VERSION.split(".")[0]:
            raise ValueError(f"unsupported manifold version {d.get('version')!r}")
        return cls(np.asarray(d["mean"]), np.asarray(d["basis"]), np.asarray(d["scales"]))

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def encode(manifold, theta):
    return manifold.encode(theta)


def decode(manifold, z):
    return manifold.decode(z)


def fit_manifold(pose_corpus, d=LATENT_DIM, rtol=1e-10):
    """Fit mean and top-``d`` principal directions of a pose corpus.

    Latent scales are the per-direction standard deviations of the corpus.
    """
    Y = np.asarray(pose_corpus, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] <= d:
        raise ValueError(f"corpus must hold more than d={d} poses")
    mean = Y.mean(axis=0)
    _, s, vt = np.linalg.svd(Y - mean, full_matrices=False)
    rank = int(np.sum(s > rtol * max(s[0], 1e-300))) if s.size and s[0] > 0 else 0
    if rank < d:
        raise DegenerateCorpus(rank, d)
    scales = s[:d] / np.sqrt(Y.shape[0] - 1)
    return PoseManifold(mean, vt[:d].T.copy(), scales)


def _per_dof(w, n_dof):
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] == n_dof:
        out = w
    elif w.shape[-1] * 3 == n_dof:
        out = np.repeat(w, 3, axis=-1)
    else:
        raise ValueError(f"confidences must have K or 3K entries, got {w.shape[-1]}")
    if np.any(out < 0) or np.any(out > 1):
        raise ValueError("confidences must lie in [0, 1]")
    return out


def sample_poses(manifold, theta_opt, confidences, sigma=LATENT_SIGMA, n=1, rng=None):
    """Latent-space pose samples merged with the input pose by joint confidence.

    Each sample decodes a latent drawn from N(encode(theta_opt), sigma^2 I)
    and is blended per DoF as ``w * theta_opt + (1 - w) * decoded``. Joint
    confidences (length K) are repeated over the three DoF of each joint.

    Returns:
        (n, 3K) array.
    """
    rng = np.random.default_rng(rng)
    theta_opt = np.asarray(theta_opt, dtype=np.float64)
    w = _per_dof(confidences, theta_opt.size)
    z0 = manifold.encode(theta_opt)
    z = z0 + sigma * rng.standard_normal((n, manifold.d))
    return w * theta_opt + (1.0 - w) * manifold.decode(z)


def sample_root(tau_opt, phi_opt, psi=1.0, n=1, rng=None):
    """Uniform root translation / orientation samples, ranges widened by ``psi``.

    Returns:
        (n, 3) translations and (n, 3) orientations.
    """
    if psi < 1:
        raise ValueError("psi must be >= 1")
    rng = np.random.default_rng(rng)
    d_tau = psi * rng.uniform(-ROOT_TRANS_RANGE, ROOT_TRANS_RANGE, (n, 3))
    d_phi = psi * rng.uniform(-ROOT_ORIENT_RANGE, ROOT_ORIENT_RANGE, (n, 3))
    return np.asarray(tau_opt) + d_tau, np.asarray(phi_opt) + d_phi


def sample_poses_naive(theta_opt, psi=1.0, n=1, rng=None):
    """Uniform per-DoF perturbations of the pose in joint-angle space."""
    if psi < 1:
        raise ValueError("psi must be >= 1")
    rng = np.random.default_rng(rng)
    theta_opt = np.asarray(theta_opt, dtype=np.float64)
    return theta_opt + psi * rng.uniform(-NAIVE_POSE_RANGE, NAIVE_POSE_RANGE, (n, theta_opt.size))


# ---------------------------------------------------------------------------
# procedural pose corpus

# coupled joint-angle patterns: {joint name: (dx, dy, dz)}
PRIMITIVES = {
    "gait": {"l_hip": (-1.0, 0, 0), "r_hip": (1.0, 0, 0), "l_shoulder": (0, 0.5, 0), "r_shoulder": (0, 0.5, 0)},
    "squat": {"l_hip": (-0.6, 0, 0), "r_hip": (-0.6, 0, 0), "l_knee": (1.0, 0, 0), "r_knee": (1.0, 0, 0),
              "l_ankle": (-0.4, 0, 0), "r_ankle": (-0.4, 0, 0)},
    "l_lift": {"l_hip": (-1.0, 0, 0), "l_knee": (1.2, 0, 0)},
    "r_lift": {"r_hip": (-1.0, 0, 0), "r_knee": (1.2, 0, 0)},
    "lean": {"spine1": (1.0, 0, 0), "spine2": (0.8, 0, 0), "neck": (-0.5, 0, 0)},
    "side_bend": {"spine1": (0, 0, 1.0), "spine2": (0, 0, 0.8)},
    "twist": {"spine1": (0, 1.0, 0), "spine2": (0, 0.8, 0)},
    "l_raise": {"l_shoulder": (0, 0, -1.0), "l_collar": (0, 0, -0.2)},
    "r_raise": {"r_shoulder": (0, 0, 1.0), "r_collar": (0, 0, 0.2)},
    "l_flex": {"l_elbow": (0, 1.0, 0)},
    "r_flex": {"r_elbow": (0, -1.0, 0)},
    "l_forward": {"l_shoulder": (1.0, 0, 0)},
    "r_forward": {"r_shoulder": (1.0, 0, 0)},
    "nod": {"neck": (1.0, 0, 0)},
    "turn": {"neck": (0, 1.0, 0)},
    "sway": {"l_hip": (0, 0, 1.0), "r_hip": (0, 0, 1.0), "spine1": (0, 0, -0.5)},
    "ankles": {"l_ankle": (1.0, 0, 0), "r_ankle": (1.0, 0, 0)},
}

# base posture and per-primitive amplitude (radians) for each family
FAMILIES = {
    "stand": {
        "base": {"l_shoulder": (0, 0, 1.25), "r_shoulder": (0, 0, -1.25), "l_elbow": (0, 0.3, 0), "r_elbow": (0, -0.3, 0)},
        "amp": {"gait": 0.35, "squat": 0.3, "l_lift": 0.25, "r_lift": 0.25, "lean": 0.25, "side_bend": 0.15,
                "twist": 0.25, "l_raise": 0.6, "r_raise": 0.6, "l_flex": 0.6, "r_flex": 0.6, "l_forward": 0.5,
                "r_forward": 0.5, "nod": 0.3, "turn": 0.4, "sway": 0.1, "ankles": 0.15},
    },
    "sit": {
        "base": {"l_hip": (-1.5, 0, 0.1), "r_hip": (-1.5, 0, -0.1), "l_knee": (1.5, 0, 0), "r_knee": (1.5, 0, 0),
                 "l_shoulder": (0, 0, 1.2), "r_shoulder": (0, 0, -1.2), "l_elbow": (0, 0.8, 0), "r_elbow": (0, -0.8, 0)},
        "amp": {"lean": 0.3, "side_bend": 0.15, "twist": 0.3, "l_raise": 0.6, "r_raise": 0.6, "l_flex": 0.6,
                "r_flex": 0.6, "l_forward": 0.5, "r_forward": 0.5, "nod": 0.3, "turn": 0.4, "ankles": 0.2,
                "squat": 0.15, "l_lift": 0.2, "r_lift": 0.2},
    },
    "reach": {
        "base": {"l_shoulder": (0, 0, 0.2), "r_shoulder": (0, 0, -1.25), "l_elbow": (0, 0.1, 0), "r_elbow": (0, -0.3, 0)},
        "amp": {"gait": 0.15, "lean": 0.2, "side_bend": 0.2, "twist": 0.25, "l_raise": 0.3, "r_raise": 0.5,
                "l_flex": 0.3, "r_flex": 0.6, "l_forward": 0.4, "r_forward": 0.4, "nod": 0.3, "turn": 0.4,
                "sway": 0.1, "ankles": 0.1},
    },
}


def _pattern(offsets, names):
    v = np.zeros((len(names), 3))
    for joint, dof in offsets.items():
        v[names.index(joint)] = dof
    return v.reshape(-1)


def pose_trajectory(template, family, n_frames, rng, frozen=(), speed=1.0, jitter=0.01, time_step=0.1, hold=None):
    """Smooth sinusoidal joint-angle trajectory from one posture family.

    Args:
        family: key of FAMILIES.
        frozen: primitive names held at a constant (random) value, e.g. to
            keep contacting limbs still.
        hold: {primitive: coefficient} pinned to an exact value for all frames.
        speed: multiplier on the oscillation frequencies.
        jitter: std of per-DoF noise on DoFs the family moves.

    Returns:
        (n_frames, 3K) poses clipped to the template's joint limits.
    """
    names = list(template.names)
    fam = FAMILIES[family]
    base = _pattern(fam["base"], names)
    t = np.arange(n_frames) * time_step
    traj = np.tile(base, (n_frames, 1))
    active = np.zeros_like(base, dtype=bool)
    for prim in sorted(fam["amp"]):
        amp = fam["amp"][prim] * rng.uniform(0.2, 1.0)
        pat = _pattern(PRIMITIVES[prim], names)
        active |= pat != 0
        offset = rng.uniform(-0.5, 0.5) * amp
        freq = speed * rng.uniform(0.05, 0.4)
        phase = rng.uniform(0, 2 * np.pi)
        if hold and prim in hold:
            coeff = np.full(n_frames, float(hold[prim]))
        elif prim in frozen:
            coeff = np.full(n_frames, offset + amp * np.sin(phase))
        else:
            coeff = offset + amp * np.sin(2 * np.pi * freq * t + phase)
        traj += coeff[:, None] * pat
    if jitter > 0:
        traj[:, active] += jitter * rng.standard_normal((n_frames, int(active.sum())))
    lo = template.joint_limits[..., 0].reshape(-1)
    hi = template.joint_limits[..., 1].reshape(-1)
    return np.clip(traj, lo, hi)


def procedural_corpus(template, n_poses=10_000, seed=0, traj_len=50):
    """Pose corpus built from many short trajectories across all families."""
    rng = np.random.default_rng(seed)
    fams = sorted(FAMILIES)
    chunks = []
    total = 0
    while total < n_poses:
        fam = fams[rng.integers(len(fams))]
        chunk = pose_trajectory(template, fam, traj_len, rng)
        chunks.append(chunk)
        total += len(chunk)
    return np.concatenate(chunks)[:n_poses]


def default_manifold(template, d=LATENT_DIM, seed=0, n_poses=10_000):
    return fit_manifold(procedural_corpus(template, n_poses, seed), d)
