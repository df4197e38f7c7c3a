"""Capsule body model: forward kinematics, surface sampling, projection and occupancy.

Conventions: camera frame with x right, y down, z forward. The template is
authored upright in that frame (head towards -y, person's left towards +x,
facing the camera along -z), so an identity root orientation places an
upright person looking at the camera.

A kinematic state is handled internally as a flat vector of length
``6 + 3K`` laid out as ``[tau, phi, theta]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import _kernels
from ._io import atomic_write_text

NUM_JOINTS = 21
NUM_VERTICES = 655
STATE_DIM = 6 + 3 * NUM_JOINTS
SCALE_MIN = 0.5
SCALE_MAX = 2.0
Z_MIN = 0.05

TEMPLATE_VERSION = "1.0"


class PointBehindCamera(ValueError):
    """Raised when a point to be projected lies at or behind the near plane."""

    def __init__(self, index, z, z_min):
        self.index = int(index)
        self.z = float(z)
        super().__init__(f"point {self.index} has z={self.z:.6g} <= z_min={z_min}")


def _check_finite(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))
        raise ValueError(f"{name} contains non-finite values at {bad[:5].tolist()}")
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_w: float
    image_h: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx <= self.image_w and 0 <= self.cy <= self.image_h):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls):
        # 225 x 225 crop with the principal point at its centre
        return cls(fx=250.0, fy=250.0, cx=112.5, cy=112.5, image_w=225.0, image_h=225.0)

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in ("fx", "fy", "cx", "cy", "image_w", "image_h")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in ("fx", "fy", "cx", "cy", "image_w", "image_h")})


# ---------------------------------------------------------------------------
# rotations


def _skew(w):
    w = np.asarray(w)
    z = np.zeros(w.shape[:-1])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], -1),
            np.stack([w[..., 2], z, -w[..., 0]], -1),
            np.stack([-w[..., 1], w[..., 0], z], -1),
        ],
        -2,
    )


def _so3_coeffs(w):
    """Return theta^2 and the Rodrigues / left-Jacobian scalar coefficients."""
    th2 = np.sum(w * w, axis=-1)
    th = np.sqrt(th2)
    small = th2 < 1e-8
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - th2 / 120.0, (safe - np.sin(safe)) / (safe**3))
    return a, b, c


def rodrigues(w):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    w = np.asarray(w, dtype=np.float64)
    a, b, _ = _so3_coeffs(w)
    W = _skew(w)
    return np.eye(3) + a[..., None, None] * W + b[..., None, None] * (W @ W)


def left_jacobian(w):
    """Left Jacobian of SO(3): R(w + d) ~= Exp(J(w) d) R(w)."""
    w = np.asarray(w, dtype=np.float64)
    _, b, c = _so3_coeffs(w)
    W = _skew(w)
    return np.eye(3) + b[..., None, None] * W + c[..., None, None] * (W @ W)


def normalize_axis_angle(w):
    """Map every axis-angle triple to the equivalent rotation with norm <= pi."""
    w = np.array(w, dtype=np.float64, copy=True)
    flat = w.reshape(-1, 3)
    n = np.linalg.norm(flat, axis=1)
    over = n > np.pi
    if np.any(over):
        k = np.floor((n[over] + np.pi) / (2 * np.pi))
        flat[over] *= ((n[over] - 2 * np.pi * k) / n[over])[:, None]
    return flat.reshape(w.shape)


# ---------------------------------------------------------------------------
# template

_JOINTS = [
    # name, parent, offset (m), radius of the bone ending here (m)
    ("pelvis", -1, (0.0, 0.0, 0.0), 0.0),
    ("l_hip", 0, (0.09, 0.06, 0.0), 0.08),
    ("r_hip", 0, (-0.09, 0.06, 0.0), 0.08),
    ("spine1", 0, (0.0, -0.12, 0.0), 0.11),
    ("l_knee", 1, (0.0, 0.40, 0.0), 0.07),
    ("r_knee", 2, (0.0, 0.40, 0.0), 0.07),
    ("spine2", 3, (0.0, -0.14, 0.0), 0.11),
    ("l_ankle", 4, (0.0, 0.40, 0.0), 0.05),
    ("r_ankle", 5, (0.0, 0.40, 0.0), 0.05),
    ("l_foot", 7, (0.0, 0.06, -0.13), 0.04),
    ("r_foot", 8, (0.0, 0.06, -0.13), 0.04),
    ("neck", 6, (0.0, -0.20, 0.0), 0.10),
    ("head", 11, (0.0, -0.18, 0.0), 0.09),
    ("l_collar", 6, (0.07, -0.15, 0.0), 0.05),
    ("r_collar", 6, (-0.07, -0.15, 0.0), 0.05),
    ("l_shoulder", 13, (0.12, 0.02, 0.0), 0.05),
    ("r_shoulder", 14, (-0.12, 0.02, 0.0), 0.05),
    ("l_elbow", 15, (0.27, 0.0, 0.0), 0.045),
    ("r_elbow", 16, (-0.27, 0.0, 0.0), 0.045),
    ("l_wrist", 17, (0.25, 0.0, 0.0), 0.04),
    ("r_wrist", 18, (-0.25, 0.0, 0.0), 0.04),
]

# per joint, per axis (x, y, z) limits in radians; used by the pose corpus
_LIMITS = {
    "pelvis": [(-0.3, 0.3), (-0.3, 0.3), (-0.3, 0.3)],
    "l_hip": [(-2.0, 0.6), (-0.6, 0.6), (-0.2, 0.8)],
    "r_hip": [(-2.0, 0.6), (-0.6, 0.6), (-0.8, 0.2)],
    "spine1": [(-0.2, 0.5), (-0.4, 0.4), (-0.3, 0.3)],
    "l_knee": [(0.0, 2.2), (-0.1, 0.1), (-0.1, 0.1)],
    "r_knee": [(0.0, 2.2), (-0.1, 0.1), (-0.1, 0.1)],
    "spine2": [(-0.2, 0.5), (-0.4, 0.4), (-0.3, 0.3)],
    "l_ankle": [(-0.5, 0.6), (-0.2, 0.2), (-0.3, 0.3)],
    "r_ankle": [(-0.5, 0.6), (-0.2, 0.2), (-0.3, 0.3)],
    "l_foot": [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
    "r_foot": [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
    "neck": [(-0.4, 0.5), (-0.6, 0.6), (-0.3, 0.3)],
    "head": [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
    "l_collar": [(-0.2, 0.2), (-0.3, 0.3), (-0.3, 0.3)],
    "r_collar": [(-0.2, 0.2), (-0.3, 0.3), (-0.3, 0.3)],
    "l_shoulder": [(-1.2, 1.2), (-1.5, 1.0), (-0.4, 1.4)],
    "r_shoulder": [(-1.2, 1.2), (-1.0, 1.5), (-1.4, 0.4)],
    "l_elbow": [(-0.2, 0.2), (0.0, 2.4), (-0.2, 0.2)],
    "r_elbow": [(-0.2, 0.2), (-2.4, 0.0), (-0.2, 0.2)],
    "l_wrist": [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
    "r_wrist": [(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)],
}

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def _perp_basis(d):
    d = d / np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2


@dataclass(eq=False)
class SkeletonTemplate:
    """Kinematic tree with one capsule per bone and a fixed surface sampling.

    ``radius[k]`` belongs to the bone running from ``parent[k]`` to joint
    ``k``. Surface vertex ``n`` sits on the bone ending at ``vertex_bone[n]``
    with cylindrical coordinates ``surface_coords[n] = (t, angle, radial)``:
    axial fraction, azimuth around the bone, and radius as a fraction of the
    capsule radius.
    """

    names: list
    parent: np.ndarray
    offset: np.ndarray
    radius: np.ndarray
    joint_limits: np.ndarray
    vertex_bone: np.ndarray
    surface_coords: np.ndarray
    surface_local: np.ndarray = field(init=False, repr=False)
    vertex_frame: np.ndarray = field(init=False, repr=False)
    bones: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.offset = _check_finite("offset", self.offset).reshape(-1, 3)
        self.radius = _check_finite("radius", self.radius)
        self.joint_limits = np.asarray(self.joint_limits, dtype=np.float64).reshape(-1, 3, 2)
        self.vertex_bone = np.asarray(self.vertex_bone, dtype=np.int64)
        self.surface_coords = _check_finite("surface_coords", self.surface_coords).reshape(-1, 3)
        K = len(self.parent)
        if K != NUM_JOINTS or len(self.names) != K:
            raise ValueError(f"template must have {NUM_JOINTS} joints, got {K}")
        if self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise ValueError("joint 0 must be the only root")
        if np.any(self.parent[1:] >= np.arange(1, K)):
            raise ValueError("parents must precede children (topological order)")
        if len(self.vertex_bone) != NUM_VERTICES:
            raise ValueError(f"template must have {NUM_VERTICES} surface points")
        if np.any(self.vertex_bone < 1) or np.any(self.vertex_bone >= K):
            raise ValueError("vertex_bone must reference non-root joints")
        self.bones = np.arange(1, K)
        local = np.empty((NUM_VERTICES, 3))
        for k in self.bones:
            sel = self.vertex_bone == k
            if not np.any(sel):
                continue
            t, ang, rad = self.surface_coords[sel].T
            e1, e2 = _perp_basis(self.offset[k])
            local[sel] = (
                t[:, None] * self.offset[k]
                + (self.radius[k] * rad)[:, None] * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
            )
        self.surface_local = local
        self.vertex_frame = self.parent[self.vertex_bone]

    @property
    def K(self):
        return len(self.parent)

    @property
    def N(self):
        return len(self.vertex_bone)

    def bone_lengths(self):
        """Rest length of every bone, indexed by child joint (entry 0 is zero)."""
        return np.linalg.norm(self.offset, axis=1)

    def to_dict(self):
        return {
            "version": TEMPLATE_VERSION,
            "units": "meters, radians",
            "joints": [
                {
                    "name": self.names[k],
                    "parent": int(self.parent[k]),
                    "offset": self.offset[k].tolist(),
                    "radius": float(self.radius[k]),
                    "limits": self.joint_limits[k].tolist(),
                }
                for k in range(self.K)
            ],
            "surface": {
                "bone": self.vertex_bone.tolist(),
                "coords": self.surface_coords.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, d):
        major = str(d.get("version", "")).split(".")[0]
        if major != TEMPLATE_VERSION.split(".")[0]:
            raise ValueError(f"unsupported template version {d.get('version')!r}")
        joints = d["joints"]
        return cls(
            names=[j["name"] for j in joints],
            parent=[j["parent"] for j in joints],
            offset=[j["offset"] for j in joints],
            radius=[j["radius"] for j in joints],
            joint_limits=[j["limits"] for j in joints],
            vertex_bone=d["surface"]["bone"],
            surface_coords=d["surface"]["coords"],
        )

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def default(cls):
        text = resources.files("scenemocap").joinpath("data/default_template.json").read_text()
        return cls.from_dict(json.loads(text))


def build_default_template():
    """Construct the shipped template from the joint table (used to generate the JSON file)."""
    names = [j[0] for j in _JOINTS]
    parent = [j[1] for j in _JOINTS]
    offset = np.array([j[2] for j in _JOINTS], dtype=np.float64)
    radius = np.array([j[3] for j in _JOINTS], dtype=np.float64)
    limits = np.array([_LIMITS[n] for n in names], dtype=np.float64)

    # split the vertex budget over bones by lateral capsule area, largest remainder
    lengths = np.linalg.norm(offset, axis=1)
    area = 2 * np.pi * radius * lengths
    share = area[1:] / area[1:].sum() * NUM_VERTICES
    counts = np.floor(share).astype(int)
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[: NUM_VERTICES - counts.sum()]] += 1

    bone, coords = [], []
    for k, n in zip(range(1, len(names)), counts):
        i = np.arange(n)
        bone.extend([k] * n)
        coords.extend(zip((i + 0.5) / n, np.mod(i * _GOLDEN_ANGLE, 2 * np.pi), np.ones(n)))
    return SkeletonTemplate(names, parent, offset, radius, limits, bone, coords)


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True, eq=False)
class KinematicState:
    """Root translation, root orientation and relative joint rotations of one body pose."""

    tau: np.ndarray
    phi: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        tau = _check_finite("tau", self.tau).reshape(3)
        phi = normalize_axis_angle(_check_finite("phi", self.phi).reshape(3))
        theta = _check_finite("theta", self.theta).reshape(-1)
        if theta.size % 3:
            raise ValueError("theta length must be a multiple of 3")
        theta = normalize_axis_angle(theta.reshape(-1, 3)).reshape(-1)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zero(cls, K=NUM_JOINTS):
        return cls(np.zeros(3), np.zeros(3), np.zeros(3 * K))

    def to_vector(self):
        return np.concatenate([self.tau, self.phi, self.theta])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(x[:3], x[3:6], x[6:])

    def to_dict(self):
        return {"tau": self.tau.tolist(), "phi": self.phi.tolist(), "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["tau"]), np.asarray(d["phi"]), np.asarray(d["theta"]))


def clamp_scale(h):
    return float(np.clip(h, SCALE_MIN, SCALE_MAX))


def _as_batch(x, h):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (x.shape[0],))
    return x, h


def fk_batch(x, h, template):
    """Forward kinematics for a batch of flat states.

    Args:
        x: (B, 6 + 3K) states.
        h: scalar or (B,) body scale.

    Returns:
        joints (B, K, 3) and global joint frames G (B, K, 3, 3). ``G[:, 0]``
        is the root orientation composed with the root joint rotation.
    """
    x, h = _as_batch(x, h)
    B, K = x.shape[0], template.K
    tau = x[:, :3]
    R_phi = rodrigues(x[:, 3:6])
    R_loc = rodrigues(x[:, 6:].reshape(B, K, 3))
    G = np.empty((B, K, 3, 3))
    X = np.empty((B, K, 3))
    G[:, 0] = R_phi @ R_loc[:, 0]
    X[:, 0] = tau
    par = template.parent
    off = template.offset
    for k in range(1, K):
        p = par[k]
        G[:, k] = G[:, p] @ R_loc[:, k]
        X[:, k] = X[:, p] + h[:, None] * (G[:, p] @ off[k])
    return X, G


def surface_from_fk(X, G, h, template, idx=None):
    """Surface vertices (B, n, 3) from FK output; ``idx`` selects a vertex subset."""
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (X.shape[0],))
    if idx is None:
        idx = slice(None)
    frame = template.vertex_frame[idx]
    local = template.surface_local[idx]
    rot = np.einsum("bnij,nj->bni", G[:, frame], local)
    return X[:, frame] + h[:, None, None] * rot


def capsules_from_fk(X, h, template):
    """Capsule segments (B, K-1, 3) x2 and radii (B, K-1) for every bone."""
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (X.shape[0],))
    bones = template.bones
    seg_a = X[:, template.parent[bones]]
    seg_b = X[:, bones]
    radii = h[:, None] * template.radius[bones][None, :]
    return seg_a, seg_b, radii


def _validate_state(state, h):
    if not np.isfinite(h) or h <= 0:
        raise ValueError(f"scale must be finite and positive, got {h}")
    vec = state.to_vector() if isinstance(state, KinematicState) else np.asarray(state, dtype=np.float64)
    return _check_finite("state", vec)


def forward_kinematics(state, scale, template):
    """Global joint positions (K, 3) of one state."""
    vec = _validate_state(state, scale)
    X, _ = fk_batch(vec, scale, template)
    return X[0]


def body_surface(state, scale, template):
    """Surface vertices (N, 3) of one state."""
    vec = _validate_state(state, scale)
    X, G = fk_batch(vec, scale, template)
    return surface_from_fk(X, G, scale, template)[0]


def project(points, cam, z_min=Z_MIN):
    """Pinhole projection of (P, 3) camera-frame points to (P, 2) pixels."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    bad = np.flatnonzero(~(z > z_min))
    if bad.size:
        i = bad[0]
        raise PointBehindCamera(i, z.reshape(-1)[i], z_min)
    u = cam.fx * pts[..., 0] / z + cam.cx
    v = cam.fy * pts[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def _candidate_points(scene, seg_a, seg_b, radii):
    """Scene points that could fall inside any of the given capsules."""
    ends = np.concatenate([seg_a.reshape(-1, 3), seg_b.reshape(-1, 3)])
    lo = ends.min(axis=0) - radii.max()
    hi = ends.max(axis=0) + radii.max()
    centre = 0.5 * (lo + hi)
    reach = 0.5 * np.linalg.norm(hi - lo) + 1e-9
    idx = scene.within_radius(centre, reach)
    pts = scene.points[idx]
    keep = np.all((pts >= lo) & (pts <= hi), axis=1)
    return pts[keep]


def inside_counts_from_fk(scene, X, h, template):
    seg_a, seg_b, radii = capsules_from_fk(X, h, template)
    cand = _candidate_points(scene, seg_a, seg_b, radii)
    return _kernels.capsule_inside_counts(cand, seg_a, seg_b, radii)


def inside_body_counts(scene, x, h, template):
    """Per-state number of scene points strictly inside any body capsule."""
    X, _ = fk_batch(x, h, template)
    return inside_counts_from_fk(scene, X, h, template)


def inside_body_count(scene, state, scale, template):
    vec = _validate_state(state, scale)
    return int(inside_body_counts(scene, vec, scale, template)[0])
