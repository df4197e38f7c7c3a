"""Scene point clouds, exact nearest-neighbour queries and the frustum voxel grid."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._io import atomic_write_bytes, atomic_write_text

GRID_SHAPE = (32, 32, 256)
DEFAULT_DEPTH_RANGE = (0.5, 8.0)


class SceneFormatError(ValueError):
    """A scene file could not be parsed."""


@dataclass(frozen=True, eq=False)
class ScenePointCloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (M, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        if not np.all(pts[:, 2] > 0):
            raise ValueError("all scene points must lie in front of the camera (z > 0)")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


class SceneIndex:
    """Immutable point cloud with a k-d tree for exact nearest-neighbour queries."""

    def __init__(self, cloud):
        if not isinstance(cloud, ScenePointCloud):
            cloud = ScenePointCloud(cloud)
        self.cloud = cloud
        self.points = cloud.points
        self.tree = cKDTree(self.points)

    def __len__(self):
        return len(self.cloud)

    def nearest(self, q):
        """Index and squared distance of the scene point closest to ``q``.

        Exact; equidistant candidates resolve to the lowest index.
        """
        idx, d2 = self.nearest_many(np.asarray(q, dtype=np.float64).reshape(1, 3))
        return int(idx[0]), float(d2[0])

    def nearest_many(self, queries):
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        M = len(self)
        k = min(8, M)
        dist, cand = self.tree.query(q, k=k)
        if k == 1:
            dist, cand = dist[:, None], cand[:, None]
        # recompute squared distances exactly, then take lexicographic (d2, index)
        diff = self.points[cand] - q[:, None, :]
        d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        out_d2 = d2.min(axis=1)
        out_idx = np.where(d2 == out_d2[:, None], cand, M).min(axis=1).astype(np.int64)
        if k < M:
            # all k candidates tie (within rounding): widen to the full ball
            for i in np.flatnonzero(dist[:, -1] <= dist[:, 0] * (1 + 1e-9) + 1e-12):
                ball = np.asarray(self.tree.query_ball_point(q[i], dist[i, 0] * (1 + 1e-9) + 1e-12), dtype=np.int64)
                diff_b = self.points[ball] - q[i]
                row_d2 = diff_b[:, 0] * diff_b[:, 0] + diff_b[:, 1] * diff_b[:, 1] + diff_b[:, 2] * diff_b[:, 2]
                order = np.lexsort((ball, row_d2))
                out_idx[i] = ball[order[0]]
                out_d2[i] = row_d2[order[0]]
        return out_idx, out_d2

    def within_radius(self, centre, radius):
        """Sorted indices of points within ``radius`` of ``centre``."""
        idx = self.tree.query_ball_point(np.asarray(centre, dtype=np.float64), float(radius))
        return np.sort(np.asarray(idx, dtype=np.int64))


def nearest(index, q):
    return index.nearest(q)


# ---------------------------------------------------------------------------
# frustum grid


@dataclass(eq=False)
class FrustumGrid:
    occupancy: np.ndarray
    depth_range: tuple
    cam: object
    dropped: int = 0

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.shape != GRID_SHAPE:
            raise ValueError(f"frustum grid must have shape {GRID_SHAPE}, got {occ.shape}")
        if occ.size and (occ.min() < 0 or occ.max() > 1):
            raise ValueError("grid values must lie in [0, 1]")
        self.occupancy = occ
        self.depth_range = (float(self.depth_range[0]), float(self.depth_range[1]))


def frustum_normalize(p, cam):
    """Map camera-frame points (..., 3) into the frustum cuboid (fx x/z, fy y/z, z)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise ValueError("frustum_normalize requires z > 0")
    return np.stack([cam.fx * p[..., 0] / z, cam.fy * p[..., 1] / z, z], axis=-1)


def frustum_bins(points, cam, depth_range=DEFAULT_DEPTH_RANGE):
    """Integer (row, col, depth) bin of each point and a mask of points inside the grid.

    Lateral bins span the image: column from the pixel u over [0, image_w),
    row from v over [0, image_h). Depth bins are linear in z over
    ``[z_near, z_far)``.
    """
    z_near, z_far = depth_range
    if not z_near < z_far:
        raise ValueError("depth_range must satisfy z_near < z_far")
    hat = frustum_normalize(points, cam)
    u = hat[:, 0] + cam.cx
    v = hat[:, 1] + cam.cy
    nr, nc, nd = GRID_SHAPE
    col = np.floor(u / cam.image_w * nc)
    row = np.floor(v / cam.image_h * nr)
    dep = np.floor((hat[:, 2] - z_near) / (z_far - z_near) * nd)
    ok = (col >= 0) & (col < nc) & (row >= 0) & (row < nr) & (dep >= 0) & (dep < nd)
    bins = np.stack([row, col, dep], axis=1)
    bins = np.where(ok[:, None], bins, -1).astype(np.int64)
    return bins, ok


def voxelize(cloud, cam, depth_range=DEFAULT_DEPTH_RANGE):
    """Binary occupancy grid of a point cloud in the camera frustum.

    Points outside the lateral field of view or the depth range are dropped;
    their number is recorded in ``FrustumGrid.dropped``.
    """
    pts = cloud.points if isinstance(cloud, ScenePointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("cannot voxelize an empty cloud")
    bins, ok = frustum_bins(pts, cam, depth_range)
    occ = np.zeros(GRID_SHAPE, dtype=np.float32)
    b = bins[ok]
    occ[b[:, 0], b[:, 1], b[:, 2]] = 1.0
    return FrustumGrid(occ, tuple(depth_range), cam, dropped=int((~ok).sum()))


_GRID_MAGIC = b"FGRD"
_GRID_HEADER = struct.Struct("<4sHHIII dd 4s")
_DTYPES = {b"f4\x00\x00": np.float32, b"u1\x00\x00": np.uint8}


def dump_grid(grid, path):
    """Write a grid as a little-endian header followed by row-major data.

    Header layout: magic ``FGRD``, format version (u16), reserved (u16),
    three u32 dims, z_near and z_far (f64), dtype code (4 bytes, ``f4``).
    """
    data = np.ascontiguousarray(grid.occupancy, dtype="<f4")
    header = _GRID_HEADER.pack(_GRID_MAGIC, 1, 0, *data.shape, *grid.depth_range, b"f4\x00\x00")
    atomic_write_bytes(path, header + data.tobytes())


def load_grid_array(path):
    """Read a grid dump; returns (occupancy array, depth_range)."""
    raw = Path(path).read_bytes()
    if len(raw) < _GRID_HEADER.size:
        raise SceneFormatError("grid dump truncated")
    magic, version, _, d0, d1, d2, zn, zf, code = _GRID_HEADER.unpack_from(raw)
    if magic != _GRID_MAGIC or version != 1:
        raise SceneFormatError("not a frustum grid dump")
    if code not in _DTYPES:
        raise SceneFormatError(f"unknown dtype code {code!r}")
    arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[code]).newbyteorder("<"), offset=_GRID_HEADER.size)
    return arr.reshape(d0, d1, d2).copy(), (zn, zf)


# ---------------------------------------------------------------------------
# point cloud files


def write_ply(path, points):
    pts = np.asarray(points, dtype=np.float64)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_ply(path):
    """Read vertex x, y, z from an ASCII PLY file (other properties are skipped)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise SceneFormatError(f"{path}: missing 'ply' magic")
    n_vertex, props, in_vertex, fmt = None, [], False, None
    body_start = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
    if fmt != "ascii":
        raise SceneFormatError(f"{path}: only ASCII PLY is supported (format {fmt!r})")
    if body_start is None or n_vertex is None:
        raise SceneFormatError(f"{path}: malformed header")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise SceneFormatError(f"{path}: vertex element lacks x/y/z") from None
    rows = text[body_start:body_start + n_vertex]
    if len(rows) < n_vertex:
        raise SceneFormatError(f"{path}: expected {n_vertex} vertices, found {len(rows)}")
    try:
        data = np.array([[float(v) for v in r.split()] for r in rows])
    except ValueError as exc:
        raise SceneFormatError(f"{path}: bad vertex row ({exc})") from None
    if data.ndim != 2 or data.shape[1] < len(props):
        raise SceneFormatError(f"{path}: inconsistent vertex rows")
    return data[:, cols]


def write_csv(path, points):
    pts = np.asarray(points, dtype=np.float64)
    atomic_write_text(path, "".join(f"{x:.9g},{y:.9g},{z:.9g}\n" for x, y, z in pts))


def read_csv(path):
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            if n == 1 and rows == []:
                continue  # header row
            raise SceneFormatError(f"{path}:{n}: not numeric") from None
        if len(vals) != 3:
            raise SceneFormatError(f"{path}:{n}: expected 3 values, got {len(vals)}")
        rows.append(vals)
    if not rows:
        raise SceneFormatError(f"{path}: no points")
    return np.array(rows)


def load_cloud(path):
    """Load a scene cloud from ``.ply`` or ``.csv``."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        pts = read_ply(path)
    elif suffix == ".csv":
        pts = read_csv(path)
    else:
        raise SceneFormatError(f"unsupported scene format {suffix!r}")
    try:
        return ScenePointCloud(pts)
    except ValueError as exc:
        raise SceneFormatError(f"{path}: {exc}") from None
