"""Pure numpy implementations of the hot geometric kernels.

These mirror ``_ckernels.pyx`` operation for operation so that both
backends return identical counts and indices.
"""

import numpy as np

# Upper bound on the number of float64 temporaries per chunk.
_CHUNK_ELEMS = 2_000_000


def capsule_inside_counts(points, seg_a, seg_b, radii):
    """Count points strictly inside any capsule, per sample.

    Args:
        points: (M, 3) scene points.
        seg_a, seg_b: (S, B, 3) capsule segment endpoints for S samples of B bones.
        radii: (S, B) capsule radii.

    Returns:
        (S,) int64 array of counts.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    seg_a = np.ascontiguousarray(seg_a, dtype=np.float64)
    seg_b = np.ascontiguousarray(seg_b, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    n_samples, n_bones = seg_a.shape[:2]
    counts = np.zeros(n_samples, dtype=np.int64)
    if points.shape[0] == 0 or n_samples == 0:
        return counts

    ab = seg_b - seg_a
    ab2 = np.einsum("sbk,sbk->sb", ab, ab)
    r2 = radii * radii
    step = max(1, _CHUNK_ELEMS // max(1, n_bones * points.shape[0]))
    px, py, pz = points[:, 0], points[:, 1], points[:, 2]
    for s0 in range(0, n_samples, step):
        sl = slice(s0, s0 + step)
        ax = seg_a[sl, :, 0, None]
        ay = seg_a[sl, :, 1, None]
        az = seg_a[sl, :, 2, None]
        bx = ab[sl, :, 0, None]
        by = ab[sl, :, 1, None]
        bz = ab[sl, :, 2, None]
        apx = px - ax
        apy = py - ay
        apz = pz - az
        denom = ab2[sl, :, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (apx * bx + apy * by + apz * bz) / denom
        t = np.where(denom > 0.0, t, 0.0)
        t = np.clip(t, 0.0, 1.0)
        dx = apx - t * bx
        dy = apy - t * by
        dz = apz - t * bz
        d2 = dx * dx + dy * dy + dz * dz
        inside = (d2 < r2[sl, :, None]).any(axis=1)
        counts[sl] = inside.sum(axis=1)
    return counts


def nearest_sq(queries, targets):
    """Brute-force nearest target for every query.

    Ties resolve to the lowest target index.

    Returns:
        (idx, d2): int64 indices and float64 squared distances, each (Q,).
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.float64)
    n_q = queries.shape[0]
    if targets.shape[0] == 0:
        raise ValueError("nearest_sq needs at least one target")
    idx = np.empty(n_q, dtype=np.int64)
    d2_out = np.empty(n_q, dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // targets.shape[0])
    tx, ty, tz = targets[:, 0], targets[:, 1], targets[:, 2]
    for q0 in range(0, n_q, step):
        q = queries[q0:q0 + step]
        dx = tx - q[:, 0, None]
        dy = ty - q[:, 1, None]
        dz = tz - q[:, 2, None]
        d2 = dx * dx + dy * dy + dz * dz
        best = np.argmin(d2, axis=1)
        idx[q0:q0 + step] = best
        d2_out[q0:q0 + step] = d2[np.arange(len(q)), best]
    return idx, d2_out
