import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from _helpers import brute_nearest, load_schema
from scenemocap.bench.ablation import SUITES, AblationResult, apply_overrides, samples_to_reach, summarize
from scenemocap.bench.metrics import (
    PCK_THRESHOLD,
    MetricReport,
    downsample,
    e_smooth,
    evaluate,
    mpjpe,
    non_penetration_pct,
    penetrating_vertices,
    pck,
    pve,
    similarity_align,
    sliding_error,
    translation_and_bone_errors,
)
from scenemocap.bench.scenarios import GAMMA, KINDS, Box, Scenario, depth_offset, make_scenario
from scenemocap.kinematics import fk_batch, inside_body_count, project
from scenemocap.pipeline import StageConfig
from scenemocap.scene import SceneIndex, ScenePointCloud

seeds = st.integers(0, 2**32 - 1)


# --- brute-force oracles ----------------------------------------------------


def brute_mean_dist_mm(P, G):
    total, n = 0.0, 0
    for p_frame, g_frame in zip(P, G):
        for p, g in zip(p_frame, g_frame):
            total += math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)))
            n += 1
    return 1000.0 * total / n


def kabsch_align(p, g):
    """Similarity alignment via scipy's rotation fit and the closed-form optimal scale."""
    a, b = p - p.mean(0), g - g.mean(0)
    rot, _ = Rotation.align_vectors(b, a)
    ra = rot.apply(a)
    s = np.sum(ra * b) / np.sum(a * a)
    return s * ra + g.mean(0)


# --- joint and vertex errors ------------------------------------------------


def test_ground_truth_fixed_points(seat_scenario, template):
    sc = seat_scenario
    rep = evaluate(sc.gt_states, sc.gt_scale, sc, template)
    assert rep.mpjpe_mm == 0 and rep.pve_mm == 0 and rep.trans_err_m == 0 and rep.bone_len_err_m == 0
    assert rep.pck_pct == 100 and rep.pck_pa_pct == 100
    assert rep.mpjpe_pa_mm < 1e-9 and rep.pve_pa_mm < 1e-9
    assert rep.non_penet_pct == 100
    assert rep.sliding_err_mm >= 0


def test_uniform_offset():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(4, 21, 3))
    d = rng.normal(size=3)
    P = G + 0.1 * d / np.linalg.norm(d)
    assert mpjpe(P, G) == pytest.approx(100.0, abs=1e-9)
    assert pck(P, G) == 100.0
    assert PCK_THRESHOLD == 0.15
    assert pck(G + [0.16, 0, 0], G) == 0.0
    assert mpjpe(P, G, procrustes=True) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_errors_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(3, 21, 3))
    P = G + rng.normal(scale=0.1, size=G.shape)
    assert mpjpe(P, G) == pytest.approx(brute_mean_dist_mm(P, G), rel=1e-10)
    assert pve(P, G) == pytest.approx(brute_mean_dist_mm(P, G), rel=1e-10)
    hits = [math.dist(p, g) <= 0.15 for pf, gf in zip(P, G) for p, g in zip(pf, gf)]
    assert round(pck(P, G) * len(hits) / 100.0) == sum(hits)  # exact hit count
    assert pck(P, G) == pytest.approx(100.0 * sum(hits) / len(hits), rel=1e-12)
    aligned = [kabsch_align(p, g) for p, g in zip(P, G)]
    assert mpjpe(P, G, procrustes=True) == pytest.approx(brute_mean_dist_mm(aligned, G), rel=1e-8)
    # alignment optimality
    assert mpjpe(P, G, procrustes=True) <= mpjpe(P, G) + 1e-9
    assert pve(P, G, procrustes=True) <= pve(P, G) + 1e-9


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_similarity_align_recovers_transform(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(15, 3))
    R = Rotation.random(random_state=seed % 2**31).as_matrix()
    s, t = rng.uniform(0.5, 2.0), rng.normal(size=3)
    p = (g - t) @ R / s  # g = s R p + t
    np.testing.assert_allclose(similarity_align(p, g), g, atol=1e-9)
    assert np.all(similarity_align(np.ones((4, 3)), g[:4]) == g[:4].mean(0))


def test_translation_and_bone_errors(template):
    x = np.zeros((3, 69))
    x[:, 2] = 3.0
    assert translation_and_bone_errors(x, 1.0, x, 1.0, template) == (0.0, 0.0)
    y = x.copy()
    y[:, :3] += [0.3, 0.4, 0.0]
    trans, bone = translation_and_bone_errors(y, 1.1, x, 1.0, template)
    assert trans == pytest.approx(0.5)
    # summed bone lengths scale linearly with the body scale
    X1 = fk_batch(x[:1], 1.1, template)[0][0]
    X0 = fk_batch(x[:1], 1.0, template)[0][0]
    parents = template.parent
    total = lambda X: sum(np.linalg.norm(X[j] - X[parents[j]]) for j in range(1, template.K))  # noqa: E731
    assert bone == pytest.approx(total(X1) - total(X0), rel=1e-10)
    assert bone == pytest.approx(0.1 * template.bone_lengths().sum(), rel=1e-12)


# --- penetration ------------------------------------------------------------


def test_penetration_with_solids():
    box = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    pts = np.array([[0.5, 0.5, 0.5], [2.0, 0.5, 0.5], [1.0, 0.5, 0.5], [0.99, 0.01, 0.5]])
    assert penetrating_vertices(pts, solids=[box]).tolist() == [True, False, False, True]
    far = np.random.default_rng(0).uniform(5, 6, (2, 30, 3))
    assert non_penetration_pct(far, solids=[box]) == 100.0
    assert non_penetration_pct(far, solids=[]) == 100.0
    V = np.stack([pts, pts + 5])
    assert non_penetration_pct(V, solids=[box]) == pytest.approx(100 * (1 - 0.5) / 2 + 100 / 2)
    with pytest.raises(ValueError):
        penetrating_vertices(pts)


def brute_plane_penetration(v, cloud, eps=0.01, k=8, reach=0.1):
    d2 = np.sum((cloud - v) ** 2, axis=1)
    order = sorted(range(len(cloud)), key=lambda i: (d2[i], i))[:k]
    if math.sqrt(d2[order[0]]) > reach:
        return False
    nb = cloud[order]
    c = nb.mean(0)
    w, U = np.linalg.eigh((nb - c).T @ (nb - c))
    n = U[:, 0]
    if n @ (-c) < 0:
        n = -n
    return bool((v - c) @ n < -eps)


def test_plane_heuristic_matches_brute_force():
    rng = np.random.default_rng(3)
    # a wall facing the camera at z = 4 plus a jittered floor
    a, b = np.meshgrid(np.linspace(-1, 1, 20), np.linspace(-1, 1, 20))
    wall = np.column_stack([a.ravel(), b.ravel(), np.full(a.size, 4.0)])
    floor = np.column_stack([a.ravel(), np.full(a.size, 1.0) + rng.normal(0, 1e-3, a.size), 3 + b.ravel()])
    cloud = np.vstack([wall, floor])
    idx = SceneIndex(ScenePointCloud(cloud))
    V = np.column_stack([rng.uniform(-0.9, 0.9, 400), rng.uniform(-0.9, 1.2, 400), rng.uniform(3.5, 4.2, 400)])
    got = penetrating_vertices(V, scene=idx)
    want = [brute_plane_penetration(v, cloud) for v in V]
    assert got.tolist() == want
    assert 0 < sum(want) < len(want)
    # points clearly behind the wall penetrate, points well in front do not
    assert penetrating_vertices(np.array([[0.0, 0.0, 4.05], [0.0, 0.0, 3.95]]), scene=idx).tolist() == [True, False]


# --- temporal metrics -------------------------------------------------------


def test_e_smooth():
    t = np.arange(8, dtype=float)[:, None, None]
    d = np.array([0.3, -0.2, 0.5])
    assert e_smooth(t * d + np.ones((1, 4, 3))) == pytest.approx(0.0, abs=1e-9)
    a = 0.004  # metres per frame squared
    J = 0.5 * a * t**2 * np.array([1.0, 0.0, 0.0]) + np.zeros((1, 4, 3))
    assert e_smooth(J) == pytest.approx(4.0, rel=1e-9)
    assert e_smooth(J, fps=10) == pytest.approx(400.0, rel=1e-9)
    assert e_smooth(J[:2]) == 0.0
    rng = np.random.default_rng(0)
    J = rng.normal(size=(6, 3, 3))
    vals = [math.dist(J[i + 2, k] - J[i + 1, k], J[i + 1, k] - J[i, k]) for i in range(4) for k in range(3)]
    assert e_smooth(J) == pytest.approx(1000 * sum(vals) / len(vals), rel=1e-10)


def test_sliding_error():
    V = np.zeros((4, 10, 3))
    mask = np.zeros((4, 10), dtype=bool)
    mask[:, :3] = True
    assert sliding_error(V, mask) == 0.0
    V[:, :, 0] = 0.005 * np.arange(4)[:, None]
    assert sliding_error(V, mask) == pytest.approx(5.0, rel=1e-12)
    assert sliding_error(V, np.zeros_like(mask)) == 0.0
    rng = np.random.default_rng(1)
    V = rng.normal(size=(5, 8, 3))
    mask = rng.random((5, 8)) > 0.4
    vals = [math.dist(V[t + 1, i], V[t, i]) for t in range(4) for i in range(8) if mask[t, i] and mask[t + 1, i]]
    assert sliding_error(V, mask) == pytest.approx(1000 * sum(vals) / len(vals), rel=1e-10)


def test_downsample():
    x = np.arange(30)
    assert downsample(x, 30.0).tolist() == list(range(0, 30, 3))
    assert downsample(x, 10.0).tolist() == list(range(30))
    assert downsample(x, 5.0).tolist() == list(range(30))


def test_metric_report_validation():
    good = dict(mpjpe_mm=1, mpjpe_pa_mm=1, pck_pct=50, pck_pa_pct=50, pve_mm=1, pve_pa_mm=1, trans_err_m=0,
                bone_len_err_m=0, non_penet_pct=100, e_smooth=0, sliding_err_mm=0)
    MetricReport(**good)
    with pytest.raises(ValueError):
        MetricReport(**{**good, "pve_mm": np.nan})
    with pytest.raises(ValueError):
        MetricReport(**{**good, "pck_pct": 101})


# --- scenarios --------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_scenario_ground_truth_is_consistent(kind, template):
    sc = make_scenario(kind, seed=11, template=template)
    X, _ = fk_batch(sc.gt_states, sc.gt_scale, template)
    for t in range(sc.T):
        assert inside_body_count(sc.index, sc.gt_states[t], sc.gt_scale, template) <= GAMMA
        assert (sc.gt_contacts[t].body > 0.5).any()
    assert all(b.contains(X.reshape(-1, 3)).sum() == 0 for b in sc.solids)
    assert 0.85 <= sc.gt_scale <= 1.15


def test_noise_free_observations(template):
    sc = make_scenario("floor", seed=4, noise=0.0, occlusion_rate=0.0, template=template)
    X, _ = fk_batch(sc.gt_states, sc.gt_scale, template)
    for t, o in enumerate(sc.obs):
        np.testing.assert_allclose(o.keypoints, project(X[t], sc.cam), atol=1e-12)
        assert np.all(o.confidences == 1.0)


def test_occluded_observations(template):
    sc = make_scenario("seat", seed=4, occlusion_rate=1.0, template=template)
    assert sc.occluded.all()
    assert all(np.all(o.confidences < 0.3) for o in sc.obs)
    sc = make_scenario("seat", seed=4, occlusion_rate=0.0, template=template)
    assert all(np.all(o.confidences > 0.7) for o in sc.obs)


def test_scenario_reproducible_and_round_trip(tmp_path, template):
    a = make_scenario("combo", seed=3, T=4, occlusion_rate=0.3, template=template)
    b = make_scenario("combo", seed=3, T=4, occlusion_rate=0.3, template=template)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert json.dumps(make_scenario("combo", seed=4, T=4).to_dict()) != json.dumps(a.to_dict())
    p = tmp_path / "sc.json"
    a.save(p)
    back = Scenario.load(p)
    assert json.dumps(back.to_dict()) == json.dumps(a.to_dict())
    with pytest.raises(ValueError):
        make_scenario("ceiling")
    with pytest.raises(ValueError):
        make_scenario("floor", T=0)


def test_depth_offset():
    x = np.zeros((2, 69))
    y = depth_offset(x, 3.0)
    assert np.all(y[:, 2] == 3.0) and np.all(x == 0)
    assert np.all(np.delete(y, 2, axis=1) == 0)


# --- ablation plumbing ------------------------------------------------------


def test_samples_to_reach():
    counts = [50, 200, 1000, 2000]
    assert samples_to_reach(counts, [10, 8, 6, 5], 12) == 50
    assert samples_to_reach(counts, [10, 8, 6, 5], 8) == pytest.approx(200)
    assert samples_to_reach(counts, [10, 8, 6, 5], 7) == pytest.approx(math.sqrt(200 * 1000))
    assert samples_to_reach(counts, [10, 8, 6, 5], 4) == math.inf


def test_apply_overrides_and_suites():
    cfg = apply_overrides(StageConfig(), {"n_sam": 50, "weights": {"lambda_con": 0.0}})
    assert cfg.n_sam == 50 and cfg.weights.lambda_con == 0.0
    assert cfg.weights.lambda_2d == StageConfig().weights.lambda_2d
    expected = {"sampling_count", "iterations", "naive_vs_manifold", "no_S", "no_R", "no_SR", "no_Lcon",
                "no_Lsli", "confidence_merge"}
    assert expected <= set(SUITES)
    for variants in SUITES.values():
        for _, ov in variants:
            apply_overrides(StageConfig(), ov)  # every variant is a valid configuration


def test_summary_and_schema():
    rows = [{"suite": "s", "variant": "a", "kind": "floor", "seed": i, "mpjpe_mm": float(i)} for i in range(4)]
    summ = summarize(rows)
    assert summ["a"]["runs"] == 4
    assert summ["a"]["mpjpe_mm"]["mean"] == 1.5
    assert summ["a"]["mpjpe_mm"]["std"] == pytest.approx(np.std([0, 1, 2, 3]))
    res = AblationResult("s", rows, summ)
    jsonschema.validate(json.loads(res.to_json()), load_schema("summary"))
    lines = res.to_csv().splitlines()
    assert lines[0] == "suite,variant,kind,seed,mpjpe_mm" and len(lines) == 5
    assert res.column("a", "seed").tolist() == [0, 1, 2, 3]


def test_brute_nearest_helper_consistency(seat_scenario):
    # the oracle used throughout the suite agrees with the scene index on a sample of queries
    for q in seat_scenario.scene.points[:20] + 0.013:
        assert seat_scenario.index.nearest(q) == brute_nearest(seat_scenario.scene.points, q)
