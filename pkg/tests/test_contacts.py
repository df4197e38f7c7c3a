import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import brute_nearest, load_schema
from scenemocap.contacts import (
    ContactLabels,
    EffectiveContacts,
    annotate_body_contacts,
    annotate_trajectory,
    classification_scores,
    corrupt_labels,
    effective_contacts,
    gaussian_kernel1d,
    labels_from_dict,
    labels_to_dict,
    load_labels,
    save_labels,
    smooth_env_labels,
    transfer_env_contacts,
)
from scenemocap.scene import SceneIndex

seeds = st.integers(0, 2**32 - 1)


# --- types ------------------------------------------------------------------


def test_label_validation():
    with pytest.raises(ValueError):
        ContactLabels(np.array([0.5, 1.2]), np.zeros(3))
    with pytest.raises(ValueError):
        ContactLabels(np.array([np.nan]), np.zeros(3))
    with pytest.raises(ValueError):
        EffectiveContacts(np.array([1, 1]), np.array([0]))
    with pytest.raises(ValueError):
        EffectiveContacts(np.array([-1]), np.array([0]))


# --- annotation -------------------------------------------------------------


def test_annotate_static_close_vertex():
    scene = SceneIndex(np.array([[0.0, 0.0, 2.0]]))
    V = np.tile(np.array([[0.0, -0.001, 2.0], [0.0, -1.0, 2.0]]), (3, 1, 1))
    lab = annotate_body_contacts(V, scene, 0.05, 0.1, dt=0.1)
    np.testing.assert_array_equal(lab, [[1, 0]] * 3)


def test_annotate_fast_vertex():
    scene = SceneIndex(np.array([[0.0, 0.0, 2.0], [0.2, 0.0, 2.0], [0.4, 0.0, 2.0]]))
    # moves 0.2 m per 0.1 s frame = 2 m/s while staying 1 mm above a scene point
    V = np.array([[[0.0, -0.001, 2.0]], [[0.2, -0.001, 2.0]], [[0.4, -0.001, 2.0]]])
    lab = annotate_body_contacts(V, scene, 0.05, 0.1, dt=0.1)
    speed = np.linalg.norm(np.diff(V[:, 0], axis=0), axis=1) / 0.1
    assert np.allclose(speed, 2.0)
    np.testing.assert_array_equal(lab, [[0], [0], [0]])


def test_annotate_velocity_uses_forward_then_backward_difference():
    scene = SceneIndex(np.array([[0.0, 0.0, 2.0]]))
    # still for frames 0 and 1, then jumps: frame 1's forward difference is fast
    V = np.array([[[0, -0.001, 2.0]], [[0, -0.001, 2.0]], [[0.02, -0.001, 2.0]]])
    lab = annotate_body_contacts(V, scene, 0.05, 0.1, dt=0.1)
    np.testing.assert_array_equal(lab[:, 0], [1, 0, 0])


def test_annotate_single_frame_warns():
    scene = SceneIndex(np.array([[0.0, 0.0, 2.0]]))
    with pytest.warns(RuntimeWarning):
        lab = annotate_body_contacts(np.array([[0, 0, 2.01]]), scene)
    np.testing.assert_array_equal(lab, [[1.0]])


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_annotation_translation_equivariant(seed):
    rng = np.random.default_rng(seed)
    scene = rng.uniform([-1, 0.9, 2], [1, 1.0, 4], (200, 3))
    V = rng.uniform([-1, 0.85, 2], [1, 1.0, 4], (3, 30, 3))
    V[1:] = V[0] + rng.normal(scale=0.002, size=(2, 30, 3))
    shift = np.round(rng.uniform(-1, 1, 3), 2) + [0, 0, 2]
    a = annotate_body_contacts(V, SceneIndex(scene), 0.05, 0.1, dt=0.1)
    b = annotate_body_contacts(V + shift, SceneIndex(scene + shift), 0.05, 0.1, dt=0.1)
    # translation can perturb distances at the last bit; ignore vertices sitting on a threshold
    d2 = SceneIndex(scene).nearest_many(V.reshape(-1, 3))[1].reshape(3, 30)
    clear = np.abs(np.sqrt(d2) - 0.05) > 1e-9
    np.testing.assert_array_equal(a[clear], b[clear])


# --- scene label transfer ---------------------------------------------------


def test_transfer_examples():
    rng = np.random.default_rng(4)
    pts = rng.uniform([-1, -1, 2], [1, 1, 3], (100, 3))
    scene = SceneIndex(pts)
    surface = rng.uniform([-1, -1, 2], [1, 1, 3], (40, 3))
    assert transfer_env_contacts(np.zeros(40), surface, scene).sum() == 0
    one = np.zeros(40)
    one[7] = 1
    env = transfer_env_contacts(one, surface, scene)
    assert env.sum() == 1
    assert np.flatnonzero(env)[0] == brute_nearest(pts, surface[7])[0]
    many = (rng.random(40) > 0.5).astype(float)
    env = transfer_env_contacts(many, surface, scene)
    expected = {brute_nearest(pts, surface[i])[0] for i in np.flatnonzero(many)}
    assert set(np.flatnonzero(env)) == expected
    assert env.sum() <= many.sum()


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_transfer_cardinality(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform([-1, -1, 2], [1, 1, 3], (int(rng.integers(1, 60)), 3))
    surface = rng.uniform([-1, -1, 2], [1, 1, 3], (50, 3))
    body = (rng.random(50) > 0.6).astype(float)
    env = transfer_env_contacts(body, surface, SceneIndex(pts))
    assert (env > 0.5).sum() <= (body > 0.5).sum()


def test_annotate_trajectory_frames(seat_scenario, template):
    from scenemocap.kinematics import fk_batch, surface_from_fk

    sc = seat_scenario
    X, G = fk_batch(sc.gt_states, sc.gt_scale, template)
    V = surface_from_fk(X, G, sc.gt_scale, template)
    labels = annotate_trajectory(V, sc.index, dist_thresh=0.03, dt=0.1)
    assert len(labels) == sc.T
    for a, b in zip(labels, sc.gt_contacts):
        np.testing.assert_array_equal(a.body, b.body)
        np.testing.assert_array_equal(a.env, b.env)


# --- smoothing --------------------------------------------------------------


def dense_smooth(g, sigma, truncate=4.0):
    w = gaussian_kernel1d(sigma, truncate)
    r = len(w) // 2
    out = np.zeros_like(g)
    for i, j, k in np.ndindex(g.shape):
        acc = 0.0
        for a in range(-r, r + 1):
            for b in range(-r, r + 1):
                for c in range(-r, r + 1):
                    ii, jj, kk = i + a, j + b, k + c
                    if 0 <= ii < g.shape[0] and 0 <= jj < g.shape[1] and 0 <= kk < g.shape[2]:
                        acc += w[a + r] * w[b + r] * w[c + r] * g[ii, jj, kk]
        out[i, j, k] = acc
    return out


def test_smooth_zero_grid():
    assert np.all(smooth_env_labels(np.zeros((5, 5, 5))) == 0)


def test_smooth_impulse_symmetric_peak():
    g = np.zeros((11, 11, 11))
    g[5, 5, 5] = 1.0
    out = smooth_env_labels(g, 1.0)
    assert np.unravel_index(out.argmax(), out.shape) == (5, 5, 5)
    assert out.max() == 1.0
    for axes in ((1, 0, 2), (2, 1, 0), (0, 2, 1)):
        np.testing.assert_allclose(out, out.transpose(axes), atol=1e-15)
    np.testing.assert_allclose(out, out[::-1, ::-1, ::-1], atol=1e-15)


def test_smooth_interior_impulse_mass():
    g = np.zeros((15, 15, 15))
    g[7, 7, 7] = 1.0
    out = smooth_env_labels(g, 1.0, renormalize=False)
    assert abs(out.sum() - gaussian_kernel1d(1.0).sum() ** 3) < 1e-6


def test_smooth_matches_dense_convolution():
    g = np.random.default_rng(9).uniform(0, 0.9, (6, 5, 7))
    out = smooth_env_labels(g, 0.7, truncate=3.0)
    np.testing.assert_allclose(out, dense_smooth(g, 0.7, truncate=3.0), rtol=1e-12, atol=1e-14)


def test_smooth_renormalises_binary_grid():
    g = np.zeros((6, 5, 7))
    g[1, 2, 3] = g[4, 4, 4] = 1.0
    out = smooth_env_labels(g, 1.0)
    raw = dense_smooth(g, 1.0)
    np.testing.assert_allclose(out, raw / raw.max(), rtol=1e-12, atol=1e-14)


# --- corruption and selection ------------------------------------------------


def test_corrupt_examples():
    p = (np.random.default_rng(0).random(100) > 0.5).astype(float)
    np.testing.assert_array_equal(corrupt_labels(p, 0, 0, 5), p)
    np.testing.assert_array_equal(corrupt_labels(np.zeros(20), 1.0, 0.0, 5), np.ones(20))
    with pytest.raises(ValueError):
        corrupt_labels(p, 1.5, 0, 0)


def test_corrupt_reproducible_mask():
    p = (np.random.default_rng(1).random(500) > 0.5).astype(float)
    out = corrupt_labels(p, 0.1, 0.1, 42)
    u = np.random.default_rng(42).random(500)
    expected = p.copy()
    expected[(p <= 0.5) & (u < 0.1)] = 1.0
    expected[(p > 0.5) & (u < 0.1)] = 0.0
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(corrupt_labels(p, 0.1, 0.1, 42), out)


def test_corrupt_contact_labels_streams():
    lab = ContactLabels(np.zeros(30), np.zeros(40))
    a = corrupt_labels(lab, 0.3, 0.0, 7)
    b = corrupt_labels(lab, 0.3, 0.0, 7)
    np.testing.assert_array_equal(a.body, b.body)
    np.testing.assert_array_equal(a.env, b.env)
    assert 0 < a.body.sum() < 30


def test_classification_scores():
    truth = np.array([1, 1, 0, 0, 1.0])
    pred = np.array([1, 0, 1, 0, 1.0])
    s = classification_scores(pred, truth)
    assert s == {"precision": 2 / 3, "recall": 2 / 3, "accuracy": 3 / 5}
    noisy = corrupt_labels(truth, 0.0, 0.0, 0)
    assert classification_scores(noisy, truth)["accuracy"] == 1.0


def test_effective_contacts_examples():
    e = effective_contacts(ContactLabels(np.full(5, 0.4), np.full(3, 0.4)))
    assert e.empty and e.body_idx.size == 0 and e.env_idx.size == 0
    e = effective_contacts(ContactLabels(np.array([0.5, 0.51, 0.0]), np.array([1.0])))
    assert e.body_idx.tolist() == [1]


@given(seeds)
def test_effective_contacts_linear_scan(seed):
    rng = np.random.default_rng(seed)
    body, env = rng.random(50), rng.random(20)
    e = effective_contacts(ContactLabels(body, env))
    assert e.body_idx.tolist() == [i for i in range(50) if body[i] > 0.5]
    assert e.env_idx.tolist() == [i for i in range(20) if env[i] > 0.5]


# --- files ------------------------------------------------------------------


def test_labels_round_trip_and_schema(tmp_path):
    rng = np.random.default_rng(2)
    frames = [ContactLabels((rng.random(655) > 0.9).astype(float), (rng.random(80) > 0.8).astype(float))
              for _ in range(3)]
    p = tmp_path / "labels.json"
    save_labels(p, frames)
    jsonschema.validate(json.loads(p.read_text()), load_schema("contacts"))
    back = load_labels(p)
    for a, b in zip(frames, back):
        np.testing.assert_array_equal(a.body, b.body)
        np.testing.assert_array_equal(a.env, b.env)


def test_labels_reject_unknown_major_version():
    d = labels_to_dict([ContactLabels(np.zeros(3), np.zeros(2))])
    d["version"] = "2.0"
    with pytest.raises(ValueError):
        labels_from_dict(d)
    with pytest.raises(ValueError):
        labels_to_dict([])
