"""SE(2) transforms: group laws, rigidity, fusion feature layout."""

import numpy as np
import pytest

from v2xfuse.geometry import (PointSet2D, RigidTransform2D, apply, compose,
                              invert, rot_feature)


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def rand_transform(rng):
    return RigidTransform2D.from_pose(*rng.uniform(-20, 20, 2),
                                      rng.uniform(-np.pi, np.pi))


def test_identity_apply_unchanged(rng):
    pts = PointSet2D(rng.uniform(-50, 50, (6, 2)))
    out = apply(RigidTransform2D.identity(), pts)
    assert np.array_equal(out.xy, pts.xy)


def test_quarter_turn():
    t = RigidTransform2D(np.array([[0.0, -1.0], [1.0, 0.0]]), np.zeros(2))
    out = apply(t, PointSet2D([[1.0, 0.0]]))
    assert np.array_equal(out.xy, [[0.0, 1.0]])


def test_apply_matches_affine_oracle(rng):
    th = np.pi / 6
    t = RigidTransform2D.from_pose(3.0, -1.0, th)
    pts = rng.uniform(-10, 10, (5, 2))
    c, s = np.cos(th), np.sin(th)
    want = np.array([[c * x - s * y + 3.0, s * x + c * y - 1.0]
                     for x, y in pts])
    assert np.max(np.abs(apply(t, PointSet2D(pts)).xy - want)) < 1e-12


def test_compose_then_invert_is_identity(rng):
    t = rand_transform(rng)
    ti = compose(t, invert(t))
    assert np.max(np.abs(ti.rotation - np.eye(2))) < 1e-12
    assert np.max(np.abs(ti.translation)) < 1e-12


def test_rotations_add():
    a = RigidTransform2D.from_pose(0, 0, 0.4)
    b = RigidTransform2D.from_pose(0, 0, 1.1)
    ab = compose(a, b)
    want = RigidTransform2D.from_pose(0, 0, 1.5)
    assert np.max(np.abs(ab.rotation - want.rotation)) < 1e-12


def test_chain_of_four_matches_accumulated_matrix(rng):
    ts = [rand_transform(rng) for _ in range(4)]
    pts = rng.uniform(-5, 5, (7, 2))
    # compose(...compose(t0,t1)...,t3) applies t3 first, so the single
    # homogeneous oracle matrix is H0 @ H1 @ H2 @ H3.
    m = np.eye(3)
    for t in ts:
        h = np.eye(3)
        h[:2, :2] = t.rotation
        h[:2, 2] = t.translation
        m = m @ h
    acc = ts[0]
    for t in ts[1:]:
        acc = compose(acc, t)
    got = apply(acc, PointSet2D(pts)).xy
    want = (np.c_[pts, np.ones(7)] @ m.T)[:, :2]
    assert np.max(np.abs(got - want)) < 1e-12


def test_apply_then_pointwise_equals_compose(rng):
    a, b = rand_transform(rng), rand_transform(rng)
    pts = PointSet2D(rng.uniform(-5, 5, (4, 2)))
    lhs = apply(compose(a, b), pts).xy
    rhs = apply(a, apply(b, pts)).xy
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_rigidity_preserves_distances(rng):
    t = rand_transform(rng)
    pts = rng.uniform(-30, 30, (8, 2))
    out = apply(t, PointSet2D(pts)).xy
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=2)
    assert np.max(np.abs(d0 - d1)) < 1e-12


def test_double_invert_restores_parameters(rng):
    t = rand_transform(rng)
    tt = invert(invert(t))
    assert np.max(np.abs(tt.rotation - t.rotation)) < 1e-12
    assert np.max(np.abs(tt.translation - t.translation)) < 1e-12


def test_rot_feature_layouts():
    assert np.array_equal(rot_feature(RigidTransform2D.identity()),
                          [[1, 0, 0, 1, 0, 0]])
    quarter = RigidTransform2D(np.array([[0.0, -1.0], [1.0, 0.0]]),
                               np.zeros(2))
    assert np.array_equal(rot_feature(quarter), [[0, -1, 1, 0, 0, 0]])
    t = RigidTransform2D.from_pose(1.0, 2.0, 0.3)
    c, s = np.cos(0.3), np.sin(0.3)
    assert np.array_equal(rot_feature(t), [[c, -s, s, c, 1.0, 2.0]])


def test_invalid_rotations_rejected():
    with pytest.raises(ValueError):
        RigidTransform2D(np.array([[1.0, 0.1], [0.0, 1.0]]), np.zeros(2))
    with pytest.raises(ValueError):  # reflection: det -1
        RigidTransform2D(np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))


def test_pointset_validation():
    with pytest.raises(ValueError):
        PointSet2D(np.ones((3, 3)))
    with pytest.raises(ValueError):
        PointSet2D(np.array([[np.inf, 0.0]]))
    assert len(PointSet2D.empty()) == 0
