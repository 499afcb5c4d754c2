import numpy as np
import pytest

from oracles import rotation_grid_objective
from percdl.transforms import (FreeTransform, IdentityTransform, RotationTransform,
                               TimeWarpTransform, apply_transform, is_orthogonal,
                               make_transform, rotation_fit)
from percdl.warp import WarpConfig, apply_timewarp, project_theta


def rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def objective(segments, phi, O):
    return sum(float(np.sum((X - phi @ O.T) ** 2)) for X in segments)


def test_identity_returns_atom():
    phi = np.random.default_rng(0).standard_normal((10, 2))
    np.testing.assert_array_equal(apply_transform(IdentityTransform(), phi, np.zeros(0)), phi)


def test_free_returns_parameters():
    rng = np.random.default_rng(1)
    phi, b = rng.standard_normal((2, 10, 2))
    np.testing.assert_array_equal(apply_transform(FreeTransform(), phi, b), b)
    with pytest.raises(ValueError):
        apply_transform(FreeTransform(), phi, np.zeros(5))


def test_rotation_identity_and_norms():
    rng = np.random.default_rng(2)
    phi = rng.standard_normal((10, 2))
    np.testing.assert_allclose(apply_transform(RotationTransform(), phi, np.eye(2)), phi)
    out = apply_transform(RotationTransform(), phi, rot(1.1))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(phi, axis=1),
                               atol=1e-12)


def test_rotation_errors():
    with pytest.raises(ValueError, match="P >= 2"):
        apply_transform(RotationTransform(), np.zeros((10, 1)), np.eye(1))
    with pytest.raises(ValueError, match="orthogonal"):
        apply_transform(RotationTransform(), np.ones((10, 2)), 2 * np.eye(2))


def test_timewarp_matches_warp_module():
    rng = np.random.default_rng(3)
    cfg = WarpConfig()
    a = project_theta(rng.uniform(-1, 1, (3, 10)))
    phi = rng.standard_normal((40, 1))
    np.testing.assert_array_equal(apply_transform(TimeWarpTransform(cfg), phi, a),
                                  apply_timewarp(phi, a, cfg))


def test_make_transform():
    assert make_transform("identity").name == "identity"
    assert make_transform("timewarp", WarpConfig(2, 5)).cfg.W == 5
    with pytest.raises(ValueError):
        make_transform("affine")


def test_rotation_fit_identity_segment():
    phi = np.random.default_rng(4).standard_normal((20, 2))
    np.testing.assert_allclose(rotation_fit([phi], phi).matrix, np.eye(2), atol=1e-12)


def test_rotation_fit_recovers_angle():
    phi = np.random.default_rng(5).standard_normal((20, 2))
    O = rotation_fit([phi @ rot(0.7).T], phi).matrix
    np.testing.assert_allclose(O, rot(0.7), atol=1e-6)
    assert objective([phi @ rot(0.7).T], phi, O) <= rotation_grid_objective([phi @ rot(0.7).T], phi)


def test_rotation_fit_dominates_grid_on_noisy_copies():
    rng = np.random.default_rng(6)
    phi = rng.standard_normal((20, 2))
    segs = [phi @ rot(2.0).T + 0.05 * rng.standard_normal((20, 2)) for _ in range(50)]
    O = rotation_fit(segs, phi).matrix
    assert objective(segs, phi, O) <= rotation_grid_objective(segs, phi) + 1e-9
    assert is_orthogonal(O, 1e-9)


def test_rotation_fit_degenerate_flag():
    phi = np.zeros((10, 2))
    phi[:, 0] = 1.0
    res = rotation_fit([phi], phi)
    assert res.degenerate and is_orthogonal(res.matrix)


def test_rotation_fit_proper_option():
    rng = np.random.default_rng(7)
    phi = rng.standard_normal((20, 2))
    reflect = np.array([[1.0, 0.0], [0.0, -1.0]])
    assert np.linalg.det(rotation_fit([phi @ reflect.T], phi).matrix) < 0
    assert np.linalg.det(rotation_fit([phi @ reflect.T], phi, proper=True).matrix) > 0


def test_rotation_fit_three_channels():
    rng = np.random.default_rng(8)
    phi = rng.standard_normal((30, 3))
    Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    np.testing.assert_allclose(rotation_fit([phi @ Q.T], phi).matrix, Q, atol=1e-10)
