import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gausssurf._geometry import quat_to_rotmat, rotmat_to_quat
from gausssurf.eval_metrics import point_triangle_distance, psnr
from gausssurf.level_set import directional_std
from gausssurf.scene_io import normalize_quaternions

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
quat = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
vec3 = arrays(np.float64, 3, elements=finite)


@given(quat)
def test_quaternion_rotation_round_trip(q):
    R = quat_to_rotmat(q[None])[0]
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    back = quat_to_rotmat(rotmat_to_quat(R[None]))[0]
    np.testing.assert_allclose(back, R, atol=1e-9)


@given(quat)
def test_normalized_quaternion_is_canonical(q):
    n = normalize_quaternions(q[None])
    np.testing.assert_allclose(normalize_quaternions(n), n, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(n), 1.0, atol=1e-12)
    # q and -q describe the same rotation
    np.testing.assert_allclose(quat_to_rotmat(normalize_quaternions(-q[None])), quat_to_rotmat(n), atol=1e-12)


@given(quat, arrays(np.float64, 3, elements=st.floats(0.01, 3.0)), vec3.filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_directional_std_bounded_by_scales(q, s, v):
    R = quat_to_rotmat(q[None])[0]
    cov = R @ np.diag(s**2) @ R.T
    u = v / np.linalg.norm(v)
    sig = directional_std(cov, u)
    assert s.min() * (1 - 1e-9) <= sig <= s.max() * (1 + 1e-9)


@given(vec3, vec3, vec3, vec3)
def test_triangle_distance_bounded_by_vertex_distance(p, a, b, c):
    d = point_triangle_distance(p[None], a, b, c)[0]
    assert d >= 0
    assert d <= min(np.linalg.norm(p - a), np.linalg.norm(p - b), np.linalg.norm(p - c)) + 1e-9


@settings(max_examples=50)
@given(arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)), arrays(np.float64, (6, 6, 3), elements=st.floats(0, 1)))
def test_psnr_symmetric_and_capped(a, b):
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, b) <= 99.0
