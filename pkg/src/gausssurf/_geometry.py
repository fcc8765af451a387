"""Small vectorized rotation / covariance helpers and their vector-Jacobian products."""
from __future__ import annotations

import numpy as np

SCALE_FLOOR = 1e-8


def normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    n = np.where(n < 1e-30, 1.0, n)
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) scalar-first quaternions (normalized internally)."""
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q) back to the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    norm = np.where(norm < 1e-30, 1.0, norm)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # project out the radial component of the normalization
    radial = np.sum(dqn * qn, axis=-1, keepdims=True)
    return (dqn - radial * qn) / norm


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternions for (..., 3, 3) rotation matrices (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    case = np.where(tr > diag.max(axis=1), 3, diag.argmax(axis=1))
    for c in range(4):
        m = case == c
        if not np.any(m):
            continue
        r = R[m]
        if c == 3:
            s = np.sqrt(1.0 + tr[m]) * 2
            q[m] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                             (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], 1)
        elif c == 0:
            s = np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]) * 2
            q[m] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s,
                             (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], 1)
        elif c == 1:
            s = np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2]) * 2
            q[m] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                             0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], 1)
        else:
            s = np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1]) * 2
            q[m] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                             (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], 1)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return normalize_quat(q).reshape(shape + (4,))


def floored_scales(log_scale: np.ndarray) -> np.ndarray:
    return np.maximum(np.exp(log_scale), SCALE_FLOOR)


def covariance(R: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return np.einsum("...ik,...k,...jk->...ij", R, scales**2, R)


def inverse_covariance(R: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return np.einsum("...ik,...k,...jk->...ij", R, 1.0 / scales**2, R)


def covariance_vjp(R, scales, dcov):
    """Gradient of cov = R diag(s^2) R^T w.r.t. (R, s), for symmetric or not dcov."""
    G = 0.5 * (dcov + np.swapaxes(dcov, -1, -2))
    s2 = scales**2
    dR = 2 * np.einsum("...ij,...jk,...k->...ik", G, R, s2)
    RtGR = np.einsum("...ji,...jk,...kl->...il", R, G, R)
    ds = 2 * scales * np.diagonal(RtGR, axis1=-2, axis2=-1)
    return dR, ds


def inverse_covariance_vjp(R, scales, dprec):
    """Gradient of P = R diag(1/s^2) R^T w.r.t. (R, s)."""
    G = 0.5 * (dprec + np.swapaxes(dprec, -1, -2))
    inv2 = 1.0 / scales**2
    dR = 2 * np.einsum("...ij,...jk,...k->...ik", G, R, inv2)
    RtGR = np.einsum("...ji,...jk,...kl->...il", R, G, R)
    ds = -2 * inv2 / scales * np.diagonal(RtGR, axis1=-2, axis2=-1)
    return dR, ds


def normalize_vec(v: np.ndarray):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n, n


def normalize_vec_vjp(u: np.ndarray, n: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Given u = v/|v| and |v| = n, pull du back to dv."""
    return (du - np.sum(du * u, axis=-1, keepdims=True) * u) / n


def min_scale_axis(scales: np.ndarray) -> np.ndarray:
    """Index of the smallest scale per Gaussian, lowest index on ties."""
    return np.argmin(scales, axis=-1)
