"""Embedded-manifold primitives.

Everything here is a pure function of numpy arrays and broadcasts over
leading axes, so the same code path serves a single state and a batch of
seeds.  Conventions:

* ``S = [[0, 1], [-1, 0]]`` is the planar skew matrix; ``planar_rot(a)``
  is ``exp(a*S)``, which maps ``e1 = (1, 0)`` to ``(cos a, -sin a)``.
* Rotations embed into R^9 by stacking columns, so ``vec(I)`` is
  ``(1,0,0, 0,1,0, 0,0,1)`` and ``vec(R @ skew(e_i)) == -kron(skew(e_i), I) @ vec(R)``.
* The obstacle map sends a planar point ``z`` outside the margin disc to
  log-polar coordinates ``(rho, theta)`` with ``|z - z_O| = d_star + e^rho``.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    EmptySet,
    InsideObstacleMargin,
    NotARotation,
    TooFarFromManifold,
)

S2 = np.array([[0.0, 1.0], [-1.0, 0.0]])  # planar skew generator

_E3 = np.eye(3)


def planar_rot(angle):
    """Rotation exp(angle*S) as a (..., 2, 2) array.

    With this sign convention a quarter turn sends e1 to (0, -1).
    """
    a = np.asarray(angle, dtype=float)
    c, s = np.cos(a), np.sin(a)
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = s
    out[..., 1, 0] = -s
    out[..., 1, 1] = c
    return out


def rotor_apply(angle, v):
    """Apply exp(angle*S) to 2-vectors without materialising matrices.

    ``angle`` broadcasts against ``v[..., 0]``.
    """
    a = np.asarray(angle, dtype=float)
    c, s = np.cos(a), np.sin(a)
    x, y = v[..., 0], v[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def skew(x):
    """Matrix [x]_x with [x]_x y = x cross y, shape (..., 3, 3)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (3, 3))
    out[..., 0, 1] = -x[..., 2]
    out[..., 0, 2] = x[..., 1]
    out[..., 1, 0] = x[..., 2]
    out[..., 1, 2] = -x[..., 0]
    out[..., 2, 0] = -x[..., 1]
    out[..., 2, 1] = x[..., 0]
    return out


def rot_exp(axis, angle):
    """Rodrigues formula exp(angle*[axis]_x) for a unit axis.

    ``axis``: (..., 3); ``angle``: broadcastable scalar field.  Returns
    (..., 3, 3) rotation matrices.
    """
    axis = np.asarray(axis, dtype=float)
    a = np.asarray(angle, dtype=float)
    K = skew(axis)
    K2 = K @ K
    sa = np.sin(a)[..., None, None]
    ca = (1.0 - np.cos(a))[..., None, None]
    return _E3 + sa * K + ca * K2


def rot_exp_apply(axis, angle, v):
    """exp(angle*[axis]_x) @ v with axis unit and v of shape (..., 3).

    Uses the vector Rodrigues form; cheaper than building matrices when only
    the image of one vector is needed.
    """
    axis = np.asarray(axis, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(angle, dtype=float)[..., None]
    cross = np.cross(np.broadcast_to(axis, v.shape), v)
    dot = np.sum(axis * v, axis=-1, keepdims=True)
    return v * np.cos(a) + cross * np.sin(a) + axis * dot * (1.0 - np.cos(a))


def vec(R):
    """Column-stack a rotation matrix (..., 3, 3) into (..., 9)."""
    R = np.asarray(R, dtype=float)
    return np.swapaxes(R, -1, -2).reshape(R.shape[:-2] + (9,))


def unvec(p, tol=1e-6, check=True):
    """Inverse of :func:`vec`; validates the result is a rotation.

    Raises ``NotARotation`` when the reshaped matrix has orthogonality
    defect above ``tol`` or non-positive determinant.  ``check=False``
    skips validation (internal hot paths reshaping raw tangent vectors).
    """
    p = np.asarray(p, dtype=float)
    R = np.swapaxes(p.reshape(p.shape[:-1] + (3, 3)), -1, -2)
    if check:
        defect = orthogonality_defect(R)
        if np.any(defect > tol) or np.any(np.linalg.det(R) <= 0):
            raise NotARotation(
                f"matrix is not a rotation (defect {float(np.max(defect)):.3e} > {tol:.1e})"
            )
    return R


def orthogonality_defect(R):
    """Frobenius norm of R^T R - I, shape (...,)."""
    G = np.swapaxes(R, -1, -2) @ R - _E3
    return np.sqrt(np.sum(G * G, axis=(-2, -1)))


def nearest_rotation(M):
    """Polar projection of (..., 3, 3) matrices onto SO(3) via SVD."""
    U, _, Vt = np.linalg.svd(M)
    # flip the weakest singular direction when U @ Vt lands in O(3)\SO(3)
    sign = np.where(np.linalg.det(U @ Vt) < 0, -1.0, 1.0)
    U = U.copy()
    U[..., :, 2] *= sign[..., None]
    return U @ Vt


def orthonormalize_step(R):
    """One Newton-Schulz sweep R <- R(3I - R^T R)/2.

    Quadratically contracts the orthogonality defect; valid only near SO(3).
    Used as the per-step solver renormalization hook where a full SVD per
    step would dominate the flow cost.
    """
    G = np.swapaxes(R, -1, -2) @ R
    return R @ (1.5 * _E3 - 0.5 * G)


def normalize(v):
    """Divide (..., n) vectors by their euclidean norm."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def project_to_manifold(kind, x, max_defect=0.1):
    """Project ``x`` onto the named manifold.

    kind: 'circle' | 'sphere' (normalize), 'rotation' (nearest rotation of a
    9-vector), 'polar' (normalize the angular part of (rho, theta)).
    Raises ``TooFarFromManifold`` when the input sits outside the trusted
    band of width ``max_defect``.
    """
    x = np.asarray(x, dtype=float)
    if kind in ("circle", "sphere"):
        r = np.linalg.norm(x, axis=-1)
        if np.any(np.abs(r - 1.0) > max_defect):
            raise TooFarFromManifold(f"|norm-1| = {float(np.max(np.abs(r - 1))):.3g}")
        return x / r[..., None]
    if kind == "rotation":
        R = np.swapaxes(x.reshape(x.shape[:-1] + (3, 3)), -1, -2)
        if np.any(orthogonality_defect(R) > max_defect):
            raise TooFarFromManifold("orthogonality defect above trusted band")
        return vec(nearest_rotation(R))
    if kind == "polar":
        out = x.copy()
        th = x[..., 1:3]
        r = np.linalg.norm(th, axis=-1)
        if np.any(np.abs(r - 1.0) > max_defect):
            raise TooFarFromManifold("angular part far from unit circle")
        out[..., 1:3] = th / r[..., None]
        return out
    raise ValueError(f"unknown manifold kind {kind!r}")


# --- obstacle log-polar map ---------------------------------------------------


def obstacle_diffeo(z, z_obs, d_star):
    """Map planar z (outside the d_star disc around z_obs) to (rho, theta).

    rho = log(|z - z_obs| - d_star), theta = (z - z_obs)/|z - z_obs|.
    Returns an array (..., 3) packed as (rho, theta_x, theta_y).
    """
    z = np.asarray(z, dtype=float)
    y = z - z_obs
    r = np.linalg.norm(y, axis=-1)
    if np.any(r <= d_star):
        raise InsideObstacleMargin(f"|z - z_obs| = {float(np.min(r)):.4g} <= d* = {d_star}")
    th = y / r[..., None]
    rho = np.log(r - d_star)
    return np.concatenate([rho[..., None], th], axis=-1)


def obstacle_diffeo_inv(p, z_obs, d_star):
    """Inverse of :func:`obstacle_diffeo`: z = z_obs + (d_star + e^rho) theta."""
    p = np.asarray(p, dtype=float)
    rho = p[..., 0]
    th = p[..., 1:3]
    return z_obs + (d_star + np.exp(rho))[..., None] * th


def obstacle_pushforward(p, v, d_star):
    """Pushforward D(phi)(phi^{-1}(p)) v of a planar vector v, shape (..., 3).

    Closed-form Jacobian of the log-polar map evaluated at the preimage of
    ``p = (rho, theta)``:

        d(rho) = <theta, v> / e^rho
        d(theta) = (v - <theta, v> theta) / (d_star + e^rho)
    """
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    rho = p[..., 0]
    th = p[..., 1:3]
    rad = np.sum(th * v, axis=-1)
    drho = rad / np.exp(rho)
    dth = (v - rad[..., None] * th) / (d_star + np.exp(rho))[..., None]
    return np.concatenate([drho[..., None], dth], axis=-1)


def obstacle_fields(p, d_star):
    """Pushforward of the canonical planar directions e_1, e_2 at p.

    Returns (..., 2, 3): row i is D(phi)(phi^{-1}(p)) e_i.
    """
    p = np.asarray(p, dtype=float)
    e = np.eye(2)
    cols = [obstacle_pushforward(p, np.broadcast_to(e[i], p[..., 1:3].shape), d_star)
            for i in range(2)]
    return np.stack(cols, axis=-2)


# --- distances ----------------------------------------------------------------


def distance_to_set(target, x):
    """Euclidean distance |x|_A to a target set.

    ``target`` is either a finite sample cloud (k, n) / a single point (n,)
    or a callable implementing an analytic distance formula.  Broadcasts
    over leading axes of ``x``.
    """
    x = np.asarray(x, dtype=float)
    if callable(target):
        return np.asarray(target(x), dtype=float)
    pts = np.atleast_2d(np.asarray(target, dtype=float))
    if pts.size == 0:
        raise EmptySet("distance to the empty set is undefined")
    diff = x[..., None, :] - pts
    return np.min(np.linalg.norm(diff, axis=-1), axis=-1)
