"""Synergistic potential families and the switching (minimum-selection) logic.

A family is a finite indexed set {V_q} of nonnegative potentials on an
embedded manifold, all vanishing at a common target point, such that every
non-target critical point of any member sits at least ``delta`` above the
pointwise family minimum.  The synergy gap function

    mu(p, q) = V_q(p) - min_qt V_qt(p)

triggers a mode switch when mu >= delta; switching to an argmin mode then
drops the active potential by at least delta, which is what lets the
closed loop escape the critical points that obstruct smooth stabilization.

All evaluations broadcast over leading axes of the point array.  Gradients
are closed-form (chain rule through the warping maps); finite differences
are used only by the test suite as an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import BadDelta, NoCriticalPointsFound, NotOrthogonal, PreconditionViolated
from .geometry import nearest_rotation, normalize, rot_exp, rot_exp_apply, rotor_apply, vec


@dataclass(frozen=True)
class CompositeState:
    """A manifold point paired with the logic mode q in {1, ..., N}."""

    p: np.ndarray
    q: int

    def __post_init__(self):
        if int(self.q) != self.q or self.q < 1:
            raise ValueError("mode q must be a positive integer")


@dataclass(frozen=True)
class PotentialFamily:
    """An indexed family {V_q} with gradients and manifold plumbing.

    eval_all(P) -> (..., N) stacks all member values; grad_mode(m, P) is the
    ambient gradient of member m (1-based).  tangent_project / retract /
    sample supply the manifold operations the synergy-gap search needs.
    base_eval is the unwarped potential the family was built from (logged
    as a diagnostic channel).
    """

    kind: str
    n_modes: int
    delta: float
    target: np.ndarray
    dim_p: int
    eval_all: Callable
    grad_mode: Callable
    tangent_project: Callable
    retract: Callable
    sample: Callable
    base_eval: Optional[Callable] = None
    base_grad: Optional[Callable] = None

    # --- evaluation helpers ---------------------------------------------------

    def eval(self, q, P):
        """V_q(P) for integer modes q broadcast against points P."""
        vals = self.eval_all(P)
        idx = np.rint(np.asarray(q)).astype(int) - 1
        if np.ndim(idx) == 0:
            return vals[..., int(idx)]
        return np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]

    def grad(self, q, P):
        """Ambient gradient of V_q at P, for scalar or per-point modes."""
        idx = np.rint(np.asarray(q)).astype(int)
        if np.ndim(idx) == 0:
            return self.grad_mode(int(idx), P)
        out = np.empty(np.asarray(P).shape)
        for m in range(1, self.n_modes + 1):
            mask = idx == m
            if np.any(mask):
                out[mask] = self.grad_mode(m, np.asarray(P)[mask])
        return out

    def tangent_grad(self, q, P):
        return self.tangent_project(P, self.grad(q, P))

    def mu(self, q, P):
        """Synergy gap V_q(P) - min_qt V_qt(P); nonnegative by construction."""
        vals = self.eval_all(P)
        idx = np.rint(np.asarray(q)).astype(int) - 1
        if np.ndim(idx) == 0:
            vq = vals[..., int(idx)]
        else:
            vq = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]
        return vq - np.min(vals, axis=-1)

    def argmin_mode(self, P):
        """1-based minimizing mode; ties break to the smallest index."""
        return np.argmin(self.eval_all(P), axis=-1) + 1


def synergy_mu(fam: PotentialFamily, x: CompositeState) -> float:
    """Synergy gap at a composite state (zero iff q attains the minimum)."""
    return float(fam.mu(x.q, np.asarray(x.p, dtype=float)))


def switch_jump(fam: PotentialFamily, x: CompositeState, tol=1e-9) -> CompositeState:
    """Switch to a minimizing mode; requires mu(x) >= delta - tol.

    The point is unchanged and the post-switch synergy gap is zero.  Exact
    ties between members leave mu at zero for minimal q, so a state with a
    tie and a non-minimal q cannot satisfy the precondition.
    """
    p = np.asarray(x.p, dtype=float)
    if fam.mu(x.q, p) < fam.delta - tol:
        raise PreconditionViolated(
            f"switch requested with mu = {float(fam.mu(x.q, p)):.4g} < delta = {fam.delta}")
    return CompositeState(p, int(fam.argmin_mode(p)))


# ---------------------------------------------------------------------------
# concrete families
# ---------------------------------------------------------------------------


def _check_delta(delta, hi, hint):
    if not (0.0 < delta < hi):
        raise BadDelta(f"delta must lie in (0, {hint}), got {delta}")


def circle_family(theta_star, delta) -> PotentialFamily:
    """Two-mode angular-warping family on the unit circle.

    Base potential W(p) = 1 - <theta_star, p>; members W_q = W o Phi_q with
    Phi_q(p) = exp((3/2 - q) W(p) S) p.  Synergistic for any delta in (0, 1).
    """
    _check_delta(delta, 1.0, "1")
    ts = normalize(np.asarray(theta_star, dtype=float))

    def base_eval(P):
        return 1.0 - P @ ts

    def eval_all(P):
        P = np.asarray(P, dtype=float)
        w = 1.0 - P @ ts
        out = np.empty(P.shape[:-1] + (2,))
        for m, c in ((1, 0.5), (2, -0.5)):
            out[..., m - 1] = 1.0 - rotor_apply(c * w, P) @ ts
        return out

    def grad_mode(m, P):
        P = np.asarray(P, dtype=float)
        c = 1.5 - m
        w = 1.0 - P @ ts
        phi = rotor_apply(c * w, P)
        s_phi = np.stack([phi[..., 1], -phi[..., 0]], axis=-1)  # S @ phi
        coef = c * (s_phi @ ts)
        return -rotor_apply(-c * w, np.broadcast_to(ts, P.shape)) + coef[..., None] * ts

    def tangent_project(P, v):
        return v - np.sum(P * v, axis=-1, keepdims=True) * P

    def sample(rng, n):
        ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def base_grad(P):
        return np.broadcast_to(-ts, np.asarray(P).shape).copy()

    return PotentialFamily("circle", 2, delta, ts, 2, eval_all, grad_mode,
                           tangent_project, normalize, sample, base_eval, base_grad)


def sphere_family(p_star, p_perp, delta) -> PotentialFamily:
    """Two-mode warped family on the 2-sphere.

    W(p) = 1 - <p, p_star>; Phi_q(p) = exp((3/2 - q) W(p) [p_perp]_x) p with
    p_perp a unit vector orthogonal to the target.
    """
    _check_delta(delta, 1.0, "1")
    ps = normalize(np.asarray(p_star, dtype=float))
    pp = normalize(np.asarray(p_perp, dtype=float))
    if abs(float(ps @ pp)) > 1e-10:
        raise NotOrthogonal(f"<p_perp, p_star> = {float(ps @ pp):.3e}")

    def base_eval(P):
        return 1.0 - P @ ps

    def eval_all(P):
        P = np.asarray(P, dtype=float)
        w = 1.0 - P @ ps
        out = np.empty(P.shape[:-1] + (2,))
        for m, c in ((1, 0.5), (2, -0.5)):
            out[..., m - 1] = 1.0 - rot_exp_apply(pp, c * w, P) @ ps
        return out

    def grad_mode(m, P):
        P = np.asarray(P, dtype=float)
        c = 1.5 - m
        w = 1.0 - P @ ps
        phi = rot_exp_apply(pp, c * w, P)
        k_phi = np.cross(np.broadcast_to(pp, phi.shape), phi)  # [p_perp]_x phi
        coef = c * (k_phi @ ps)
        back = rot_exp_apply(pp, -c * w, np.broadcast_to(ps, P.shape))
        return -back + coef[..., None] * ps

    def tangent_project(P, v):
        return v - np.sum(P * v, axis=-1, keepdims=True) * P

    def sample(rng, n):
        return normalize(rng.standard_normal((n, 3)))

    def base_grad(P):
        return np.broadcast_to(-ps, np.asarray(P).shape).copy()

    return PotentialFamily("sphere", 2, delta, ps, 3, eval_all, grad_mode,
                           tangent_project, normalize, sample, base_eval, base_grad)


def so3_weights(omega_tilde):
    """Weight matrix of the modified trace potential: diag(w) * 3 / sum(w)."""
    w = np.asarray(omega_tilde, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be componentwise positive")
    return np.diag(w * (3.0 / np.sum(w)))


def so3_family(omega_tilde, delta) -> PotentialFamily:
    """Two-mode warped trace family on SO(3), exposed on the vec embedding.

    W(R) = tr(A (I - R)) with A the normalized diagonal weight matrix built
    from ``omega_tilde``; Phi_q(R) = exp(((3 - 2q)/4) W(R) [w]_x) R with
    w = omega_tilde / |omega_tilde|.  Synergistic for any delta in (0, 1/2);
    all evaluations take 9-vectors p = vec(R).
    """
    _check_delta(delta, 0.5, "1/2")
    A = so3_weights(omega_tilde)
    a = np.diag(A)
    omega = normalize(np.asarray(omega_tilde, dtype=float))
    Om = np.zeros((3, 3))
    Om[0, 1], Om[0, 2] = -omega[2], omega[1]
    Om[1, 0], Om[1, 2] = omega[2], -omega[0]
    Om[2, 0], Om[2, 1] = -omega[1], omega[0]
    trA = float(np.sum(a))
    target = vec(np.eye(3))

    def _as_R(P):
        P = np.asarray(P, dtype=float)
        return np.swapaxes(P.reshape(P.shape[:-1] + (3, 3)), -1, -2)

    def _w_of(R):
        diag = R[..., 0, 0] * a[0] + R[..., 1, 1] * a[1] + R[..., 2, 2] * a[2]
        return trA - diag

    def base_eval(P):
        return _w_of(_as_R(P))

    def eval_all(P):
        R = _as_R(P)
        w = _w_of(R)
        out = np.empty(w.shape + (2,))
        for m, c in ((1, 0.25), (2, -0.25)):
            M = rot_exp(omega, c * w) @ R
            out[..., m - 1] = _w_of(M)
        return out

    def grad_mode(m, P):
        R = _as_R(P)
        w = _w_of(R)
        c = (3.0 - 2.0 * m) / 4.0
        E = rot_exp(omega, c * w)
        M = Om @ E @ R
        trace_term = M[..., 0, 0] * a[0] + M[..., 1, 1] * a[1] + M[..., 2, 2] * a[2]
        # d/dR tr(A E(W) R) = E^T A + tr(A Om E R) * dW/dR with dW/dR = -A
        gR = -np.swapaxes(E, -1, -2) @ A + (c * trace_term)[..., None, None] * A
        return vec(gR)

    def tangent_project(P, v):
        R = _as_R(P)
        M = _as_R(v)
        B = np.swapaxes(R, -1, -2) @ M
        sk = 0.5 * (B - np.swapaxes(B, -1, -2))
        return vec(R @ sk)

    def retract(P):
        return vec(nearest_rotation(_as_R(P)))

    def sample(rng, n):
        q = normalize(rng.standard_normal((n, 4)))
        w_, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        R = np.empty((n, 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - z * w_)
        R[:, 0, 2] = 2 * (x * z + y * w_)
        R[:, 1, 0] = 2 * (x * y + z * w_)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - x * w_)
        R[:, 2, 0] = 2 * (x * z - y * w_)
        R[:, 2, 1] = 2 * (y * z + x * w_)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return vec(R)

    neg_vec_A = vec(-A)

    def base_grad(P):
        return np.broadcast_to(neg_vec_A, np.asarray(P).shape).copy()

    return PotentialFamily("so3", 2, delta, target, 9, eval_all, grad_mode,
                           tangent_project, retract, sample, base_eval, base_grad)


def obstacle_family(rho_star, theta_star, delta) -> PotentialFamily:
    """Two-mode family on R x S^1 for the log-polar obstacle coordinates.

    V_q(rho, th) = (rho - rho*)^2 / 2 + sqrt((e^rho - e^rho*)^2 + 1) - 1
                   + W_q(th)
    with W_q the circle family members at ``theta_star``.  Points pack as
    (rho, th_x, th_y).
    """
    _check_delta(delta, 1.0, "1")
    circ = circle_family(theta_star, delta)
    rs = float(rho_star)
    ers = np.exp(rs)
    target = np.concatenate([[rs], circ.target])

    def _radial(rho):
        d = np.exp(rho) - ers
        return 0.5 * (rho - rs) ** 2 + np.sqrt(d * d + 1.0) - 1.0

    def _radial_d(rho):
        e = np.exp(rho)
        d = e - ers
        return (rho - rs) + d * e / np.sqrt(d * d + 1.0)

    def base_eval(P):
        P = np.asarray(P, dtype=float)
        return _radial(P[..., 0]) + circ.base_eval(P[..., 1:3])

    def eval_all(P):
        P = np.asarray(P, dtype=float)
        return _radial(P[..., 0])[..., None] + circ.eval_all(P[..., 1:3])

    def grad_mode(m, P):
        P = np.asarray(P, dtype=float)
        gth = circ.grad_mode(m, P[..., 1:3])
        return np.concatenate([_radial_d(P[..., 0])[..., None], gth], axis=-1)

    def tangent_project(P, v):
        th = P[..., 1:3]
        vth = v[..., 1:3]
        proj = vth - np.sum(th * vth, axis=-1, keepdims=True) * th
        return np.concatenate([v[..., :1], proj], axis=-1)

    def retract(P):
        out = np.asarray(P, dtype=float).copy()
        out[..., 1:3] = normalize(out[..., 1:3])
        return out

    def sample(rng, n):
        ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
        rho = rng.uniform(rs - 2.5, rs + 2.5, size=n)
        return np.stack([rho, np.cos(ang), np.sin(ang)], axis=-1)

    def base_grad(P):
        P = np.asarray(P, dtype=float)
        gth = np.broadcast_to(-circ.target, P[..., 1:3].shape)
        return np.concatenate([_radial_d(P[..., 0])[..., None], gth], axis=-1)

    return PotentialFamily("obstacle", 2, delta, target, 3, eval_all, grad_mode,
                           tangent_project, retract, sample, base_eval, base_grad)


def single_mode_family(fam: PotentialFamily) -> PotentialFamily:
    """Freeze a family to its unwarped base potential (the non-hybrid baseline).

    The result has one mode, so the synergy gap is identically zero and the
    switching jump set never fires.
    """
    base, bgrad = fam.base_eval, fam.base_grad

    def eval_all(P):
        return base(np.asarray(P, dtype=float))[..., None]

    def grad_mode(m, P):
        return bgrad(np.asarray(P, dtype=float))

    return PotentialFamily(fam.kind + "_base", 1, fam.delta, fam.target, fam.dim_p,
                           eval_all, grad_mode, fam.tangent_project, fam.retract,
                           fam.sample, base, bgrad)


# ---------------------------------------------------------------------------
# synergy gap estimation
# ---------------------------------------------------------------------------


@dataclass
class CriticalPoint:
    mode: int
    point: np.ndarray
    value: float
    mu: float
    grad_norm: float


def _fd_jacobian(tg_fn, retract, P, h=1e-6):
    dim = P.shape[-1]
    J = np.empty(P.shape[:-1] + (dim, dim))
    for d in range(dim):
        e = np.zeros(dim)
        e[d] = h
        gp = tg_fn(retract(P + e))
        gm = tg_fn(retract(P - e))
        J[..., :, d] = (gp - gm) / (2.0 * h)
    return J


def _refine_critical(tg_fn, retract, P0, max_iter=200, tol=1e-8):
    """Damped Gauss-Newton on the tangent-gradient residual, batched."""
    P = P0.copy()
    g = tg_fn(P)
    gn = np.linalg.norm(g, axis=-1)
    lam = np.full(P.shape[0], 1e-3)
    eye = np.eye(P.shape[-1])
    for _ in range(max_iter):
        live = gn > tol
        if not np.any(live):
            break
        J = _fd_jacobian(tg_fn, retract, P[live])
        JT = np.swapaxes(J, -1, -2)
        H = JT @ J + lam[live][:, None, None] * eye
        rhs = -(JT @ g[live][..., None])
        try:
            step = np.linalg.solve(H, rhs)[..., 0]
        except np.linalg.LinAlgError:
            step = -rhs[..., 0]
        cand = retract(P[live] + step)
        g_cand = tg_fn(cand)
        gn_cand = np.linalg.norm(g_cand, axis=-1)
        better = gn_cand < gn[live]
        idx = np.nonzero(live)[0]
        acc = idx[better]
        rej = idx[~better]
        P[acc] = cand[better]
        g[acc] = g_cand[better]
        gn[acc] = gn_cand[better]
        lam[acc] = np.maximum(lam[acc] / 3.0, 1e-12)
        lam[rej] = np.minimum(lam[rej] * 10.0, 1e8)
    return P, gn


def _spread_candidates(P, score, radius, cap):
    """Low-score-first selection, one representative per spatial cell.

    Cell hashing keeps the scan O(n); the subsequent refinement collapses
    near-duplicate starts anyway.
    """
    order = np.argsort(score)
    cells = np.floor(P[order] / radius).astype(np.int64)
    seen = set()
    chosen = []
    for k in range(order.shape[0]):
        key = cells[k].tobytes()
        if key in seen:
            continue
        seen.add(key)
        chosen.append(order[k])
        if len(chosen) >= cap:
            break
    return P[chosen]


def estimate_synergy_gap(fam: PotentialFamily, grid_resolution=100_000, seed=0,
                         accept_tol=1e-6, dedupe_radius=1e-3, target_radius=1e-2,
                         return_report=False):
    """Numerical lower-confidence estimate of the synergy gap Delta*.

    Samples the manifold, locates approximate critical points of each member
    (tangent-gradient norm below ``accept_tol`` after damped Gauss-Newton
    refinement of well-spread low-gradient candidates), excludes the common
    target, and returns the minimum over the survivors of
    V_q(p) - min_qt V_qt(p).

    A duplicated family (identical members) therefore reports a gap of zero,
    flagging it as non-synergistic.  Raises ``NoCriticalPointsFound`` when no
    off-target critical point turns up at all, which indicates an inadequate
    resolution rather than a synergistic family.
    """
    rng = np.random.default_rng(seed)
    grid = fam.sample(rng, int(grid_resolution))
    found = []
    for mode in range(1, fam.n_modes + 1):
        def tg(P, _m=mode):
            return fam.tangent_grad(_m, P)

        gn = np.linalg.norm(tg(grid), axis=-1)
        starts = _spread_candidates(grid, gn, radius=0.15, cap=800)
        pts, res = _refine_critical(tg, fam.retract, starts)
        ok = res <= accept_tol
        pts, res = pts[ok], res[ok]
        # dedupe within the mode
        kept = []
        for i in range(pts.shape[0]):
            if all(np.linalg.norm(pts[i] - pts[k]) >= dedupe_radius for k in kept):
                kept.append(i)
        for i in kept:
            p = pts[i]
            if np.linalg.norm(p - fam.target) < target_radius:
                continue
            vals = fam.eval_all(p)
            found.append(CriticalPoint(mode, p, float(vals[mode - 1]),
                                       float(vals[mode - 1] - np.min(vals)),
                                       float(res[i])))
    if not found:
        raise NoCriticalPointsFound(
            "no off-target critical points located; increase grid_resolution")
    gap = min(cp.mu for cp in found)
    if return_report:
        return gap, found
    return gap
