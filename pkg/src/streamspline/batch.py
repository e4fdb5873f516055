"""Full-horizon (batch) reconstruction: the cheapest admissible trajectory.

Only the section tails are free; every head follows from the previous
section, so the interval centers and end-point vectors are affine in the
stacked tails. Series are independent and solved one at a time.

* smoothing: an unconstrained least-squares problem, solved directly.
* consistent: a strongly convex QP with one two-sided (slab) constraint per
  sample. Solved by ADMM with over-relaxation on whitened variables, then
  polished by a primal-dual active-set pass that makes the KKT system hold
  to machine precision.
"""

import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from streamspline.policy import (
    ReconstructionState,
    Trajectory,
    default_e0,
    step_cost,
)
from streamspline.spline import SplineEstimate, basis_vector, continuity_matrix, roughness_matrix

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (KKT residual {residual:.3g})")
        self.residual = residual


def affine_structure(xs, rho):
    """Stack the per-step maps needed to write the problem in the tails.

    Returns ``G (T, rho*T)``, ``F (T, rho, rho*T)``, ``P1 (T, rho)`` and the
    block-diagonal roughness blocks ``Q (T, rho, rho)``. With tails ``z``
    and start vector ``e0``: ``e_{t-1} = F[t] z + Phi[t] e0`` and the value
    at ``x_t`` is ``G[t] z + P1[t] . Phi[t] e0``; ``Phi`` is also returned.
    """
    T = len(xs)
    n = rho * T
    G = np.zeros((T, n))
    F = np.zeros((T, rho, n))
    Phi = np.zeros((T, rho, rho))
    P1 = np.zeros((T, rho))
    Q = np.zeros((T, rho, rho))
    F_cur = np.zeros((rho, n))
    Phi_cur = np.eye(rho)
    x_prev = 0.0
    for t in range(T):
        u = xs[t] - x_prev
        x_prev = xs[t]
        p = basis_vector(u, 0.0, rho)
        E = continuity_matrix(u, rho)
        F[t], Phi[t], P1[t] = F_cur, Phi_cur, p[:rho]
        G[t] = p[:rho] @ F_cur
        G[t, rho * t:rho * (t + 1)] += p[rho:]
        Q[t] = roughness_matrix(u, rho)[rho:, rho:]
        F_cur = E[:, :rho] @ F_cur
        F_cur[:, rho * t:rho * (t + 1)] += E[:, rho:]
        Phi_cur = E[:, :rho] @ Phi_cur
    return G, F, Phi, P1, Q


def _block_cholesky(Q):
    """Lower Cholesky factor of ``blockdiag(Q)`` as a dense matrix."""
    T, rho, _ = Q.shape
    L = np.zeros((rho * T, rho * T))
    for t in range(T):
        L[rho * t:rho * (t + 1), rho * t:rho * (t + 1)] = np.linalg.cholesky(Q[t])
    return L


def _active_set_solve(A, lo, hi, upper, lower):
    """Minimum-norm ``z`` with ``A[upper] z = hi`` and ``A[lower] z = lo``; returns ``(z, nu)``."""
    S = np.flatnonzero(upper | lower)
    if S.size == 0:
        return np.zeros(A.shape[1]), np.zeros(0), S
    b = np.where(upper[S], hi[S], lo[S])
    # A_S' = Qr R: z = Qr c with R' c = b, and R nu = c (no normal equations)
    Qr, R = np.linalg.qr(A[S].T)
    c = solve_triangular(R.T, b, lower=True)
    nu = solve_triangular(R, c, lower=False)
    return Qr @ c, nu, S


def _kkt_residual(A, lo, hi, z, mult):
    """Residual of ``min ||z||^2 s.t. lo <= A z <= hi`` at ``(z, mult)``.

    ``mult`` are multipliers with sign convention: positive on an active
    upper bound, negative on an active lower bound.
    """
    Az = A @ z
    primal = np.max(np.maximum(Az - hi, lo - Az), initial=0.0)
    stat = np.max(np.abs(2.0 * z + A.T @ mult), initial=0.0)
    sign = np.max(np.where(mult > 0, mult * np.maximum(hi - Az, 0.0),
                           -mult * np.maximum(Az - lo, 0.0)), initial=0.0)
    return max(primal, stat, sign)


def _polish(A, lo, hi, upper, lower, max_rounds=100, tol=1e-12):
    scale = 1.0 + np.max(np.abs(np.concatenate([lo, hi])))
    for _ in range(max_rounds):
        z, nu, S = _active_set_solve(A, lo, hi, upper, lower)
        Az = A @ z
        wrong = np.zeros_like(upper)
        # feasible multipliers: nu <= 0 on upper faces, nu >= 0 on lower faces
        wrong[S] = (upper[S] & (nu > tol * scale)) | (lower[S] & (nu < -tol * scale))
        over = (Az > hi + tol * scale) & ~upper
        under = (Az < lo - tol * scale) & ~lower
        if not (wrong.any() or over.any() or under.any()):
            mult = np.zeros(A.shape[0])
            mult[S] = -2.0 * nu
            return z, mult, True
        if wrong.any():
            # drop the single worst wrong-sign constraint
            k = S[np.argmax(np.where(upper[S], nu, -nu))]
            upper[k] = lower[k] = False
        else:
            viol = np.maximum(Az - hi, lo - Az)
            k = int(np.argmax(viol))
            if Az[k] > hi[k]:
                upper[k] = True
            else:
                lower[k] = True
    return None, None, False


def solve_slab_qp(A, lo, hi, max_iter=20000, tol=1e-10, alpha=1.6):
    """``argmin ||z||^2`` subject to ``lo <= A z <= hi`` (assumed feasible).

    Returns ``(z, mult, residual)``.
    """
    m, n = A.shape
    rho_admm = 1.0
    sigma = 1e-6
    AtA = A.T @ A

    def factor(r):
        return cho_factor((2.0 + sigma) * np.eye(n) + r * AtA)

    fac = factor(rho_admm)
    x = np.zeros(n)
    zc = np.clip(np.zeros(m), lo, hi)
    y = np.zeros(m)
    best = None
    for it in range(1, max_iter + 1):
        xt = cho_solve(fac, sigma * x + A.T @ (rho_admm * zc - y))
        zt = A @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * zc
        z_new = np.clip(zr + y / rho_admm, lo, hi)
        y = y + rho_admm * (zr - z_new)
        zc = z_new
        if it % 50 == 0:
            Ax = A @ x
            r_prim = np.max(np.abs(Ax - zc))
            r_dual = np.max(np.abs(2.0 * x + A.T @ y))
            # guess the active set from the duals and try to finish exactly
            thr = 1e-9 * (1.0 + np.max(np.abs(y)))
            upper, lower = y > thr, y < -thr
            zp, mult, ok = _polish(A, lo, hi, upper.copy(), lower.copy())
            if ok:
                res = _kkt_residual(A, lo, hi, zp, mult)
                if best is None or res < best[2]:
                    best = (zp, mult, res)
                if res <= tol * (1.0 + np.max(np.abs(zp))):
                    return best
            if r_prim < 1e-13 and r_dual < 1e-13:
                break
            # rebalance the penalty when residuals drift apart
            ratio = np.sqrt((r_prim / (np.max(np.abs(Ax)) + 1e-30)) /
                            (r_dual / (np.max(np.abs(A.T @ y)) + 1e-30) + 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                rho_admm = float(np.clip(rho_admm * ratio, 1e-6, 1e6))
                fac = factor(rho_admm)
    if best is not None:
        return best
    res = _kkt_residual(A, lo, hi, x, y)
    return x, y, res


def batch_solve(variant, observations, e0=None, eta=None, rho=2, tol=1e-6):
    """Minimum total cost trajectory given the whole stream.

    Raises :class:`SolverError` if the consistent QP cannot be solved to a
    KKT residual below ``tol``.
    """
    observations = list(observations)
    if not observations:
        raise ValueError("empty observation stream")
    xs = np.array([o.x for o in observations], dtype=float)
    if np.any(np.diff(np.concatenate([[0.0], xs])) <= 0):
        raise ValueError("observation time stamps must be increasing and positive")
    ys = np.array([o.y for o in observations], dtype=float)
    eps = np.asarray(observations[0].eps, dtype=float)
    T, N = ys.shape
    e0 = default_e0(observations[0], rho) if e0 is None else np.asarray(e0, dtype=float).reshape(N, rho)
    if variant == "smoothing" and (eta is None or not eta > 0):
        raise ValueError("smoothing variant needs eta > 0")
    if variant not in ("consistent", "smoothing"):
        raise ValueError(f"unknown variant {variant!r}")
    G, F, Phi, P1, Q = affine_structure(xs, rho)
    L = _block_cholesky(Q)
    # whitened tails w = L' z  ->  roughness = ||w||^2
    A = solve_triangular(L, G.T, lower=True).T
    tails = np.empty((N, T, rho))
    residual = 0.0
    for n in range(N):
        const = np.einsum("ti,tij,j->t", P1, Phi, e0[n])
        target = ys[:, n] - const
        if variant == "smoothing":
            lhs = np.vstack([A, np.sqrt(eta) * np.eye(A.shape[1])])
            rhs = np.concatenate([target, np.zeros(A.shape[1])])
            wv = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        else:
            wv, _, res = solve_slab_qp(A, target - eps[n], target + eps[n])
            residual = max(residual, res)
            if not res <= tol:
                raise SolverError("batch consistent QP did not converge", res)
        z = solve_triangular(L.T, wv, lower=False)
        tails[n] = z.reshape(T, rho)
    return _assemble(variant, observations, xs, e0, tails, eta, rho, residual)


def _assemble(variant, observations, xs, e0, tails, eta, rho, residual):
    N, T, _ = tails.shape
    e = e0
    x_prev = 0.0
    states, sections, costs = [], [], []
    for t in range(T):
        state = ReconstructionState(x_prev, observations[t], e)
        a = np.concatenate([e, tails[:, t]], axis=1)
        states.append(state)
        sections.append(a)
        costs.append(float(np.sum(step_cost(variant, state, a, eta))))
        e = a @ continuity_matrix(state.u, rho).T
        x_prev = xs[t]
    spline = SplineEstimate(np.concatenate([[0.0], xs]), np.array(sections), rho)
    spec = {"architecture": "batch", "variant": variant, "rho": rho}
    if eta is not None:
        spec["eta"] = eta
    return Trajectory(spec, states, spline.sections, np.array(costs), spline, residual)
