"""Zero-delay policy evaluation and streaming reconstruction.

Each step receives one observation and commits one section per series.
The section head is fixed by continuity with the previous section; the
tail minimizes a per-step quadratic that reduces to a weighted distance
``||tail - alpha||_D^2``. The consistent variant then projects ``alpha``
onto the slab of tails whose section passes through the interval.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from streamspline.spline import (
    SplineEstimate,
    basis_vector,
    continuity_vector,
    enforce_continuity,
    roughness_matrix,
)

ARCHITECTURES = ("myopic", "rnn", "batch")
VARIANTS = ("consistent", "smoothing")
FACE_TOL = 0.0  # slab faces count as interior


class PolicyError(RuntimeError):
    """Internal inconsistency while running a policy."""


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class PolicySpec:
    """Architecture x variant, plus the parameters that variant needs.

    ``rnn`` is an :class:`streamspline.rnn.RnnParameters` and is required
    (only) for the rnn architecture; ``eta`` is required (only) for the
    smoothing variant.
    """

    architecture: str
    variant: str
    eta: Optional[float] = None
    rnn: object = None
    rho: int = 2

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "smoothing":
            if self.eta is None or not self.eta > 0:
                raise ValueError("smoothing variant needs eta > 0")
        elif self.eta is not None:
            raise ValueError("eta only applies to the smoothing variant")
        if (self.architecture == "rnn") != (self.rnn is not None):
            raise ValueError("rnn parameters are required for, and only for, the rnn architecture")
        if self.rnn is not None and self.rnn.rho != self.rho:
            raise ValueError(f"rnn parameters built for rho={self.rnn.rho}, spec has rho={self.rho}")

    @property
    def lambdas(self):
        return softplus(self.rnn.lambda_raw) if self.rnn is not None else None

    def describe(self):
        d = {"architecture": self.architecture, "variant": self.variant, "rho": self.rho}
        if self.eta is not None:
            d["eta"] = self.eta
        if self.lambdas is not None:
            d["lambda"] = self.lambdas.tolist()
        return d


@dataclass(frozen=True, eq=False)
class ReconstructionState:
    """``[x_{t-1}, o_t, e_{t-1}]``; ``e_prev`` has shape ``(N, rho)``."""

    x_prev: float
    obs: object
    e_prev: np.ndarray

    def __post_init__(self):
        if self.obs is not None and not self.obs.x > self.x_prev:
            raise ValueError(f"observation at {self.obs.x} does not follow {self.x_prev}")

    @property
    def u(self):
        return self.obs.x - self.x_prev

    @property
    def rho(self):
        return self.e_prev.shape[-1]


@dataclass(frozen=True, eq=False)
class ProjectionProblem:
    """Weighted slab projection data for one or more series (leading axes)."""

    d: np.ndarray  # (..., rho, rho)
    alpha: np.ndarray  # (..., rho)
    q: np.ndarray  # (rho,) or (..., rho)
    w: np.ndarray  # (...)
    eps: np.ndarray  # (...)


@dataclass(eq=False)
class Trajectory:
    spec: dict
    states: list
    actions: np.ndarray  # (T, N, 2*rho)
    costs: np.ndarray  # (T,)
    spline: SplineEstimate
    residual: float = 0.0

    @property
    def total_cost(self):
        return float(np.sum(self.costs))


class ConsistencyReport(NamedTuple):
    ok: bool
    max_violation: float
    continuity_defect: float


def default_e0(obs, rho):
    """Start at the first interval center with vanishing derivatives."""
    e0 = np.zeros((len(obs.y), rho))
    e0[:, 0] = obs.y
    return e0


def state_update(state, a, o_next):
    """Next state ``[x_t, o_{t+1}, e_t]`` after committing action ``a``."""
    a = np.asarray(a, dtype=float)
    rho = state.rho
    head = a[..., :rho]
    if not np.allclose(head, state.e_prev, rtol=1e-12, atol=1e-12):
        raise PolicyError("action head does not continue the previous section")
    e = continuity_vector(a, state.u, rho)
    return ReconstructionState(state.obs.x, o_next, e)


def step_cost(variant, state, a, eta=None):
    """Per-series cost of action ``a`` (shape ``(N, 2rho)``) at ``state``; shape ``(N,)``."""
    a = np.asarray(a, dtype=float)
    M = roughness_matrix(state.u, state.rho)
    rough = np.einsum("ni,ij,nj->n", a, M, a)
    if variant == "consistent":
        return rough
    if variant == "smoothing":
        if eta is None or not eta > 0:
            raise ValueError("smoothing cost needs eta > 0")
        p = basis_vector(state.obs.x, state.x_prev, state.rho)
        return (a @ p - state.obs.y) ** 2 + eta * rough
    raise ValueError(f"unknown variant {variant!r}")


def quadratic_terms(architecture, variant, state, r=None, eta=None, lam=None):
    """Per-series ``(A, b)`` with the step objective ``a' A a + b' a``.

    Returns arrays of shape ``(N, 2rho, 2rho)`` and ``(N, 2rho)``.
    """
    rho, n = state.rho, state.e_prev.shape[0]
    p = basis_vector(state.obs.x, state.x_prev, rho)
    M = roughness_matrix(state.u, rho)
    y = np.asarray(state.obs.y, dtype=float)
    if variant == "consistent":
        A = np.broadcast_to(M, (n, 2 * rho, 2 * rho)).copy()
        b = np.zeros((n, 2 * rho))
    elif variant == "smoothing":
        A = np.broadcast_to(np.outer(p, p) + eta * M, (n, 2 * rho, 2 * rho)).copy()
        b = -2.0 * y[:, None] * p
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if architecture == "rnn":
        if r is None or lam is None:
            raise ValueError("rnn architecture needs the network output r and lambda")
        lam = np.asarray(lam, dtype=float)
        r = np.asarray(r, dtype=float).reshape(n, rho)
        A = A + lam[:, None, None] * np.eye(2 * rho)
        v = np.concatenate([np.zeros((n, rho)), r], axis=1)
        b = b - 2.0 * lam[:, None] * v
    elif r is not None:
        raise ValueError(f"{architecture} architecture takes no network output")
    return A, b


def reduce_to_projection(A, b, e_prev, p, y, eps):
    """Minimizer-preserving rewrite of the step objective as a weighted distance.

    With ``a = [e_prev; tail]``: ``D = A[tail, tail]`` and
    ``alpha = -D^{-1} (A[tail, head] e_prev + b[tail] / 2)``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    e_prev = np.asarray(e_prev, dtype=float)
    rho = e_prev.shape[-1]
    D = A[..., rho:, rho:]
    coupling = A[..., rho:, :rho]
    rhs = np.einsum("...ij,...j->...i", coupling, e_prev) + 0.5 * b[..., rho:]
    try:
        np.linalg.cholesky(D)
    except np.linalg.LinAlgError as exc:
        raise ValueError("tail block of the quadratic is not positive definite "
                         "(degenerate section width?)") from exc
    alpha = -np.linalg.solve(D, rhs[..., None])[..., 0]
    p = np.asarray(p, dtype=float)
    q = p[..., rho:]
    w = np.asarray(y, dtype=float) - np.einsum("...i,...i->...", e_prev, p[..., :rho])
    return ProjectionProblem(D, alpha, q, w, np.asarray(eps, dtype=float))


def project_slab(d, q, w, eps, beta):
    """Project ``beta`` onto ``{|beta'q - w| <= eps}`` in the ``d``-metric.

    Returns ``(projected, branch, g, s)`` where ``branch`` is +1/-1 for the
    upper/lower face and 0 inside, ``g = d^{-1} q`` and ``s = q' g``.
    Everything broadcasts over leading axes.
    """
    beta = np.asarray(beta, dtype=float)
    q = np.broadcast_to(np.asarray(q, dtype=float), beta.shape)
    g = np.linalg.solve(d, q[..., None])[..., 0]
    s = np.sum(q * g, axis=-1)
    if np.any(s <= 0):
        raise ValueError("degenerate slab normal (q = 0)")
    v = np.sum(beta * q, axis=-1) - w
    branch = np.where(v > eps + FACE_TOL, 1, np.where(v < -eps - FACE_TOL, -1, 0))
    shift = np.where(branch == 1, v - eps, np.where(branch == -1, v + eps, 0.0))
    return beta - (shift / s)[..., None] * g, branch, g, s


def hyperslab_project(prob, beta):
    """Closed-form ``D``-metric projection of ``beta`` onto the problem's slab."""
    return project_slab(prob.d, prob.q, prob.w, prob.eps, beta)[0]


def evaluate_policy(spec, state, r=None):
    """Action ``(N, 2rho)`` of a myopic or rnn policy at ``state``.

    For the rnn architecture ``r`` is the network output for this state
    (``(N*rho,)`` or ``(N, rho)``); the latent recursion lives in
    :func:`reconstruct_stream`.
    """
    if spec.architecture == "batch":
        raise ValueError("the batch policy needs the whole stream; use batch_solve")
    A, b = quadratic_terms(spec.architecture, spec.variant, state, r, spec.eta, spec.lambdas)
    p = basis_vector(state.obs.x, state.x_prev, state.rho)
    prob = reduce_to_projection(A, b, state.e_prev, p, state.obs.y, state.obs.eps)
    tail = hyperslab_project(prob, prob.alpha) if spec.variant == "consistent" else prob.alpha
    return enforce_continuity(tail, state.e_prev)


def reconstruct_stream(spec, observations, e0=None):
    """Run a zero-delay policy over an observation stream.

    ``observations`` is consumed as an iterator: the action for step ``t``
    is committed before observation ``t+1`` is pulled.
    """
    from streamspline.rnn import rnn_forward, state_features, zero_latent

    rho = spec.rho
    knots, sections, costs, states = [0.0], [], [], []
    x_prev, e, h = 0.0, None, None
    if e0 is not None:
        e = np.array(e0, dtype=float)
    if spec.architecture == "rnn":
        h = zero_latent(spec.rnn)
    for obs in observations:
        if e is None:
            e = default_e0(obs, rho)
        if e.ndim == 1:
            e = e.reshape(-1, rho)
        if not obs.x > x_prev:
            raise ValueError(f"out-of-order time stamp {obs.x} after {x_prev}")
        state = ReconstructionState(x_prev, obs, e)
        r = None
        if spec.architecture == "rnn":
            r, h = rnn_forward(spec.rnn, state_features(state), h)
        a = evaluate_policy(spec, state, r)
        costs.append(float(np.sum(step_cost(spec.variant, state, a, spec.eta))))
        states.append(state)
        sections.append(a)
        knots.append(obs.x)
        e = continuity_vector(a, state.u, rho)
        x_prev = obs.x
    if not sections:
        raise ValueError("empty observation stream")
    spline = SplineEstimate(np.array(knots), np.array(sections), rho)
    return Trajectory(spec.describe(), states, spline.sections, np.array(costs), spline)


def consistency_check(spline, observations, tol=1e-9):
    """Interval membership at every sample plus C^(rho-1) joins, both within ``tol``."""
    xs = np.array([o.x for o in observations])
    ys = np.array([o.y for o in observations])
    eps = np.array([o.eps for o in observations])
    f = spline(xs)
    violation = max(0.0, float(np.max(np.abs(f - ys) - eps)))
    defect = spline.continuity_defect()
    ok = violation <= tol and defect <= tol
    return ConsistencyReport(bool(ok), violation, defect)
