"""Piecewise-polynomial splines in the local monomial basis.

Every section ``t`` covers ``(x[t-1], x[t]]`` and is written as
``g(x) = sum_j a[j] * (x - x[t-1])**j`` for ``j = 0 .. 2*rho - 1``.
Coefficient arrays carry the series on the second-to-last axis, so a
multivariate section is an ``(N, 2*rho)`` array and its flat (wire) form is
the series-major concatenation of the rows.
"""

import json
from dataclasses import dataclass
from math import comb, factorial

import numpy as np

from streamspline._io import dumps17


def _check_width(u):
    u = np.asarray(u, dtype=float)
    if np.any(~(u > 0)):
        raise ValueError(f"section width must be positive, got {u}")
    return u


def basis_vector(x, x_prev, rho):
    """Return ``[1, s, s**2, ..., s**(2*rho-1)]`` with ``s = x - x_prev``."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    s = np.asarray(x, dtype=float) - x_prev
    return s[..., None] ** np.arange(2 * rho)


def _derivative_coeffs(a, k):
    """Coefficients of ``D^k`` of the polynomial with coefficients ``a``."""
    n = a.shape[-1]
    j = np.arange(k, n)
    scale = np.array([factorial(i) // factorial(i - k) for i in j], dtype=float)
    return a[..., k:] * scale


def section_eval(a, x, x_prev, k=0):
    """Evaluate the ``k``-th derivative of one section (Horner in ``x - x_prev``).

    ``a`` may carry leading batch axes; ``x`` may be a scalar or an array
    that broadcasts against them.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    if not 0 <= k < n:
        raise ValueError(f"derivative order {k} outside [0, {n - 1}]")
    c = _derivative_coeffs(a, k)
    s = np.asarray(x, dtype=float) - x_prev
    out = np.zeros(np.broadcast_shapes(c.shape[:-1], s.shape))
    for j in range(c.shape[-1] - 1, -1, -1):
        out = out * s + c[..., j]
    return out


def continuity_matrix(u, rho):
    """Linear map ``E`` (rho x 2rho) from section coefficients to the end-point vector.

    ``E[d, j] = C(j, d) * u**(j - d)``: row ``d`` gives the ``d``-th derivative
    at the right end divided by ``d!``, i.e. the Taylor coefficient that the
    next section must start with.
    """
    u = float(_check_width(u))
    E = np.zeros((rho, 2 * rho))
    for d in range(rho):
        for j in range(d, 2 * rho):
            E[d, j] = comb(j, d) * u ** (j - d)
    return E


def continuity_vector(a, u, rho):
    """End-point Taylor vector of section(s) ``a`` of width ``u``; shape ``(..., rho)``."""
    a = np.asarray(a, dtype=float)
    if a.shape[-1] != 2 * rho:
        raise ValueError(f"expected {2 * rho} coefficients per series, got {a.shape[-1]}")
    return a @ continuity_matrix(u, rho).T


def enforce_continuity(tail, e_prev, rho=None):
    """Assemble full coefficients ``[e_prev ; tail]`` per series.

    Accepts ``(N, rho)`` arrays (returns ``(N, 2*rho)``) or flat series-major
    vectors of length ``N*rho`` together with ``rho`` (returns the flat
    ``2*N*rho`` action).
    """
    tail = np.asarray(tail, dtype=float)
    e_prev = np.asarray(e_prev, dtype=float)
    if tail.shape != e_prev.shape:
        raise ValueError(f"shape mismatch: tail {tail.shape} vs e_prev {e_prev.shape}")
    if tail.ndim == 1:
        if rho is None:
            raise ValueError("rho is required for flat inputs")
        blocks = np.concatenate([e_prev.reshape(-1, rho), tail.reshape(-1, rho)], axis=1)
        return blocks.reshape(-1)
    return np.concatenate([e_prev, tail], axis=-1)


def roughness_matrix(u, rho):
    """Gram matrix of the ``rho``-th derivative of the basis over a section of width ``u``."""
    u = float(_check_width(u))
    n = 2 * rho
    M = np.zeros((n, n))
    for i in range(rho + 1, n + 1):
        for j in range(rho + 1, n + 1):
            p = i + j - 2 * rho - 1
            prod = 1.0
            for k in range(1, rho + 1):
                prod *= (i - k) * (j - k)
            M[i - 1, j - 1] = u**p * prod / p
    return M


@dataclass(frozen=True, eq=False)
class SplineEstimate:
    """A multivariate spline on the grid ``knots[0] = 0 < knots[1] < ...``.

    ``sections`` has shape ``(T, N, 2*rho)``; section ``t`` (0-based) lives on
    ``(knots[t], knots[t+1]]``. Evaluation at ``knots[0]`` uses the first
    section.
    """

    knots: np.ndarray
    sections: np.ndarray
    rho: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        sections = np.asarray(self.sections, dtype=float)
        if sections.ndim != 3 or sections.shape[-1] != 2 * self.rho:
            raise ValueError(f"sections must be (T, N, {2 * self.rho}), got {sections.shape}")
        if knots.shape != (sections.shape[0] + 1,):
            raise ValueError("need exactly one more knot than sections")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        sections.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "sections", sections)

    @property
    def n_sections(self):
        return self.sections.shape[0]

    @property
    def n_series(self):
        return self.sections.shape[1]

    @property
    def widths(self):
        return np.diff(self.knots)

    def locate(self, x):
        """Section index for each ``x`` (half-open sections, ``x = knots[0]`` -> 0)."""
        x = np.asarray(x, dtype=float)
        if np.any(x < self.knots[0]) or np.any(x > self.knots[-1]):
            raise ValueError("evaluation point outside the spline domain")
        idx = np.searchsorted(self.knots, x, side="left") - 1
        return np.clip(idx, 0, self.n_sections - 1)

    def __call__(self, x, k=0):
        """Values (or ``k``-th derivatives) at ``x``; shape ``x.shape + (N,)``."""
        x = np.asarray(x, dtype=float)
        idx = self.locate(x)
        a = self.sections[idx]
        return section_eval(a, x[..., None], self.knots[idx][..., None], k)

    def left_limits(self, k=0):
        """``D^k`` of every section at its right end point; shape ``(T, N)``."""
        u = self.widths[:, None]
        return section_eval(self.sections, u, 0.0, k)

    def right_limits(self, k=0):
        """``D^k`` of every section at its left end point; shape ``(T, N)``."""
        return section_eval(self.sections, 0.0, 0.0, k)

    def continuity_defect(self):
        """Largest jump of derivatives ``0 .. rho-1`` over the interior knots."""
        if self.n_sections < 2:
            return 0.0
        worst = 0.0
        for k in range(self.rho):
            jump = self.left_limits(k)[:-1] - self.right_limits(k)[1:]
            worst = max(worst, float(np.max(np.abs(jump))))
        return worst

    def transform(self, scale, shift):
        """Spline of ``scale * f + shift`` per series (``scale``/``shift`` of length N)."""
        sections = self.sections * np.asarray(scale, dtype=float)[:, None]
        sections[..., 0] += np.asarray(shift, dtype=float)
        return SplineEstimate(self.knots, sections, self.rho)

    def to_dict(self):
        T, N, _ = self.sections.shape
        return {
            "rho": self.rho,
            "n_series": N,
            "knots": self.knots.tolist(),
            "sections": self.sections.reshape(T, -1).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        rho, N = int(d["rho"]), int(d["n_series"])
        sections = np.asarray(d["sections"], dtype=float).reshape(-1, N, 2 * rho)
        return cls(np.asarray(d["knots"], dtype=float), sections, rho)

    def to_json(self):
        return dumps17(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def roughness_quadratic(spline):
    """Roughness ``sum_n int (D^rho f_n)^2`` via the per-section Gram matrices."""
    total = 0.0
    for t, u in enumerate(spline.widths):
        M = roughness_matrix(u, spline.rho)
        a = spline.sections[t]
        total += float(np.einsum("ni,ij,nj->", a, M, a))
    return total


def roughness_numeric(spline, points_per_section=32):
    """Roughness by per-section Gauss-Legendre quadrature of ``(D^rho f)^2``."""
    if points_per_section < 8:
        raise ValueError("points_per_section must be >= 8")
    nodes, weights = np.polynomial.legendre.leggauss(points_per_section)
    total = 0.0
    for t, u in enumerate(spline.widths):
        s = 0.5 * u * (nodes + 1.0)
        d = section_eval(spline.sections[t][:, None, :], s, 0.0, spline.rho)
        total += 0.5 * u * float(np.sum(weights * d**2))
    return total
