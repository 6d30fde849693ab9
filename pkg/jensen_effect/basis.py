"""B-spline and Fourier basis systems with derivative penalties and Gram matrices.

Everything downstream (smoothing, the functional single index fit, the Jensen
tests, ingestion) reduces to the matrices built here.
"""
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline

from .errors import InvalidArgumentError, OutOfDomainError
from .schemas import BasisSpec

BSPLINE = "bspline"
FOURIER = "fourier"

# Gauss-Legendre nodes per panel for Fourier integrands
FOURIER_PANEL_NODES = 20

# Points this close (relative to the domain width) outside [a, b] are snapped back
DOMAIN_SLACK = 1e-12


@dataclass(frozen=True)
class BasisSystem:
    """A finite basis on a closed interval.

    For ``bspline`` the full knot vector repeats each boundary ``order`` times
    and ``knots`` holds only the interior knots. ``order`` is degree + 1, so
    order 6 is quintic. For ``fourier`` the functions are the constant then
    sin/cos pairs at increasing integer frequency, each with unit L2 norm.
    """
    kind: str
    domain: Tuple[float, float]
    n_basis: int
    order: int = 0
    knots: Tuple[float, ...] = field(default_factory=tuple)

    @property
    def lower(self) -> float:
        return self.domain[0]

    @property
    def upper(self) -> float:
        return self.domain[1]

    @property
    def width(self) -> float:
        return self.domain[1] - self.domain[0]

    @cached_property
    def full_knots(self) -> np.ndarray:
        a, b = self.domain
        return np.r_[[a] * self.order, np.asarray(self.knots, dtype=float), [b] * self.order]

    @cached_property
    def spline(self) -> BSpline:
        # vector-valued spline whose j-th component is the j-th basis function
        return BSpline(self.full_knots, np.eye(self.n_basis), self.order - 1, extrapolate=True)

    @cached_property
    def greville(self) -> np.ndarray:
        """Greville abscissae: the line x is represented exactly by these coefficients."""
        t = self.full_knots
        k = self.order
        if k < 2:
            return np.array([0.5 * (t[j] + t[j + 1]) for j in range(self.n_basis)])
        return np.array([t[j + 1:j + k].mean() for j in range(self.n_basis)])

    @cached_property
    def breakpoints(self) -> np.ndarray:
        if self.kind == BSPLINE:
            return np.unique(self.full_knots)
        return np.linspace(self.lower, self.upper, self.n_basis + 2)

    @property
    def panel_nodes(self) -> int:
        return self.order if self.kind == BSPLINE else FOURIER_PANEL_NODES


def make_bspline_basis(domain: Sequence[float], n_basis: int, order: int) -> BasisSystem:
    """B-spline basis with equally spaced interior knots.

    Args:
        domain: (a, b) with a < b
        n_basis: number of functions, at least ``order``
        order: spline order (degree + 1)

    Returns:
        BasisSystem with ``n_basis - order`` interior knots
    """
    a, b = _check_domain(domain)
    if order < 1:
        raise InvalidArgumentError(f"order must be at least 1, got {order}")
    if n_basis < order:
        raise InvalidArgumentError(f"n_basis ({n_basis}) must be >= order ({order})")
    n_interior = n_basis - order
    interior = np.linspace(a, b, n_interior + 2)[1:-1]
    return BasisSystem(kind=BSPLINE, domain=(a, b), n_basis=int(n_basis), order=int(order),
                       knots=tuple(float(k) for k in interior))


def make_fourier_basis(domain: Sequence[float], n_basis: int) -> BasisSystem:
    """Orthonormal Fourier basis: constant, sin(2πk·), cos(2πk·) for k = 1, 2, ..."""
    a, b = _check_domain(domain)
    if n_basis < 1:
        raise InvalidArgumentError(f"n_basis must be positive, got {n_basis}")
    return BasisSystem(kind=FOURIER, domain=(a, b), n_basis=int(n_basis))


def _check_domain(domain: Sequence[float]) -> Tuple[float, float]:
    if len(domain) != 2:
        raise InvalidArgumentError(f"domain must be an interval (a, b), got {domain!r}")
    a, b = float(domain[0]), float(domain[1])
    if not (math.isfinite(a) and math.isfinite(b)) or not b > a:
        raise InvalidArgumentError(f"empty or invalid domain [{a}, {b}]")
    return a, b


def _in_domain(b: BasisSystem, points) -> np.ndarray:
    x = np.atleast_1d(np.asarray(points, dtype=float))
    slack = DOMAIN_SLACK * b.width
    bad = ~((x >= b.lower - slack) & (x <= b.upper + slack))
    if np.any(bad):
        first = x[np.argmax(bad)]
        raise OutOfDomainError(
            f"{int(bad.sum())} point(s) outside [{b.lower}, {b.upper}], first offender {first!r}")
    return np.clip(x, b.lower, b.upper)


def eval_basis(b: BasisSystem, points, deriv: int = 0) -> np.ndarray:
    """Evaluate the ``deriv``-th derivative of every basis function.

    Returns:
        matrix of shape (len(points), n_basis)

    Raises:
        OutOfDomainError: if any point lies outside the basis domain
    """
    if deriv < 0:
        raise InvalidArgumentError(f"deriv must be nonnegative, got {deriv}")
    x = _in_domain(b, points)
    if b.kind == BSPLINE:
        if deriv >= b.order:
            raise InvalidArgumentError(f"deriv ({deriv}) must be < order ({b.order})")
        return np.asarray(b.spline(x, nu=deriv)).reshape(len(x), b.n_basis)
    return _eval_fourier(b, x, deriv)


def _eval_fourier(b: BasisSystem, x: np.ndarray, deriv: int) -> np.ndarray:
    out = np.zeros((len(x), b.n_basis))
    if deriv == 0:
        out[:, 0] = 1.0 / math.sqrt(b.width)
    scale = math.sqrt(2.0 / b.width)
    u = x - b.lower
    for j in range(1, b.n_basis):
        freq = (j + 1) // 2
        omega = 2.0 * math.pi * freq / b.width
        # d^m/dx^m sin(wx) = w^m sin(wx + mπ/2)
        shift = deriv * math.pi / 2.0
        if j % 2 == 1:
            out[:, j] = scale * omega ** deriv * np.sin(omega * u + shift)
        else:
            out[:, j] = scale * omega ** deriv * np.cos(omega * u + shift)
    return out


def quadrature_rule(b: BasisSystem, n_nodes: Optional[int] = None,
                    breakpoints: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule over the basis panels (knot intervals for splines).

    With the default ``order`` nodes per knot interval the rule is exact for
    products of two splines of the basis' degree.
    """
    n = int(n_nodes or b.panel_nodes)
    if n < 1:
        raise InvalidArgumentError(f"n_nodes must be positive, got {n}")
    edges = b.breakpoints if breakpoints is None else np.asarray(breakpoints, dtype=float)
    ref_x, ref_w = leggauss(n)
    lo, hi = edges[:-1], edges[1:]
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = (mid[:, None] + half[:, None] * ref_x[None, :]).ravel()
    weights = (half[:, None] * ref_w[None, :]).ravel()
    return nodes, weights


def penalty_matrix(b: BasisSystem, deriv: int = 2, n_nodes: Optional[int] = None) -> np.ndarray:
    """Roughness penalty: entry (i, j) is the integral of the product of deriv-th derivatives."""
    if b.kind == BSPLINE and deriv >= b.order:
        raise InvalidArgumentError(f"penalty derivative ({deriv}) must be < order ({b.order})")
    nodes, weights = quadrature_rule(b, n_nodes)
    D = eval_basis(b, nodes, deriv)
    P = D.T @ (weights[:, None] * D)
    return 0.5 * (P + P.T)


def inner_product_matrix(a: BasisSystem, b: BasisSystem) -> np.ndarray:
    """Cross Gram matrix: entry (i, j) is the integral of a_i times b_j."""
    if not np.allclose(a.domain, b.domain, rtol=0.0, atol=DOMAIN_SLACK * max(a.width, b.width)):
        raise InvalidArgumentError(f"domain mismatch: {a.domain} vs {b.domain}")
    edges = np.unique(np.r_[a.breakpoints, b.breakpoints])
    n = max(a.panel_nodes, b.panel_nodes)
    nodes, weights = quadrature_rule(a, n, breakpoints=edges)
    Ea = eval_basis(a, nodes)
    Eb = eval_basis(b, nodes)
    return Ea.T @ (weights[:, None] * Eb)


def penalty_null_space(b: BasisSystem, deriv: int = 2) -> np.ndarray:
    """Coefficient vectors spanning polynomials of degree < deriv (the penalty's null space).

    Returns:
        matrix of shape (n_basis, m); m = deriv for splines, 1 (the constant) for Fourier
    """
    if deriv <= 0:
        return np.zeros((b.n_basis, 0))
    if b.kind == FOURIER:
        e0 = np.zeros((b.n_basis, 1))
        e0[0, 0] = math.sqrt(b.width)
        return e0
    if deriv >= b.order:
        raise InvalidArgumentError(f"penalty derivative ({deriv}) must be < order ({b.order})")
    # Schoenberg-Whitney: collocation at the Greville abscissae is invertible
    x = b.greville
    B = eval_basis(b, x)
    z = (x - 0.5 * (b.lower + b.upper)) / (0.5 * b.width)
    V = np.vander(z, deriv, increasing=True)
    return np.linalg.solve(B, V)


def linear_coefficients(b: BasisSystem, intercept: float, slope: float) -> np.ndarray:
    """Coefficients representing x -> intercept + slope * x exactly."""
    if b.kind != BSPLINE or b.order < 2:
        raise InvalidArgumentError("exact line representation needs a B-spline basis of order >= 2")
    return intercept + slope * b.greville


def trapezoid_weights(grid) -> np.ndarray:
    """Weights w with w @ f equal to the trapezoid integral of f sampled on ``grid``."""
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or len(g) < 2:
        raise InvalidArgumentError("trapezoid grid needs at least 2 points")
    h = np.diff(g)
    if np.any(h <= 0):
        raise InvalidArgumentError("trapezoid grid must be strictly increasing")
    w = np.zeros_like(g)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def basis_spec(b: BasisSystem) -> BasisSpec:
    return BasisSpec(kind=b.kind, domain=list(b.domain), n_basis=b.n_basis, order=b.order,
                     knots=list(b.knots))


def basis_from_spec(spec: BasisSpec) -> BasisSystem:
    if spec.kind == FOURIER:
        return make_fourier_basis(spec.domain, spec.n_basis)
    if spec.kind == BSPLINE:
        if spec.knots:
            a, b = _check_domain(spec.domain)
            return BasisSystem(kind=BSPLINE, domain=(a, b), n_basis=spec.n_basis, order=spec.order,
                               knots=tuple(float(k) for k in spec.knots))
        return make_bspline_basis(spec.domain, spec.n_basis, spec.order)
    raise InvalidArgumentError(f"unknown basis kind {spec.kind!r}")
