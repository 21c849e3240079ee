"""Spectral statistics downstream of a kernel: density, unfolding, Nystrom
discretization, Fredholm-determinant gap functions E(n;s), and spacing
distributions F(n;s), p(n;s).

Unfolding maps the spectrum through the cumulative density so the unfolded
density is 1; gap/spacing statistics of different ensembles then become
directly comparable. The integral eigenproblem on [-s/2, s/2] (bulk) or
[0, s] (hard edge, computed in u = sqrt(x) coordinates where the kernel is
smooth) is discretized with Gauss-Legendre Nystrom rules; E(0;s) is
det(I - A) and higher gap levels follow from the eigenvalues via elementary
symmetric polynomials.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._cheb import Cheb1D, Cheb2D, cheb_nodes
from .errors import DiscretizationError, GridError, LogGasError
from .quadrature import gauss_legendre

__all__ = [
    "DensityCurve", "density", "UnfoldedKernel", "unfold", "DiscreteKernel",
    "nystrom", "fredholm_det", "gap_levels", "GapTable", "spacing_functions",
    "gap_table", "tensorize", "hard_edge_kernel",
]


@dataclass
class DensityCurve:
    """Density samples rho(x) = K(x,x); normalization 'particle' integrates
    to N over the full support, 'unit' to 1."""

    xs: np.ndarray
    rho: np.ndarray
    normalization: str = "particle"
    particle_count: int = 0
    meta: dict = field(default_factory=dict)

    def to_unit(self):
        if self.normalization == "unit":
            return self
        if not self.particle_count:
            raise ValueError("particle_count unknown")
        return DensityCurve(self.xs, self.rho / self.particle_count, "unit",
                            self.particle_count, dict(self.meta))


def density(kernel, grid, normalization="particle") -> DensityCurve:
    """Sample the one-point density K(x, x) along ``grid``."""
    grid = np.asarray(grid, dtype=float)
    rho = kernel.diag(grid)
    curve = DensityCurve(grid, np.asarray(rho, dtype=float), "particle", kernel.n)
    return curve.to_unit() if normalization == "unit" else curve


# -- unfolding -----------------------------------------------------------------


class UnfoldedKernel:
    """Kernel in unfolded coordinates xi (unit mean density).

    Built by :func:`unfold`; exposes the coordinate maps, exact evaluation
    K~(xi, eta) = sqrt(x'(xi) x'(eta)) K(x(xi), x(eta)) (an eigenvalue-
    preserving change of variables of the integral operator), and a fast
    certified Chebyshev surrogate for Nystrom sweeps.
    """

    def __init__(self, base, center, rho_curve: Cheb1D, coverage):
        self.base = base
        self.center = float(center)
        self._rho = rho_curve
        self._cum = rho_curve.antiderivative()
        self._xi0 = float(self._cum(center))
        self.coverage = float(coverage)  # maps valid for |xi| <= coverage
        self._surrogates = {}

    # coordinate maps (float, vectorized)

    def xi_of_x(self, x):
        return np.asarray(self._cum(x), dtype=float) - self._xi0

    def x_of_xi(self, xi):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        if np.any(np.abs(xi) > self.coverage * (1 + 1e-9)):
            raise LogGasError(f"xi outside unfolded coverage +-{self.coverage:.3f}")
        out = np.empty_like(xi)
        a, b = self._rho.a, self._rho.b
        for i, target in enumerate(xi):
            lo, hi = a, b
            x = min(max(self.center + target / max(self._rho(self.center), 1e-12), lo), hi)
            for _ in range(100):
                f = float(self._cum(x)) - self._xi0 - target
                if f > 0:
                    hi = x
                else:
                    lo = x
                d = float(self._rho(x))
                step = f / d if d > 1e-14 else 0.0
                xn = x - step
                if not lo <= xn <= hi:
                    xn = 0.5 * (lo + hi)
                if abs(xn - x) < 1e-15 * max(1.0, abs(x)):
                    x = xn
                    break
                x = xn
            out[i] = x
        return out if out.size > 1 else out[0]

    def jacobian(self, xi):
        """dx/dxi = 1 / rho(x(xi))."""
        return 1.0 / np.asarray(self._rho(self.x_of_xi(xi)), dtype=float)

    # exact kernel path (extended precision underneath)

    def tilde_grid(self, xis, etas) -> np.ndarray:
        """Exact unfolded kernel on a tensor grid."""
        xis = np.atleast_1d(np.asarray(xis, dtype=float))
        etas = np.atleast_1d(np.asarray(etas, dtype=float))
        xs = np.atleast_1d(self.x_of_xi(xis))
        ys = np.atleast_1d(self.x_of_xi(etas))
        K = self.base.grid(xs, ys)
        jx = np.sqrt(1.0 / np.asarray(self._rho(xs), dtype=float))
        jy = np.sqrt(1.0 / np.asarray(self._rho(ys), dtype=float))
        return K * np.outer(jx, jy)

    def tilde(self, xi, eta) -> float:
        return float(self.tilde_grid([xi], [eta])[0, 0])

    def tilde_diag(self, xis) -> np.ndarray:
        xis = np.atleast_1d(np.asarray(xis, dtype=float))
        xs = np.atleast_1d(self.x_of_xi(xis))
        rho_exact = np.asarray(self.base.diag(xs), dtype=float)
        return rho_exact / np.asarray(self._rho(xs), dtype=float)

    # fast surrogate

    def surrogate(self, half_len, certify_tol=1e-7):
        """Chebyshev surrogate of the unfolded kernel on [-S, S]^2, certified
        against the exact path at pseudo-random probe points."""
        S = float(half_len)
        if S > self.coverage:
            raise LogGasError(f"surrogate range {S:.2f} exceeds coverage {self.coverage:.2f}")
        key = round(S, 9)
        got = self._surrogates.get(key)
        if got is not None:
            return got
        n = max(48, int(16 * S) + 17)
        xis = cheb_nodes(n, -S, S)
        vals = self.tilde_grid(xis, xis)
        surr = Cheb2D(-S, S, -S, S, vals)
        rng = np.random.default_rng(7)
        pts = rng.uniform(-S, S, size=(6, 2))
        for xi, eta in pts:
            exact = self.tilde(xi, eta)
            if abs(float(surr(xi, eta)) - exact) > certify_tol * max(1.0, abs(exact)):
                raise LogGasError("unfolded-kernel surrogate failed certification; "
                                  "raise the node count or reduce the range")
        self._surrogates[key] = surr
        return surr


def unfold(kernel, center=None, window=6.0, pad=1.0, bulk_threshold=0.1,
           n_cheb=None) -> UnfoldedKernel:
    """Unfold ``kernel`` around ``center`` so the local mean density is 1.

    ``window`` is the total unfolded length the maps must cover (statistics
    up to s <= window are then available); ``center=None`` picks the density
    median. The center must sit in the bulk: density there must exceed
    ``bulk_threshold`` times the window maximum. Raises on non-monotone
    cumulative density or when the window cannot be covered inside the
    support (center too close to a spectral edge).
    """
    dom = kernel.spec.support
    target = window / 2.0 + pad

    # locate center and local density scale from a coarse profile
    from .gram import _density_profile
    profile, to_x, pa, pb = _density_profile(kernel, n_cheb=160)
    cum = profile.antiderivative()
    total = float(cum(pb))
    if center is None:
        lo, hi = pa, pb
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if float(cum(mid)) < total / 2:
                lo = mid
            else:
                hi = mid
        center = float(to_x(0.5 * (lo + hi)))
    center = float(center)
    if not dom.lo < center < dom.hi:
        raise LogGasError(f"center {center} outside support")

    rho_c = float(kernel.diag(np.array([center]))[0])
    if rho_c <= 0:
        raise LogGasError("density vanishes at the requested center")

    half_lo = half_hi = 1.3 * target / rho_c
    n = n_cheb or max(128, int(28 * target))
    for _ in range(10):
        xa = center - half_lo
        xb = center + half_hi
        edge_hit_lo = edge_hit_hi = False
        if xa < dom.lo:
            xa = dom.lo + 0.02 * (center - dom.lo)
            edge_hit_lo = True
        if xb > dom.hi:
            xb = dom.hi - 0.02 * (dom.hi - center)
            edge_hit_hi = True
        xs = cheb_nodes(n, xa, xb)
        rho_vals = np.asarray(kernel.diag(xs), dtype=float)
        if np.any(rho_vals <= 0):
            raise LogGasError("non-monotone cumulative: density <= 0 inside the window "
                              "(signals a density error)")
        curve = Cheb1D(xa, xb, rho_vals)
        cum2 = curve.antiderivative()
        xi0 = float(cum2(center))
        xi_a = float(cum2(xa)) - xi0
        xi_b = float(cum2(xb)) - xi0
        ok_lo = xi_a <= -target
        ok_hi = xi_b >= target
        if ok_lo and ok_hi:
            break
        if (not ok_lo and edge_hit_lo) or (not ok_hi and edge_hit_hi):
            raise LogGasError(
                f"center {center:.4g} too close to a spectral edge: window of "
                f"{window:.3g} unfolded units does not fit inside the support")
        if not ok_lo:
            half_lo *= 1.7
        if not ok_hi:
            half_hi *= 1.7
    else:
        raise LogGasError("unfolding window expansion failed to converge")

    # bulk check against the window's density maximum
    peak = rho_vals.max()
    if rho_c < bulk_threshold * peak:
        raise LogGasError(
            f"center density {rho_c:.4g} below {bulk_threshold} of the local "
            f"maximum {peak:.4g}: too close to a spectral edge")

    # certify the interpolant against exact density values
    rng = np.random.default_rng(3)
    probes = rng.uniform(xa, xb, size=7)
    exact = np.asarray(kernel.diag(probes), dtype=float)
    err = np.max(np.abs(curve(probes) - exact) / np.maximum(np.abs(exact), 1e-12))
    if err > 1e-7:
        raise LogGasError(f"density interpolant certification failed (rel err {err:.2e})")

    coverage = min(-xi_a, xi_b)
    return UnfoldedKernel(kernel, center, curve, coverage)


# -- Nystrom discretization ------------------------------------------------------


@dataclass
class DiscreteKernel:
    """Nystrom discretization A_ij = K(x_i, x_j) w_j on [a, b]."""

    a: float
    b: float
    nodes: np.ndarray
    weights: np.ndarray
    matrix: np.ndarray
    order: int

    def symmetrized(self) -> np.ndarray:
        """sqrt(w_i) K(x_i,x_j) sqrt(w_j); real-symmetric when K is."""
        sw = np.sqrt(self.weights)
        return self.matrix / self.weights[None, :] * np.outer(sw, sw)


def tensorize(f):
    """Lift a scalar kernel f(x, y) to tensor-grid evaluation."""
    def grid(xs, ys):
        xs = np.atleast_1d(xs)
        ys = np.atleast_1d(ys)
        return np.array([[float(f(x, y)) for y in ys] for x in xs], dtype=float)
    return grid


_gl_cache = {}


def _gl_float(m):
    rule = _gl_cache.get(m)
    if rule is None:
        ref = gauss_legendre(m, -1.0, 1.0, precision=30)
        rule = (np.array([float(x) for x in ref.nodes]),
                np.array([float(w) for w in ref.weights]))
        _gl_cache[m] = rule
    return rule


def nystrom(kernel2d, interval, m: int) -> DiscreteKernel:
    """Discretize the integral operator with kernel ``kernel2d`` (tensor-grid
    callable (xs, ys) -> matrix) on ``interval`` by the m-point
    Gauss-Legendre rule."""
    a, b = float(interval[0]), float(interval[1])
    if m < 4:
        raise ValueError("nystrom order must be >= 4")
    if b < a:
        raise ValueError("interval must satisfy a <= b")
    tnodes, tweights = _gl_float(m)
    nodes = 0.5 * (a + b) + 0.5 * (b - a) * tnodes
    weights = 0.5 * (b - a) * tweights
    if b == a:
        A = np.zeros((m, m))
    else:
        A = np.asarray(kernel2d(nodes, nodes), dtype=float) * weights[None, :]
        if not np.all(np.isfinite(A)):
            raise DiscretizationError("kernel evaluation produced non-finite entries")
    return DiscreteKernel(a=a, b=b, nodes=nodes, weights=weights, matrix=A, order=m)


def fredholm_det(disc: DiscreteKernel) -> float:
    """det(I - A) by LU with log-det accumulation; equals E(0;s) for the
    interval of length s."""
    A = disc.matrix
    if not np.all(np.isfinite(A)):
        raise DiscretizationError("non-finite discrete kernel")
    sign, logabs = np.linalg.slogdet(np.eye(len(A)) - A)
    if sign == 0:
        return 0.0
    return float(sign * math.exp(logabs))


def _elementary_symmetric(mu, n_max):
    """e_0..e_n by the Newton-identity recurrence (stable for these scales;
    no subset enumeration)."""
    n_max = min(n_max, len(mu))
    p = [float(np.sum(mu ** j)) for j in range(n_max + 1)]  # p[0] unused
    e = [1.0]
    for n in range(1, n_max + 1):
        acc = 0.0
        for j in range(1, n + 1):
            acc += (-1) ** (j - 1) * e[n - j] * p[j]
        e.append(acc / n)
    return np.array(e)


def gap_levels(disc: DiscreteKernel, n_max: int, imag_tol=1e-8,
               clip_warn=True) -> np.ndarray:
    """E(0..n_max; s) from the eigenvalues of the discrete kernel.

    E(0;s) = prod(1 - lambda_k); E(n;s) = E(0;s) e_n(lambda/(1-lambda)).
    Eigenvalues with |Im| above imag_tol * ||A|| signal discretization
    failure; lambda >= 1 is clipped just below 1 with a warning.
    """
    A = disc.matrix
    lam = np.linalg.eigvals(A)
    norm = max(np.abs(A).max(), 1e-300)
    bad = np.abs(lam.imag) > imag_tol * norm
    if np.any(bad):
        raise DiscretizationError(
            f"eigenvalue with imaginary part {np.abs(lam.imag).max():.2e} "
            f"(tol {imag_tol * norm:.2e}): refine the discretization")
    lam = lam.real
    upper = 1.0 - 1e-12
    if np.any(lam >= upper):
        if clip_warn:
            warnings.warn("eigenvalue >= 1 clipped; gap values near machine zero",
                          RuntimeWarning, stacklevel=2)
        lam = np.minimum(lam, upper)
    out = np.empty(n_max + 1)
    e0 = float(np.prod(1.0 - lam))
    mu = lam / (1.0 - lam)
    e = _elementary_symmetric(mu, n_max)
    for n in range(n_max + 1):
        out[n] = e0 * (e[n] if n < len(e) else 0.0)
    return out


# -- gap tables and spacing distributions ---------------------------------------


@dataclass
class GapTable:
    """Gap functions on an s-grid, with optional F(n;s), p(n;s)."""

    s: np.ndarray
    E: np.ndarray                      # shape (n_max+1, len(s))
    F: np.ndarray = None
    p: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @property
    def n_max(self):
        return self.E.shape[0] - 1


def _deriv_richardson(values, h, rich_tol=None):
    """-d/ds of tabulated values: Richardson-extrapolated central differences
    (one-sided 4th-order stencils at the edges). Raises GridError when the
    h vs 2h extrapolants disagree beyond rich_tol (relative to curve scale)."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n < 5:
        raise GridError("need at least 5 grid points for differentiation")
    d = np.empty(n)
    i = np.arange(2, n - 2)
    d_h = (v[i + 1] - v[i - 1]) / (2 * h)
    d_2h = (v[i + 2] - v[i - 2]) / (4 * h)
    d[2:-2] = (4 * d_h - d_2h) / 3.0
    # 4th-order one-sided stencils
    d[0] = (-25 * v[0] + 48 * v[1] - 36 * v[2] + 16 * v[3] - 3 * v[4]) / (12 * h)
    d[1] = (-3 * v[0] - 10 * v[1] + 18 * v[2] - 6 * v[3] + v[4]) / (12 * h)
    d[-2] = (3 * v[-1] + 10 * v[-2] - 18 * v[-3] + 6 * v[-4] - v[-5]) / (12 * h)
    d[-1] = (25 * v[-1] - 48 * v[-2] + 36 * v[-3] - 16 * v[-4] + 3 * v[-5]) / (12 * h)
    if rich_tol is not None:
        scale = max(np.max(np.abs(d)), 1e-12)
        disagree = np.max(np.abs(d[2:-2] - d_h)) / scale
        if disagree > rich_tol:
            raise GridError(f"grid too coarse: Richardson disagreement {disagree:.2e} "
                            f"exceeds {rich_tol:.2e}")
    return -d


def spacing_functions(table: GapTable, rich_tol=0.02) -> GapTable:
    """Complete a gap table with F(n;s) = -d/ds sum_{j<=n} E(j;s) and
    p(n;s) = -d/ds sum_{j<=n} F(j;s).

    The s-grid must be uniform and fine enough that the Richardson check
    passes (GridError otherwise).
    """
    s = np.asarray(table.s, dtype=float)
    hs = np.diff(s)
    if len(s) < 5 or np.max(np.abs(hs - hs[0])) > 1e-9 * hs[0]:
        raise GridError("spacing_functions requires a uniform s-grid (>= 5 points)")
    h = float(hs[0])
    nmax = table.n_max
    F = np.empty_like(table.E)
    for n in range(nmax + 1):
        F[n] = _deriv_richardson(np.sum(table.E[: n + 1], axis=0), h, rich_tol)
    p = np.empty_like(table.E)
    for n in range(nmax + 1):
        p[n] = _deriv_richardson(np.sum(F[: n + 1], axis=0), h, rich_tol)
    meta = dict(table.meta)
    meta["h_diff"] = h
    return GapTable(s=s, E=table.E, F=F, p=p, meta=meta)


def gap_table(kernel2d, s_grid, m: int = 48, n_max: int = 4, mode: str = "bulk",
              spacings: bool = True, rich_tol=0.02, threads: int = 1) -> GapTable:
    """Gap functions over an s-grid for a fast 2-d kernel callable.

    mode='bulk': operator on [-s/2, s/2] (unfolded convention);
    mode='hard': operator on [0, s] computed in u = sqrt(x) coordinates —
    ``kernel2d`` must then be the u-form kernel K(u^2, v^2) 2v (see
    :func:`hard_edge_kernel`), which has identical eigenvalues and is smooth
    at the hard edge for integer alpha.
    """
    s_grid = np.asarray(s_grid, dtype=float)
    if np.any(s_grid < 0):
        raise ValueError("s must be nonnegative")

    def one(s):
        if s == 0:
            out = np.zeros(n_max + 1)
            out[0] = 1.0
            return out
        if mode == "bulk":
            disc = nystrom(kernel2d, (-s / 2, s / 2), m)
        elif mode == "hard":
            disc = nystrom(kernel2d, (0.0, math.sqrt(s)), m)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return gap_levels(disc, n_max)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            cols = list(ex.map(one, s_grid))
    else:
        cols = [one(s) for s in s_grid]
    E = np.column_stack(cols)
    table = GapTable(s=s_grid, E=E, meta={"m": m, "mode": mode, "n_max": n_max})
    return spacing_functions(table, rich_tol) if spacings else table


def hard_edge_kernel(kernel, s_max, n_cheb=None, certify_tol=1e-7):
    """Certified fast u-coordinate kernel K(u^2, v^2) 2v for hard-edge gap
    tables on [0, s_max] (requires a hard lower support edge at 0)."""
    dom = kernel.spec.support
    if dom.lo != 0:
        raise LogGasError("hard-edge mode requires support starting at 0")
    ub = math.sqrt(float(s_max))
    n = n_cheb or max(60, int(18 * ub) + 13)
    us = cheb_nodes(n, 0.0, ub)
    K = kernel.grid(us ** 2, us ** 2)
    vals = K * (2 * us)[None, :]
    surr = Cheb2D(0.0, ub, 0.0, ub, vals)
    rng = np.random.default_rng(11)
    pts = rng.uniform(0.0, ub, size=(6, 2))
    for u, v in pts:
        exact = kernel.eval(u * u, v * v) * 2 * v
        if abs(float(surr(u, v)) - exact) > certify_tol * max(1.0, abs(exact)):
            raise LogGasError("hard-edge kernel surrogate failed certification "
                              "(non-integer alpha? use exact evaluation)")
    return surr.grid
