"""Extended-precision numerical integration.

Everything runs in mpmath at a configurable number of decimal digits. The
adaptive integrator bisects panels scored by an embedded Gauss-Legendre
pair; panels adjacent to declared-singular edges fall back to a tanh-sinh
(double-exponential) rule, which absorbs algebraic endpoint singularities
x^a with a > -1. Semi-infinite and infinite domains are mapped to finite
ones first:

    [lo, inf)   x = lo + t/(1-t),   t in (0, 1)
    (-inf, hi]  x = hi - t/(1-t),   t in (0, 1)
    (-inf, inf) x = t/(1-t^2),      t in (-1, 1)

`integrate_family` shares one adaptive partition (and all weight-function
evaluations) across a whole family of integrands that differ only by cheap
per-node factors - the access pattern of Gram-moment tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath as mp

from .errors import QuadratureError

_PAIR_LO = 16          # embedded Gauss-Legendre pair orders
_PAIR_HI = 32
_DE_DEPTH = 12         # bisection depth after which edge panels switch to tanh-sinh
_MAX_PANELS = 1 << 16  # hard subdivision budget


@dataclass(frozen=True)
class Domain:
    """Integration interval with extended-real endpoints."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"domain requires lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def kind(self):
        if math.isinf(self.lo) and math.isinf(self.hi):
            return "infinite"
        if math.isinf(self.lo) or math.isinf(self.hi):
            return "semi_infinite"
        return "finite"


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes/weights of a fixed-order rule on [lo, hi] (all mpf)."""

    nodes: tuple
    weights: tuple
    order: int
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        if len(self.nodes) != len(self.weights):
            raise ValueError("nodes/weights length mismatch")
        if any(w <= 0 for w in self.weights):
            raise ValueError("quadrature weights must be positive")

    def apply(self, f):
        return mp.fsum(w * f(x) for x, w in zip(self.nodes, self.weights))


_legendre_cache: dict = {}


def _legendre_pair(n, x):
    """(P_n(x), P_{n-1}(x)) by upward recurrence."""
    p0, p1 = mp.mpf(1), x
    for k in range(2, n + 1):
        p0, p1 = p1, ((2 * k - 1) * x * p1 - (k - 1) * p0) / k
    return p1, p0


def _reference_gauss_legendre(m, dps):
    """Nodes/weights on [-1, 1] at `dps` digits, Newton-refined."""
    key = (m, dps)
    rule = _legendre_cache.get(key)
    if rule is not None:
        return rule
    with mp.workdps(dps + 10):
        eps = mp.mpf(10) ** (-(dps + 5))
        nodes, weights = [], []
        for k in range(1, m // 2 + 1):
            x = mp.cos(mp.pi * (k - mp.mpf(1) / 4) / (m + mp.mpf(1) / 2))
            for _ in range(100):
                pn, pnm1 = _legendre_pair(m, x)
                dp = m * (x * pn - pnm1) / (x * x - 1)
                dx = pn / dp
                x -= dx
                if abs(dx) < eps:
                    break
            pn, pnm1 = _legendre_pair(m, x)
            dp = m * (x * pn - pnm1) / (x * x - 1)
            w = 2 / ((1 - x * x) * dp * dp)
            nodes.append(x)
            weights.append(w)
        out_nodes, out_weights = [], []
        for x, w in zip(nodes, weights):
            out_nodes.append(-x)
            out_weights.append(w)
        if m % 2 == 1:
            x = mp.mpf(0)
            _, pnm1 = _legendre_pair(m, x)
            dp = m * (-pnm1) / (-1)
            out_nodes.append(x)
            out_weights.append(2 / (dp * dp))
        for x, w in zip(reversed(nodes), reversed(weights)):
            out_nodes.append(x)
            out_weights.append(w)
    rule = (tuple(out_nodes), tuple(out_weights))
    _legendre_cache[key] = rule
    return rule


def gauss_legendre(m: int, lo, hi, precision: int = 30) -> QuadratureRule:
    """m-point Gauss-Legendre rule affinely mapped to [lo, hi].

    Exact (to `precision` digits) for polynomials of degree <= 2m-1.
    """
    if m < 1:
        raise ValueError("order must be >= 1")
    if not lo < hi:
        raise ValueError("requires lo < hi")
    ref_nodes, ref_weights = _reference_gauss_legendre(m, precision)
    with mp.workdps(precision + 10):
        a, b = mp.mpf(lo), mp.mpf(hi)
        half, mid = (b - a) / 2, (a + b) / 2
        nodes = tuple(mid + half * t for t in ref_nodes)
        weights = tuple(half * w for w in ref_weights)
    return QuadratureRule(nodes=nodes, weights=weights, order=m, lo=float(lo), hi=float(hi))


# -- tanh-sinh rules ---------------------------------------------------------

_ts_cache: dict = {}


def _tanhsinh_levels(dps, max_level=7):
    """Nested tanh-sinh data on (-1, 1), stored as endpoint distances.

    Level L uses step h = 2^-L over abscissas t = k*h; each level lists only
    the nodes NEW at that level (level 0: integer k >= 1; level L >= 1: odd
    k) as pairs (delta, w) where delta = 1 - tanh(u) = 2/(e^{2u}+1) is the
    distance of the node to the endpoint (so callers can anchor nodes at an
    interval edge without catastrophic rounding). The k=0 center weight is
    returned separately. Raw weights are unscaled by h; a level-L sum is
    h_L * (prefix sum through level L). Truncation runs deep enough for
    algebraic endpoint singularities x^a, a > -1.
    """
    key = (dps, max_level)
    cached = _ts_cache.get(key)
    if cached is not None:
        return cached
    with mp.workdps(dps + 10):
        w_cut = mp.mpf(10) ** (-2 * (dps + 8))
        d_cut = mp.mpf(10) ** (-5 * (dps + 8))
        piby2 = mp.pi / 2
        levels = []
        for lev in range(0, max_level + 1):
            h = mp.mpf(2) ** (-lev)
            items = []
            k = 1
            step = 1 if lev == 0 else 2
            while True:
                t = k * h
                u = piby2 * mp.sinh(t)
                delta = 2 / (mp.exp(2 * u) + 1)
                w = piby2 * mp.cosh(t) / mp.cosh(u) ** 2
                if w < w_cut and delta < d_cut:
                    break
                items.append((delta, w))
                k += step
            levels.append(items)
        center_w = piby2
    _ts_cache[key] = (center_w, levels)
    return _ts_cache[key]


# -- adaptive family integrator ----------------------------------------------


class _Panel:
    __slots__ = ("a", "b", "depth", "xs_lo", "js_lo", "xs_hi", "js_hi",
                 "bases_lo", "bases_hi", "vals", "de")

    def __init__(self, a, b, depth):
        self.a, self.b, self.depth = a, b, depth
        self.vals = {}
        self.de = None


def _map_nodes(rule, a, b):
    half, mid = (b - a) / 2, (a + b) / 2
    nodes, weights = rule
    return [mid + half * t for t in nodes], [half * w for w in weights]


class _FamilyIntegrator:
    """One adaptive partition shared across a family of integrands.

    base_fn(x) -> opaque base value (expensive; evaluated once per node);
    members[k](base, x) -> integrand value at x (cheap). The transform's
    jacobian is applied by the engine.
    """

    def __init__(self, base_fn, members, domain, precision, breakpoints=(), max_panels=_MAX_PANELS):
        self.base_fn = base_fn
        self.members = members
        self.dps = precision
        self.max_panels = max_panels
        self.domain = domain
        with mp.workdps(precision + 10):
            self.phi, self.jac, (ta, tb) = _transform(domain, precision)
            edges = [mp.mpf(ta)]
            for bp in sorted(breakpoints):
                tbp = _inverse_transform(domain, bp, precision)
                if tbp is not None and ta < tbp < tb:
                    edges.append(tbp)
            edges.append(mp.mpf(tb))
            self.singular_edges = set(map(str, edges))
            self.panels = [_Panel(edges[i], edges[i + 1], 0)
                           for i in range(len(edges) - 1)]
            self.rule_lo = _reference_gauss_legendre(_PAIR_LO, precision)
            self.rule_hi = _reference_gauss_legendre(_PAIR_HI, precision)
            for p in self.panels:
                self._fill(p)

    def _fill(self, panel):
        xs, js, bases = {}, {}, {}
        for tag, rule in (("lo", self.rule_lo), ("hi", self.rule_hi)):
            ts, ws = _map_nodes(rule, panel.a, panel.b)
            xvals, jvals, bvals = [], [], []
            for t, w in zip(ts, ws):
                x = self.phi(t)
                j = self.jac(t) * w
                xvals.append(x)
                jvals.append(j)
                bvals.append(self.base_fn(x))
            xs[tag], js[tag], bases[tag] = xvals, jvals, bvals
        panel.xs_lo, panel.js_lo, panel.bases_lo = xs["lo"], js["lo"], bases["lo"]
        panel.xs_hi, panel.js_hi, panel.bases_hi = xs["hi"], js["hi"], bases["hi"]

    def _panel_member(self, panel, k):
        got = panel.vals.get(k)
        if got is not None:
            return got
        g = self.members[k]
        if panel.de is not None:
            val, err = self._de_member(panel, k)
            panel.vals[k] = (val, err)
            return panel.vals[k]
        i_lo = mp.fsum(j * g(b, x) for x, j, b in zip(panel.xs_lo, panel.js_lo, panel.bases_lo))
        i_hi = mp.fsum(j * g(b, x) for x, j, b in zip(panel.xs_hi, panel.js_hi, panel.bases_hi))
        if not (mp.isfinite(i_lo) and mp.isfinite(i_hi)):
            raise QuadratureError("non-finite sample in integrand",
                                  worst_interval=(float(panel.a), float(panel.b)))
        panel.vals[k] = (i_hi, abs(i_hi - i_lo))
        return panel.vals[k]

    def _to_de(self, panel):
        """Replace GL data with tanh-sinh data on this panel.

        Nodes are anchored at the panel edges (a + half*delta, b - half*delta)
        so they never round onto a singular endpoint; once rounding makes a
        node coincide with the edge, that side stops producing nodes and the
        omitted tail shows up in the error estimate via the last terms.
        """
        center_w, levels = _tanhsinh_levels(self.dps)
        a, b = panel.a, panel.b
        half, mid = (b - a) / 2, (a + b) / 2
        t_nodes = [mid]
        raw_w = [center_w * half]
        xphys = [self.phi(mid)]
        bases = [self.base_fn(xphys[0])]
        marks = []  # node-count prefix per completed level
        edge_idx = []  # indices of each level's outermost surviving nodes
        for items in levels:
            outermost = []
            for delta, w in items:
                for tt in (a + half * delta, b - half * delta):
                    if tt == a or tt == b:
                        continue
                    t_nodes.append(tt)
                    raw_w.append(half * w)
                    xp = self.phi(tt)
                    xphys.append(xp)
                    bases.append(self.base_fn(xp))
                    outermost.append(len(t_nodes) - 1)
            marks.append(len(t_nodes))
            edge_idx.append(outermost[-4:] if outermost else [])
        jacs = [self.jac(t) for t in t_nodes]
        panel.de = (xphys, raw_w, jacs, bases, marks, edge_idx)
        panel.vals = {}

    def _de_member(self, panel, k):
        g = self.members[k]
        xphys, raw_w, jacs, bases, marks, edge_idx = panel.de
        terms = [raw_w[i] * jacs[i] * g(bases[i], xphys[i]) for i in range(len(xphys))]
        if not all(mp.isfinite(t) for t in terms):
            raise QuadratureError("non-finite sample in integrand",
                                  worst_interval=(float(panel.a), float(panel.b)))
        sums = [mp.mpf(2) ** (-lev) * mp.fsum(terms[: marks[lev]])
                for lev in range(len(marks))]
        best = sums[-1]
        err = abs(sums[-1] - sums[-2]) if len(sums) >= 2 else abs(best)
        # truncation tail: double-exponential decay means the omitted part is
        # on the scale of the outermost retained terms
        h_fin = mp.mpf(2) ** (-(len(marks) - 1))
        tail = max((abs(terms[i]) for i in edge_idx[-1]), default=mp.mpf(0))
        err += 10 * h_fin * tail
        return best, err

    def refine(self, member_ids, tols, rel=None):
        """Refine the partition until every listed member integrates to its
        absolute tolerance (or, if ``rel`` is given, to
        max(tols[k], rel*|value|)); returns {k: (value, err_est)}."""
        stall = {}
        with mp.workdps(self.dps + 10):
            while True:
                failing = None
                for k in member_ids:
                    total_err = mp.fsum(self._panel_member(p, k)[1] for p in self.panels)
                    target = tols[k]
                    if rel is not None:
                        value = mp.fsum(self._panel_member(p, k)[0] for p in self.panels)
                        target = max(target, rel * abs(value))
                    if total_err > target:
                        failing = k
                        break
                if failing is None:
                    break
                count, best = stall.get(failing, (0, mp.inf))
                if total_err < best / 2:
                    stall[failing] = (0, total_err)
                elif count > 60:
                    raise QuadratureError(
                        f"non-convergence: error estimate stalled at {mp.nstr(total_err, 4)}")
                else:
                    stall[failing] = (count + 1, min(best, total_err))
                worst_panel, worst_err = None, mp.mpf(-1)
                for p in self.panels:
                    if p.de is not None:
                        continue
                    e = self._panel_member(p, failing)[1]
                    if e > worst_err:
                        worst_panel, worst_err = p, e
                if worst_panel is None:
                    raise QuadratureError(
                        "non-convergence: all panels exhausted (tanh-sinh included)")
                if len(self.panels) >= self.max_panels:
                    raise QuadratureError(
                        f"subdivision budget {self.max_panels} exceeded",
                        worst_interval=(float(worst_panel.a), float(worst_panel.b)))
                edge_adj = (str(worst_panel.a) in self.singular_edges or
                            str(worst_panel.b) in self.singular_edges)
                if edge_adj and worst_panel.depth >= _DE_DEPTH:
                    self._to_de(worst_panel)
                else:
                    self._split(worst_panel)
            return {k: (mp.fsum(self._panel_member(p, k)[0] for p in self.panels),
                        mp.fsum(self._panel_member(p, k)[1] for p in self.panels))
                    for k in member_ids}

    def _split(self, panel):
        midpoint = (panel.a + panel.b) / 2
        left = _Panel(panel.a, midpoint, panel.depth + 1)
        right = _Panel(midpoint, panel.b, panel.depth + 1)
        self._fill(left)
        self._fill(right)
        i = self.panels.index(panel)
        self.panels[i: i + 1] = [left, right]


def _transform(domain, dps):
    """Map the domain to a finite (ta, tb) with callables x(t), jac(t)."""
    kind = domain.kind
    if kind == "finite":
        return (lambda t: t), (lambda t: mp.mpf(1)), (mp.mpf(domain.lo), mp.mpf(domain.hi))
    if kind == "semi_infinite":
        if math.isinf(domain.hi):
            lo = mp.mpf(domain.lo)
            return (lambda t: lo + t / (1 - t)), (lambda t: (1 - t) ** -2), (mp.mpf(0), mp.mpf(1))
        hi = mp.mpf(domain.hi)
        return (lambda t: hi - t / (1 - t)), (lambda t: (1 - t) ** -2), (mp.mpf(0), mp.mpf(1))
    return ((lambda t: t / (1 - t * t)),
            (lambda t: (1 + t * t) / (1 - t * t) ** 2),
            (mp.mpf(-1), mp.mpf(1)))


def _inverse_transform(domain, x, dps):
    """t such that phi(t) = x, or None if x is not interior."""
    kind = domain.kind
    x = mp.mpf(x)
    if kind == "finite":
        return x
    if kind == "semi_infinite":
        if math.isinf(domain.hi):
            u = x - mp.mpf(domain.lo)
        else:
            u = mp.mpf(domain.hi) - x
        if u <= 0:
            return None
        return u / (1 + u)
    if x == 0:
        return mp.mpf(0)
    return (-1 + mp.sqrt(1 + 4 * x * x)) / (2 * x)


def integrate(f, domain: Domain, precision: int = 30, tol=None, breakpoints=()):
    """Adaptive integral of ``f`` over ``domain``.

    Returns (value, err_est) as mpf with |value - integral| <= err_est <= tol
    for integrands analytic away from endpoints, with algebraic endpoint
    singularities x^a (a > -1) and exponential/Gaussian tails. Raises
    QuadratureError on non-convergence (with the worst subinterval) or on a
    non-finite sample.
    """
    if tol is None:
        tol = mp.mpf(10) ** (-(precision - 6))
    tol = mp.mpf(tol)
    if tol <= 0:
        raise ValueError("tol must be positive")
    eng = _FamilyIntegrator(lambda x: f(x), [lambda base, x: base], domain,
                            precision, breakpoints=breakpoints)
    out = eng.refine([0], {0: tol})
    return out[0]


def integrate_family(base_fn, members, domain: Domain, precision: int = 30,
                     tols=None, rel=None, breakpoints=(), probe_ids=None):
    """Integrate a family of integrands over one shared adaptive partition.

    base_fn(x) is evaluated once per quadrature node and its result handed
    to every members[k](base, x). ``tols`` maps member index -> absolute
    tolerance (one mpf default for all if a scalar); ``rel`` optionally
    relaxes each target to max(tol, rel*|value|). Returns a list of
    (value, err_est) per member.
    """
    n = len(members)
    if tols is None:
        tols = mp.mpf(10) ** (-(precision - 6))
    if not isinstance(tols, dict):
        tols = {k: mp.mpf(tols) for k in range(n)}
    eng = _FamilyIntegrator(base_fn, members, domain, precision, breakpoints=breakpoints)
    ids = list(range(n))
    if probe_ids:
        eng.refine(list(probe_ids), tols, rel=rel)  # pre-shape the partition
    out = eng.refine(ids, tols, rel=rel)
    return [out[k] for k in ids]
