"""Ensemble definitions: basic maps r(x), s(x), weights, and the JSON config.

An ensemble is the jpd

    P(x_1..x_N) ~ prod_{i<j} |r(x_i)-r(x_j)| |s(x_i)-s(x_j)|^gamma
                  * prod_i |x_i|^alpha e^{-V(x_i)}

with gamma = 1 for the determinantal (kernel-accessible) families. The
optional ``scale`` c > 0 means every map is evaluated at u = c*x (support
endpoints divide by c); constant prefactors introduced by the scaling
cancel identically in the kernel.
"""

from __future__ import annotations

import json
import math
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import mpmath as mp
import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ConfigError, DivergentMomentError, SupportError
from .expr import Expression, parse_expression
from .quadrature import Domain

SCHEMA_VERSION = 1


class WeightValue(NamedTuple):
    """Weight evaluation result; ``underflow`` marks a positive value that
    rounds to 0.0 in double precision."""

    value: object  # mpf
    underflow: bool


@dataclass(frozen=True)
class AskeyPotential:
    """Critical-ensemble potential: an infinite q-series on [-1, 1]."""

    q: float

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ConfigError("askey q must lie in (0,1)", path="askey_q")


@dataclass(frozen=True)
class TabulatedPotential:
    """Sampled potential (e.g. effective gamma-ensemble potentials imported
    from external data); monotone-safe cubic interpolation, no extrapolation."""

    xs: tuple
    vs: tuple

    def __post_init__(self):
        if len(self.xs) != len(self.vs) or len(self.xs) < 4:
            raise ConfigError("potential table needs >= 4 aligned samples",
                              path="potential_table")
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise ConfigError("potential table grid must be strictly increasing",
                              path="potential_table.x")

    def interpolator(self):
        return PchipInterpolator(np.asarray(self.xs), np.asarray(self.vs))

    def __call__(self, x):
        x = float(x)
        if x < self.xs[0] or x > self.xs[-1]:
            raise SupportError(
                f"tabulated potential queried at {x} outside [{self.xs[0]}, {self.xs[-1]}]")
        return float(self.interpolator()(x))


Potential = Union[Expression, AskeyPotential, TabulatedPotential]


def askey_potential(x, q, tol=1e-12):
    """Critical-ensemble potential sum_{n>=0} ln[1 + 2 q^{n+1} cosh(2 asin x) + q^{2n+2}].

    Truncates once the next term's upper bound 2 q^{n+1} (cosh(2 asin x)+1)
    drops below ``tol``; the absolute error of the returned sum is below
    tol/(1-q). Requires |x| <= 1 and 0 < q < 1.
    """
    if not 0 < q < 1:
        raise ValueError(f"q must lie in (0,1), got {q}")
    xm = mp.mpf(x)
    if abs(xm) > 1:
        raise SupportError(f"askey potential needs |x| <= 1, got {x}")
    qm = mp.mpf(q)
    c = mp.cosh(2 * mp.asin(xm))
    total = mp.mpf(0)
    qp = qm  # q^{n+1}
    while True:
        if 2 * qp * (c + 1) < tol:
            break
        total += mp.log(1 + 2 * qp * c + qp * qp)
        qp *= qm
    return total


def _askey_weight_fn(q, alpha, dps):
    """Fast Askey weight via q-Pochhammer products:

    e^{-V_c(x;q)} = 1 / [ (-q e^{2u}; q)_inf * (-q e^{-2u}; q)_inf ],  u = asin x

    (each series term 1 + 2 q^{n+1} cosh 2u + q^{2n+2} factors as
    (1 + q^{n+1} e^{2u})(1 + q^{n+1} e^{-2u})).
    """
    def w(x):
        qm = mp.mpf(q)
        u = mp.asin(x)
        e2u = mp.exp(2 * u)
        denom = mp.qp(-qm * e2u, qm) * mp.qp(-qm / e2u, qm)
        base = 1 / denom
        if alpha:
            base *= abs(x) ** mp.mpf(alpha)
        return base
    return w


@dataclass(frozen=True)
class BasicMapPair:
    """Basic maps r, s of the two-body interaction; both must be strictly
    increasing on the declared support. ``theta`` is set when s(x) = x^theta."""

    r: Expression
    s: Expression
    theta: Optional[float] = None

    @staticmethod
    def from_theta(theta):
        theta = float(theta)
        s = "x" if theta == 1 else f"x^{theta:g}"
        return BasicMapPair(r=parse_expression("x"), s=parse_expression(s), theta=theta)


@dataclass(frozen=True)
class WeightSpec:
    """One-body weight w(x) = |x|^alpha e^{-V(x)} on ``support``."""

    alpha: float
    potential: Potential
    support: Domain

    def __post_init__(self):
        if self.alpha <= -1:
            raise ConfigError("alpha must exceed -1", path="alpha")
        if isinstance(self.potential, AskeyPotential):
            if self.support.lo < -1 or self.support.hi > 1:
                raise ConfigError("askey weight is defined on [-1,1] only", path="support")


@dataclass(frozen=True)
class EnsembleSpec:
    """Full ensemble description. ``scale=None`` requests auto-normalization
    (resolved when a kernel is built); gamma < 1 ensembles are Monte-Carlo
    only unless an effective potential is supplied."""

    name: str
    n: int
    maps: BasicMapPair
    weight: WeightSpec
    gamma: float = 1.0
    scale: Optional[float] = 1.0
    params: dict = field(default_factory=dict)
    precision: Optional[int] = None

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be a positive integer", path="n")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0,1]", path="gamma")
        if self.scale is not None and self.scale <= 0:
            raise ConfigError("scale must be positive", path="scale")

    # -- scaled evaluation helpers -------------------------------------------

    @property
    def scale_value(self):
        return 1.0 if self.scale is None else float(self.scale)

    @property
    def support(self):
        """Support in user coordinates (declared support divided by scale)."""
        c = self.scale_value
        dom = self.weight.support
        lo = dom.lo / c if math.isfinite(dom.lo) else dom.lo
        hi = dom.hi / c if math.isfinite(dom.hi) else dom.hi
        return Domain(lo, hi)

    def with_scale(self, c):
        return EnsembleSpec(name=self.name, n=self.n, maps=self.maps,
                            weight=self.weight, gamma=self.gamma, scale=float(c),
                            params=dict(self.params), precision=self.precision)

    def with_n(self, n):
        spec = config_to_spec({**spec_to_config(self), "n": int(n), "scale": self.scale})
        return spec

    def in_support(self, x):
        dom = self.support
        return dom.lo <= float(x) <= dom.hi

    def map_fns(self, dps):
        """(r, s) callables in user coordinates at working precision."""
        c = mp.mpf(self.scale_value)
        r = self.maps.r.compile("mpmath")
        s = self.maps.s.compile("mpmath")
        return (lambda x: r(c * x)), (lambda x: s(c * x))

    def monomial_maps(self):
        """((a_r, p_r), (a_s, p_s)) when both maps are monomials c*x^p in
        user coordinates (scale folded into the coefficients), else None."""
        rm = self.maps.r.as_monomial()
        sm = self.maps.s.as_monomial()
        if rm is None or sm is None:
            return None
        c = self.scale_value
        return (rm[0] * c ** rm[1], rm[1]), (sm[0] * c ** sm[1], sm[1])

    def potential_fn(self, dps):
        """V callable in user coordinates at working precision."""
        c = mp.mpf(self.scale_value)
        pot = self.weight.potential
        if isinstance(pot, Expression):
            v = pot.compile("mpmath")
            return lambda x: v(c * x)
        if isinstance(pot, AskeyPotential):
            q = pot.q
            return lambda x: askey_potential(c * x, q, tol=mp.mpf(10) ** (-(dps + 5)))
        interp = pot.interpolator()
        lo, hi = pot.xs[0], pot.xs[-1]

        def v_tab(x):
            u = float(c * x)
            if u < lo or u > hi:
                raise SupportError(f"tabulated potential queried at {u} outside table")
            return mp.mpf(float(interp(u)))
        return v_tab

    def weight_fn(self, dps):
        """w(x) = |c x|^alpha e^{-V(c x)} / c^alpha (constant factors are
        irrelevant to the kernel; dropping c^alpha keeps w(x)=|x|^alpha e^{-V(cx)})."""
        alpha = self.weight.alpha
        pot = self.weight.potential
        c = mp.mpf(self.scale_value)
        if isinstance(pot, AskeyPotential):
            inner = _askey_weight_fn(pot.q, alpha, dps)
            if c == 1:
                return inner
            # evaluate the q-product at u = c*x but keep |x|^alpha in user coords
            plain = _askey_weight_fn(pot.q, 0.0, dps)
            if alpha:
                return lambda x: plain(c * x) * abs(x) ** mp.mpf(alpha)
            return lambda x: plain(c * x)
        v = self.potential_fn(dps)
        am = mp.mpf(alpha)
        if alpha:
            return lambda x: abs(x) ** am * mp.exp(-v(x))
        return lambda x: mp.exp(-v(x))


def eval_weight(spec, x, precision=30):
    """Evaluate the one-body weight at ``x`` (user coordinates).

    Returns :class:`WeightValue`; raises SupportError outside the support.
    A positive value that underflows double precision carries the flag (the
    mpf value itself never underflows).
    """
    weight = spec.weight if isinstance(spec, EnsembleSpec) else spec
    holder = spec if isinstance(spec, EnsembleSpec) else EnsembleSpec(
        name="", n=1, maps=BasicMapPair.from_theta(1), weight=weight)
    dom = holder.support
    xf = float(x)
    if not dom.lo <= xf <= dom.hi:
        raise SupportError(f"{xf} outside support [{dom.lo}, {dom.hi}]")
    with mp.workdps(precision):
        value = holder.weight_fn(precision)(mp.mpf(x))
        return WeightValue(value, value > 0 and float(value) == 0.0)


# -- eager validation ---------------------------------------------------------

_PROBE_POINTS = 257


def _probe_grid(dom: Domain, n=_PROBE_POINTS):
    """Interior probe points covering the (possibly infinite) domain."""
    ts = np.linspace(0.0, 1.0, n + 2)[1:-1]
    kind = dom.kind
    if kind == "finite":
        return [mp.mpf(dom.lo) + (mp.mpf(dom.hi) - mp.mpf(dom.lo)) * mp.mpf(t) for t in ts]
    if kind == "semi_infinite":
        if math.isinf(dom.hi):
            return [mp.mpf(dom.lo) + mp.mpf(t) / (1 - mp.mpf(t)) for t in ts]
        return [mp.mpf(dom.hi) - mp.mpf(t) / (1 - mp.mpf(t)) for t in reversed(ts)]
    ts = np.linspace(-1.0, 1.0, n + 2)[1:-1]
    return [mp.mpf(t) / (1 - mp.mpf(t) ** 2) for t in ts]


def check_monotone_maps(spec: EnsembleSpec, probes=_PROBE_POINTS):
    """Verify r and s are strictly increasing on a probe grid of the support."""
    with mp.workdps(30):
        r, s = spec.map_fns(30)
        grid = _probe_grid(spec.support, probes)
        for label, f in (("r", r), ("s", s)):
            prev = None
            for x in grid:
                val = f(x)
                if not mp.isfinite(val):
                    raise ConfigError(f"map {label} not finite at x={float(x)}", path=label)
                if prev is not None and val <= prev:
                    raise ConfigError(
                        f"map {label} is not strictly increasing near x={float(x)}",
                        path=label)
                prev = val
    theta = spec.maps.theta
    if theta is not None and float(theta) != int(theta) and spec.support.lo < 0:
        raise ConfigError("non-integer theta requires support inf >= 0", path="theta")


def check_moments_converge(spec: EnsembleSpec):
    """Tail-decay probe: |r s|^{N-1} w must decay at infinite support ends."""
    dom = spec.support
    ends = []
    if math.isinf(dom.hi):
        ends.append(1)
    if math.isinf(dom.lo):
        ends.append(-1)
    if not ends:
        return
    with mp.workdps(40):
        r, s = spec.map_fns(40)
        w = spec.weight_fn(40)
        k = spec.n - 1
        for sign in ends:
            other = dom.lo if sign > 0 else dom.hi
            base = max(1.0, abs(other) + 1.0) if math.isfinite(other) else 1.0
            x0 = mp.mpf(sign) * base
            vals = []
            for j in range(60):
                x = x0 * mp.mpf(2) ** (j / mp.mpf(2))
                f = abs(r(x) * s(x)) ** k * w(x) * abs(x)
                vals.append(f)
            peak = max(vals)
            tail = vals[-5:]
            if not all(b < a for a, b in zip(tail, tail[1:])) or tail[-1] > peak * mp.mpf(10) ** -30:
                raise DivergentMomentError(
                    f"moment tail fails to decay toward {'+' if sign > 0 else '-'}inf "
                    f"(order {k}, last probe {mp.nstr(tail[-1], 4)})")


def validate_spec(spec: EnsembleSpec):
    """Run all eager invariant checks (monotone maps, moment tails)."""
    check_monotone_maps(spec)
    check_moments_converge(spec)
    return spec


# -- config file I/O ----------------------------------------------------------

_INF_TOKENS = {"inf": math.inf, "+inf": math.inf, "-inf": -math.inf}


def _endpoint_from_json(v, path):
    if isinstance(v, str):
        token = v.strip().lower()
        if token in _INF_TOKENS:
            return _INF_TOKENS[token]
        raise ConfigError(f"bad endpoint {v!r}", path=path)
    if isinstance(v, (int, float)):
        return float(v)
    raise ConfigError(f"bad endpoint {v!r}", path=path)


def _endpoint_to_json(v):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def config_to_spec(cfg: dict) -> EnsembleSpec:
    """Build a validated EnsembleSpec from a config dict (schema 1)."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    schema = cfg.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {schema}", path="schema")
    try:
        n = int(cfg["n"])
    except KeyError:
        raise ConfigError("missing field", path="n") from None
    params = dict(cfg.get("params", {}))
    if not isinstance(params, dict):
        raise ConfigError("params must be an object", path="params")

    def bound(src, path):
        try:
            e = parse_expression(src)
        except Exception as ex:
            raise ConfigError(f"bad expression {src!r}: {ex}", path=path) from None
        binding = {p: params[p] for p in e.parameters if p in params}
        # figure-potential convention: n defaults to the particle count
        if "n" in e.parameters and "n" not in binding:
            binding["n"] = n
        e = e.bind(**binding)
        if e.parameters:
            raise ConfigError(f"unbound parameters {e.parameters}", path=path)
        return e

    theta = cfg.get("theta")
    s_src = cfg.get("s")
    r_src = cfg.get("r", "x")
    if s_src is None and theta is None:
        raise ConfigError("provide either s or theta", path="s")
    if s_src is None:
        maps = BasicMapPair(r=bound(r_src, "r"),
                            s=BasicMapPair.from_theta(theta).s, theta=float(theta))
    else:
        s_expr = bound(s_src, "s")
        if theta is not None and s_expr != BasicMapPair.from_theta(theta).s:
            raise ConfigError("s and theta disagree", path="theta")
        mono = s_expr.as_monomial()
        inferred = mono[1] if mono is not None and mono[0] == 1.0 else None
        maps = BasicMapPair(r=bound(r_src, "r"), s=s_expr,
                            theta=float(theta) if theta is not None else inferred)

    sup = cfg.get("support")
    if not (isinstance(sup, (list, tuple)) and len(sup) == 2):
        raise ConfigError("support must be [lo, hi]", path="support")
    lo = _endpoint_from_json(sup[0], "support[0]")
    hi = _endpoint_from_json(sup[1], "support[1]")
    try:
        dom = Domain(lo, hi)
    except ValueError as ex:
        raise ConfigError(str(ex), path="support") from None

    alpha = float(cfg.get("alpha", 0.0))
    pot_keys = [k for k in ("potential", "askey_q", "potential_table") if k in cfg]
    if len(pot_keys) != 1:
        raise ConfigError("exactly one of potential/askey_q/potential_table required",
                          path="potential")
    key = pot_keys[0]
    if key == "potential":
        potential = bound(cfg["potential"], "potential")
    elif key == "askey_q":
        potential = AskeyPotential(q=float(cfg["askey_q"]))
    else:
        table = cfg["potential_table"]
        if not isinstance(table, dict) or "x" not in table or "v" not in table:
            raise ConfigError("potential_table needs arrays x and v",
                              path="potential_table")
        potential = TabulatedPotential(xs=tuple(map(float, table["x"])),
                                       vs=tuple(map(float, table["v"])))

    scale = cfg.get("scale", "auto")
    if scale in ("auto", None):
        scale = None
    else:
        scale = float(scale)
    precision = cfg.get("precision")
    spec = EnsembleSpec(
        name=str(cfg.get("name", "ensemble")),
        n=n,
        maps=maps,
        weight=WeightSpec(alpha=alpha, potential=potential, support=dom),
        gamma=float(cfg.get("gamma", 1.0)),
        scale=scale,
        params=params,
        precision=int(precision) if precision is not None else None,
    )
    return validate_spec(spec)


def spec_to_config(spec: EnsembleSpec) -> dict:
    """Canonical config dict for a spec (inverse of config_to_spec up to
    already-bound parameters)."""
    cfg = {
        "schema": SCHEMA_VERSION,
        "name": spec.name,
        "n": spec.n,
        "r": str(spec.maps.r),
        "s": str(spec.maps.s),
        "gamma": spec.gamma,
        "alpha": spec.weight.alpha,
        "support": [_endpoint_to_json(spec.weight.support.lo),
                    _endpoint_to_json(spec.weight.support.hi)],
        "scale": "auto" if spec.scale is None else spec.scale,
        "params": dict(spec.params),
    }
    if spec.maps.theta is not None:
        cfg["theta"] = spec.maps.theta
    pot = spec.weight.potential
    if isinstance(pot, Expression):
        cfg["potential"] = str(pot)
    elif isinstance(pot, AskeyPotential):
        cfg["askey_q"] = pot.q
    else:
        cfg["potential_table"] = {"x": list(pot.xs), "v": list(pot.vs)}
    if spec.precision is not None:
        cfg["precision"] = spec.precision
    return cfg


def load_config(path) -> EnsembleSpec:
    """Load and validate an ensemble config file (JSON, schema 1)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as ex:
            raise ConfigError(f"invalid JSON: {ex}") from None
    return config_to_spec(cfg)


def spec_hash(spec: EnsembleSpec) -> str:
    """Content hash of the canonical config (cache/manifest key)."""
    payload = json.dumps(spec_to_config(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
