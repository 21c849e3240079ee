"""Closed-form comparator kernels and densities.

Wright's generalized Bessel function J_{a,b}, the hard-edge limit kernels of
the biorthogonal Laguerre/Hermite families (double-sum and integral forms,
cross-checked against each other), the classical sine and Bessel kernels in
conventions fixed by the theta = 1 reduction identities

    (xy)^{alpha/2} K_L^{(alpha,1)}(x,y) = bessel_kernel(alpha, x, y)
    |xy|^{alpha/2} K_H^{(0,1)}(x,y)     = (2/pi) sine_kernel(2x/pi, 2y/pi)

and the Wigner semicircle / Marchenko-Pastur reference densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath as mp
import numpy as np
from scipy.special import jv, jvp

from .errors import LogGasError
from .quadrature import Domain, integrate
from .stats import DensityCurve


@dataclass(frozen=True)
class SeriesPolicy:
    """Truncation policy for the comparator series."""

    tol: float = 1e-12
    max_terms: int = 800

    def __post_init__(self):
        if self.tol <= 0 or self.max_terms < 4:
            raise ValueError("bad series policy")


DEFAULT_POLICY = SeriesPolicy()


def wright_bessel(a, b, x, policy: SeriesPolicy = DEFAULT_POLICY):
    """Wright's generalized Bessel function J_{a,b}(x) = sum_m (-x)^m / (m! Gamma(a+bm)).

    Alternating series; truncated once terms decrease and fall below
    policy.tol. Internally elevates precision to absorb cancellation (the
    largest term grows like e^{c sqrt(x)}); raises if the cancellation
    exceeds the budget after retries.
    """
    if a <= 0 or b <= 0:
        raise ValueError("wright_bessel requires a, b > 0")
    if x < 0:
        raise ValueError("wright_bessel defined here for x >= 0")
    ambient = mp.mp.dps
    extra = int(1.2 * math.sqrt(float(x))) + 15
    for _ in range(5):
        with mp.workdps(ambient + extra):
            xm = mp.mpf(x)
            total = mp.mpf(0)
            term_mag = []
            m = 0
            sign = 1
            xpow = mp.mpf(1)
            fact = mp.mpf(1)
            while m < policy.max_terms:
                term = xpow / (fact * mp.gamma(a + b * m))
                total += sign * term
                term_mag.append(term)
                if m >= 1 and term < term_mag[-2] and term < policy.tol:
                    break
                m += 1
                sign = -sign
                xpow *= xm
                fact *= m
            else:
                raise LogGasError(f"wright_bessel: {policy.max_terms} terms "
                                  "without convergence")
            lost = mp.log10(max(term_mag) / (abs(total) + mp.mpf(10) ** (-ambient - extra)))
            if lost < extra - 5:
                return +total  # rounds into the ambient context on use
        extra *= 2
    raise LogGasError("wright_bessel: cancellation beyond precision budget; "
                      "raise the working precision")


def _laguerre_limit_series(alpha, theta, x, y, policy):
    """Double-sum form of the hard-edge Laguerre limit kernel."""
    with mp.workdps(mp.mp.dps + 25):
        alpha = mp.mpf(alpha)
        theta = mp.mpf(theta)
        xm, ym = mp.mpf(x), mp.mpf(y)
        total = mp.mpf(0)
        tol = mp.mpf(policy.tol) / 100
        k = 0
        xpow = mp.mpf(1)
        kfact = mp.mpf(1)
        prev_row_mag = None
        while k < policy.max_terms:
            row = mp.mpf(0)
            row_mag = mp.mpf(0)
            l = 0
            ypow = mp.mpf(1)
            lfact = mp.mpf(1)
            prev_term = None
            while l < policy.max_terms:
                term = (xpow * ypow * theta /
                        (kfact * mp.gamma((alpha + 1 + k) / theta)
                         * lfact * mp.gamma(alpha + 1 + theta * l)
                         * (alpha + 1 + k + theta * l)))
                row += (-1) ** l * term
                row_mag = max(row_mag, abs(term))
                if prev_term is not None and term < prev_term and term < tol:
                    break
                prev_term = term
                l += 1
                ypow *= ym ** theta
                lfact *= l
            else:
                raise LogGasError("laguerre limit double sum: l-loop did not converge")
            total += (-1) ** k * row
            if prev_row_mag is not None and row_mag < prev_row_mag and row_mag < tol:
                break
            prev_row_mag = row_mag
            k += 1
            xpow *= xm
            kfact *= k
        else:
            raise LogGasError("laguerre limit double sum: k-loop did not converge")
        return total


def _laguerre_limit_integral(alpha, theta, x, y, policy):
    """Integral form: theta * int_0^1 J_{(a+1)/t, 1/t}(x u) J_{a+1, t}((y u)^t) u^a du."""
    a1 = (alpha + 1) / theta
    b1 = 1 / theta

    def f(t):
        return (wright_bessel(a1, b1, x * t, policy)
                * wright_bessel(alpha + 1, theta, (y * t) ** theta, policy)
                * t ** alpha)
    val, _ = integrate(f, Domain(0.0, 1.0), precision=max(mp.mp.dps, 30),
                       tol=policy.tol / 10)
    return theta * val


def laguerre_limit_kernel(alpha, theta, x, y, policy: SeriesPolicy = DEFAULT_POLICY,
                          cross_check: bool = True) -> float:
    """Hard-edge limit kernel of the biorthogonal Laguerre family.

    Returns the integral-form value (better behaved for moderate x, y); the
    double-sum form is evaluated as a cross-check and disagreement beyond the
    combined tolerance raises (signals series misconfiguration).
    """
    if alpha <= -1 or theta <= 0:
        raise ValueError("requires alpha > -1 and theta > 0")
    if x < 0 or y < 0:
        raise ValueError("hard-edge kernel defined for x, y >= 0")
    with mp.workdps(mp.mp.dps + 15):
        integral = _laguerre_limit_integral(mp.mpf(alpha), mp.mpf(theta),
                                            mp.mpf(x), mp.mpf(y), policy)
        if cross_check:
            series = _laguerre_limit_series(alpha, theta, x, y, policy)
            scale = max(abs(integral), abs(series), mp.mpf(1))
            if abs(integral - series) > 20 * policy.tol * scale:
                raise LogGasError(
                    f"laguerre limit kernel: representations disagree "
                    f"({mp.nstr(integral, 10)} vs {mp.nstr(series, 10)})")
        return float(integral)


def hermite_limit_kernel(alpha, theta, x, y, policy: SeriesPolicy = DEFAULT_POLICY,
                         cross_check: bool = True) -> float:
    """Origin limit kernel of the biorthogonal Hermite family:

    K_H^(a,t)(x,y) = K_L^((a-1)/2, t)(x^2, y^2) + x^t y K_L^((a+t)/2, t)(x^2, y^2)

    For negative x the x^t factor requires integer theta.
    """
    theta_f = float(theta)
    if x < 0 and theta_f != int(theta_f):
        raise ValueError("negative x needs integer theta (x^theta must be real)")
    xt = math.copysign(abs(x) ** theta_f, x) if x < 0 else x ** theta_f
    k1 = laguerre_limit_kernel((alpha - 1) / 2.0, theta, x * x, y * y,
                               policy, cross_check)
    k2 = laguerre_limit_kernel((alpha + theta_f) / 2.0, theta, x * x, y * y,
                               policy, cross_check)
    return k1 + xt * y * k2


def sine_kernel(x, y):
    """Bulk sine kernel sin(pi (x-y)) / (pi (x-y)), diagonal value 1."""
    return np.sinc(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))


def bessel_kernel(alpha, x, y):
    """Hard-edge Bessel kernel in the convention

        K(x, y) = int_0^1 J_a(2 sqrt(xt)) J_a(2 sqrt(yt)) dt
                = [sqrt(y) J_a(2 sqrt(x)) J_a'(2 sqrt(y))
                   - sqrt(x) J_a(2 sqrt(y)) J_a'(2 sqrt(x))] / (x - y)

    which is exactly (xy)^{alpha/2} K_L^{(alpha,1)}(x, y).
    """
    x = float(x)
    y = float(y)
    if x < 0 or y < 0:
        raise ValueError("bessel kernel defined for x, y >= 0")
    rx, ry = math.sqrt(x), math.sqrt(y)
    if abs(x - y) < 1e-9 * max(1.0, x):
        a = 2 * math.sqrt(0.5 * (x + y))
        return float(jv(alpha, a) ** 2 - jv(alpha - 1, a) * jv(alpha + 1, a))
    num = ry * jv(alpha, 2 * rx) * jvp(alpha, 2 * ry) \
        - rx * jv(alpha, 2 * ry) * jvp(alpha, 2 * rx)
    return float(num / (x - y))


def reference_density(name: str, params: dict, grid_points: int = 513) -> DensityCurve:
    """Closed-form unit-normalized reference density on its support.

    name='semicircle': params {'radius': R > 0, 'center': optional}
    name='marchenko_pastur': params {'ratio': lambda in (0,1],
                                     'right_edge': optional rescale target}
    """
    if name == "semicircle":
        R = float(params.get("radius", 1.0))
        if R <= 0:
            raise ValueError("radius must be positive")
        c = float(params.get("center", 0.0))
        xs = np.linspace(c - R, c + R, grid_points)
        rho = 2.0 * np.sqrt(np.maximum(R * R - (xs - c) ** 2, 0.0)) / (math.pi * R * R)
        return DensityCurve(xs, rho, "unit", 0)
    if name == "marchenko_pastur":
        lam = float(params.get("ratio", 1.0))
        if not 0 < lam <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        a = (1 - math.sqrt(lam)) ** 2
        b = (1 + math.sqrt(lam)) ** 2
        scale = float(params["right_edge"]) / b if "right_edge" in params else 1.0
        xs = np.linspace(a * scale, b * scale, grid_points)
        u = xs / scale
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = np.sqrt(np.maximum((b - u) * (u - a), 0.0)) / (2 * math.pi * lam * u)
        rho = np.where(np.isfinite(rho), rho, 0.0) / scale
        return DensityCurve(xs, rho, "unit", 0)
    raise ValueError(f"unknown reference density {name!r}")
