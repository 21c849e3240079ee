"""Chebyshev interpolation helpers (first-kind nodes, numpy backend).

Used to turn expensive extended-precision kernel/density evaluations into
fast double-precision surrogates; builders certify the surrogate against
exact values at probe points before use.
"""

from __future__ import annotations

import numpy as np
from numpy.polynomial import chebyshev as C


def cheb_nodes(n: int, a: float, b: float) -> np.ndarray:
    """n Chebyshev nodes of the first kind mapped to [a, b], ascending."""
    theta = (2 * np.arange(n) + 1) * np.pi / (2 * n)
    x = np.cos(theta)[::-1]
    return 0.5 * (a + b) + 0.5 * (b - a) * x


def _coeff_matrix(n: int) -> np.ndarray:
    theta = (2 * np.arange(n) + 1) * np.pi / (2 * n)
    k = np.arange(n)[:, None]
    M = (2.0 / n) * np.cos(k * theta[None, :])
    M[0] *= 0.5
    return M[:, ::-1]  # match ascending node order


class Cheb1D:
    """Chebyshev interpolant through values at first-kind nodes on [a, b]."""

    def __init__(self, a, b, values):
        self.a, self.b = float(a), float(b)
        values = np.asarray(values, dtype=float)
        self.coef = _coeff_matrix(len(values)) @ values

    def _t(self, x):
        return (2.0 * np.asarray(x, dtype=float) - (self.a + self.b)) / (self.b - self.a)

    def __call__(self, x):
        return C.chebval(self._t(x), self.coef)

    def derivative(self):
        out = Cheb1D.__new__(Cheb1D)
        out.a, out.b = self.a, self.b
        out.coef = C.chebder(self.coef) * (2.0 / (self.b - self.a))
        return out

    def antiderivative(self):
        """Antiderivative vanishing at a."""
        out = Cheb1D.__new__(Cheb1D)
        out.a, out.b = self.a, self.b
        out.coef = C.chebint(self.coef) * ((self.b - self.a) / 2.0)
        out.coef[0] -= C.chebval(-1.0, out.coef)
        return out


class Cheb2D:
    """Tensor Chebyshev interpolant on [a,b] x [c,d] from a value grid at
    first-kind nodes (values[i, j] at (x_i, y_j))."""

    def __init__(self, a, b, c, d, values):
        self.a, self.b, self.c, self.d = map(float, (a, b, c, d))
        values = np.asarray(values, dtype=float)
        nx, ny = values.shape
        self.coef = _coeff_matrix(nx) @ values @ _coeff_matrix(ny).T

    def _tx(self, x):
        return (2.0 * np.asarray(x, dtype=float) - (self.a + self.b)) / (self.b - self.a)

    def _ty(self, y):
        return (2.0 * np.asarray(y, dtype=float) - (self.c + self.d)) / (self.d - self.c)

    def __call__(self, x, y):
        """Pointwise evaluation (broadcasting pairs)."""
        return C.chebval2d(self._tx(x), self._ty(y), self.coef)

    def grid(self, xs, ys):
        """Tensor-grid evaluation: returns matrix [i, j] = f(xs[i], ys[j])."""
        return C.chebgrid2d(self._tx(xs), self._ty(ys), self.coef)
