"""Digamma function."""

import numpy as np

from .errors import DomainError

_SHIFT_TO = 10.0
_SPLIT = 134217729.0  # 2**27 + 1, Veltkamp splitting constant


def _split(a):
    c = _SPLIT * a
    hi = c - (c - a)
    return hi, a - hi


def _reciprocal_residual(x, r):
    # exact residual 1/x - r via Dekker's two-product of r*x
    p = r * x
    rh, rl = _split(r)
    xh, xl = _split(x)
    err = ((rh * xh - p) + rh * xl + rl * xh) + rl * xl
    return ((1.0 - p) - err) / x


def _asymptotic(y):
    z = 1.0 / (y * y)
    series = z * (1 / 12 - z * (1 / 120 - z * (1 / 252 - z * (1 / 240 - z * (
        1 / 132 - z * (691 / 32760 - z / 12))))))
    return np.log(y) - 0.5 / y - series


def digamma(x):
    """Logarithmic derivative of the gamma function for ``x > 0``.

    Shifts the argument upward with ``psi(x) = psi(x + 1) - 1/x`` until it
    reaches 10, then sums the asymptotic expansion through ``x**-14``. The
    leading ``1/x`` term is carried with its rounding residual so results
    stay within a rounding of the true value even where ``|psi|`` is large.
    Accepts scalars or arrays; scalars come back as ``float``.
    """
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise DomainError("digamma is only defined here for x > 0")
    y = x.copy()
    shifted = y < _SHIFT_TO
    lead = np.where(shifted, 1.0 / x, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        resid = np.where(shifted & (x > 1e-290), _reciprocal_residual(x, lead), 0.0)
    y = np.where(shifted, y + 1.0, y)
    acc = np.zeros_like(y)
    todo = y < _SHIFT_TO
    while todo.any():
        acc += np.where(todo, 1.0 / y, 0.0)
        y = np.where(todo, y + 1.0, y)
        todo = y < _SHIFT_TO
    out = ((_asymptotic(y) - acc) - resid) - lead
    return float(out) if scalar else out
