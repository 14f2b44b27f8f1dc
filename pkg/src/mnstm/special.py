"""Digamma and trigamma with an explicit domain check.

Evaluation is delegated to scipy.special, which implements the usual
recurrence plus asymptotic expansion.
"""
import numpy as np
from scipy import special as _sp


def _check(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("argument must be strictly positive")
    return x


def digamma(x):
    out = _sp.digamma(_check(x))
    return out if np.ndim(out) else float(out)


def trigamma(x):
    out = _sp.polygamma(1, _check(x))
    return out if np.ndim(out) else float(out)
