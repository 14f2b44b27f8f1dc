"""Tangent-based adaptive rejection sampling for log-concave scalar densities."""
from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize_scalar


class NonConcaveKernelError(RuntimeError):
    """The target log-density violated concavity during envelope construction."""


class ArsEnvelope:
    """Piecewise-exponential upper hull from tangents; chords give the squeeze.

    ``abscissae`` stay sorted; ``values`` and ``slopes`` hold h(x) and h'(x).
    """

    def __init__(self, logf, dlogf, lower, upper, points, name="kernel",
                 concavity_tol=1e-8):
        self.logf = logf
        self.dlogf = dlogf
        self.lower = float(lower)
        self.upper = float(upper)
        self.name = name
        self.tol = concavity_tol
        self.abscissae = []
        self.values = []
        self.slopes = []
        for x in sorted(set(float(v) for v in points)):
            self._insert(x)
        if not self.abscissae:
            raise ValueError("envelope needs at least one interior point")
        if math.isinf(self.lower) and self.slopes[0] <= 0:
            raise ValueError(f"{name}: leftmost slope must be positive on an unbounded support")
        if math.isinf(self.upper) and self.slopes[-1] >= 0:
            raise ValueError(f"{name}: rightmost slope must be negative on an unbounded support")
        self._rebuild()

    def _insert(self, x):
        h = float(self.logf(x))
        d = float(self.dlogf(x))
        if not (math.isfinite(h) and math.isfinite(d)):
            raise ValueError(f"{self.name}: non-finite log-density at {x!r}")
        j = int(np.searchsorted(self.abscissae, x))
        if j < len(self.abscissae) and self.abscissae[j] == x:
            return
        scale = self.tol * max(1.0, abs(d))
        if j > 0 and self.slopes[j - 1] < d - scale:
            raise NonConcaveKernelError(
                f"{self.name}: derivative increases between {self.abscissae[j - 1]!r} and {x!r}")
        if j < len(self.abscissae) and d < self.slopes[j] - scale:
            raise NonConcaveKernelError(
                f"{self.name}: derivative increases between {x!r} and {self.abscissae[j]!r}")
        self.abscissae.insert(j, x)
        self.values.insert(j, h)
        self.slopes.insert(j, d)

    def _rebuild(self):
        x = np.array(self.abscissae)
        h = np.array(self.values)
        d = np.array(self.slopes)
        # tangent intersections
        z = np.empty(x.size + 1)
        z[0], z[-1] = self.lower, self.upper
        if x.size > 1:
            dd = d[:-1] - d[1:]
            with np.errstate(divide="ignore", invalid="ignore"):
                zi = (h[1:] - h[:-1] - x[1:] * d[1:] + x[:-1] * d[:-1]) / (d[:-1] - d[1:])
            mid = 0.5 * (x[:-1] + x[1:])
            zi = np.where(np.abs(dd) > 1e-300, zi, mid)
            z[1:-1] = np.clip(zi, x[:-1], x[1:])
        self._x, self._h, self._d, self._z = x, h, d, z
        # log mass of each exponential piece
        logm = np.empty(x.size)
        for j in range(x.size):
            logm[j] = self._log_piece_mass(h[j], d[j], x[j], z[j], z[j + 1])
        self._logm = logm
        mx = logm.max()
        w = np.exp(logm - mx)
        self._cum = np.cumsum(w) / w.sum()

    @staticmethod
    def _log_piece_mass(h, d, x, a, b):
        # integral of exp(h + d (t - x)) over (a, b)
        if b <= a:
            return -math.inf
        if abs(d) < 1e-12:
            return h + math.log(b - a)
        if d > 0:
            hb = h + d * (b - x)
            span = d * (b - a)
            return hb - math.log(d) + _log1mexp(span)
        ha = h + d * (a - x)
        span = -d * (b - a)
        return ha - math.log(-d) + _log1mexp(span)

    def _upper(self, t, j):
        return self._h[j] + self._d[j] * (t - self._x[j])

    def _squeeze(self, t):
        x = self._x
        if t < x[0] or t > x[-1]:
            return -math.inf
        j = int(np.searchsorted(x, t, side="right")) - 1
        if j >= x.size - 1:
            return self._h[-1]
        w = (t - x[j]) / (x[j + 1] - x[j])
        return (1 - w) * self._h[j] + w * self._h[j + 1]

    def _draw_from_hull(self, rng):
        u = rng.random()
        j = int(np.searchsorted(self._cum, u, side="right"))
        j = min(j, self._x.size - 1)
        a, b = self._z[j], self._z[j + 1]
        d, x, h = self._d[j], self._x[j], self._h[j]
        v = rng.random()
        if abs(d) < 1e-12:
            t = a + v * (b - a)
        elif d > 0:
            # invert within (a, b) anchored at b for stability
            span = d * (b - a) if math.isfinite(a) else math.inf
            t = b + math.log(v + (1 - v) * math.exp(-span)) / d if math.isfinite(span) \
                else b + math.log(v) / d
        else:
            span = -d * (b - a) if math.isfinite(b) else math.inf
            t = a + math.log(v + (1 - v) * math.exp(-span)) / d if math.isfinite(span) \
                else a + math.log(v) / d
        t = min(max(t, a), b)
        return t, j

    def sample(self, rng, max_iter=10000):
        for _ in range(max_iter):
            t, j = self._draw_from_hull(rng)
            if not (self.lower < t < self.upper):
                continue
            u = rng.random()
            up = self._upper(t, j)
            if math.log(u) <= self._squeeze(t) - up:
                return t
            h = float(self.logf(t))
            if h > up + self.tol * max(1.0, abs(h)):
                # tangents of a concave function never lie below it
                raise NonConcaveKernelError(
                    f"{self.name}: log-density exceeds its tangent hull at {t!r}")
            if math.log(u) <= h - up:
                return t
            self._insert(t)
            self._rebuild()
        raise RuntimeError(f"{self.name}: adaptive rejection failed to accept")


def _log1mexp(x):
    # log(1 - exp(-x)) for x > 0
    if x == math.inf:
        return 0.0
    if x <= 0:
        return -math.inf
    if x < 0.693:
        return math.log(-math.expm1(-x))
    return math.log1p(-math.exp(-x))


def _find_mode(logf, lower, upper, dlogf):
    lo, hi = lower, upper
    if math.isinf(hi):
        start = max(lo, 0.0) + 1.0 if math.isfinite(lo) else 1.0
        step = 1.0
        hi = start
        while dlogf(hi) > 0:
            step *= 2.0
            hi = start + step
            if step > 1e12:
                raise ValueError("could not bracket the mode")
    if math.isinf(lo):
        start = min(hi, 0.0) - 1.0
        step = 1.0
        lo = start
        while dlogf(lo) < 0:
            step *= 2.0
            lo = start - step
            if step > 1e12:
                raise ValueError("could not bracket the mode")
    width = hi - lo
    eps = 1e-9 * max(1.0, width)
    a, b = lo + eps, hi - eps
    if dlogf(a) <= 0:
        return a
    if dlogf(b) >= 0:
        return b
    res = minimize_scalar(lambda v: -logf(v), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-10 * max(1.0, width)})
    return float(res.x)


def sample_shape_ars(kernel, support, rng, dlogf=None, name="kernel",
                     concavity_tol=1e-8):
    """One exact draw from a log-concave density on an open interval.

    ``kernel`` is the log-density up to a constant.  The envelope starts at
    mode +/- {1, 3} curvature scales, with the mode located by bounded
    golden-section/parabolic search.
    """
    lower, upper = float(support[0]), float(support[1])
    if not lower < upper:
        raise ValueError("empty support")
    if dlogf is None:
        dlogf = _numeric_derivative(kernel, lower, upper)
    mode = _find_mode(kernel, lower, upper, dlogf)
    hstep = 1e-4 * max(1.0, abs(mode))
    m_lo = max(mode - hstep, lower + 0.5 * (mode - lower)) if math.isfinite(lower) else mode - hstep
    m_hi = min(mode + hstep, upper - 0.5 * (upper - mode)) if math.isfinite(upper) else mode + hstep
    curv = (dlogf(m_hi) - dlogf(m_lo)) / (m_hi - m_lo) if m_hi > m_lo else -1.0
    if curv > concavity_tol * max(1.0, abs(dlogf(mode))):
        raise NonConcaveKernelError(f"{name}: positive curvature at the mode")
    scale = 1.0 / math.sqrt(-curv) if curv < 0 else 1.0
    pts = [mode]
    for s in (1.0, 3.0):
        shrink = 0.5 if s == 1.0 else 0.9
        left, right = mode - s * scale, mode + s * scale
        if left <= lower:
            left = mode - shrink * (mode - lower)
        if right >= upper:
            right = mode + shrink * (upper - mode)
        pts += [left, right]
    pts = [v for v in pts if lower < v < upper]
    # unbounded tails need points beyond the mode on each open side
    if math.isinf(upper) and dlogf(max(pts)) >= 0:
        pts.append(max(pts) + 10 * scale)
    if math.isinf(lower) and dlogf(min(pts)) <= 0:
        pts.append(min(pts) - 10 * scale)
    env = ArsEnvelope(kernel, dlogf, lower, upper, pts, name=name,
                      concavity_tol=concavity_tol)
    return env.sample(rng)


def _numeric_derivative(f, lower, upper):
    def d(x):
        h = 1e-6 * max(1.0, abs(x))
        a = max(x - h, lower + 0.5 * (x - lower)) if math.isfinite(lower) else x - h
        b = min(x + h, upper - 0.5 * (upper - x)) if math.isfinite(upper) else x + h
        return (f(b) - f(a)) / (b - a)
    return d
