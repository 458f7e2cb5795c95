"""Smooth test functions with controlled envelopes, and quasi-analytic extensions.

All mollifiers are built from one family: an arctan-warped coordinate (whose
derivative is exactly a Cauchy kernel at the requested scale) composed with a
quintic smoothstep, so ramps meet their envelope bounds with explicit
constants and join plateaus with two continuous derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataContractViolation, StencilOutOfRange

__all__ = [
    "TestFunction",
    "make_half_regular_bump",
    "make_regular_bump",
    "make_mollified_step",
    "testfn_from_dict",
    "quasi_analytic",
]


def make_zero(l_star=8.0):
    """The zero test function (useful as a CLI fixture)."""
    tf = TestFunction("zero", 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, l_star,
                      pieces=[(-1.0, 1.0, "plateau")])
    tf._f = lambda x: (np.zeros_like(x), np.zeros_like(x), np.zeros_like(x))
    tf.norms = {"f_l1": 0.0, "df_l1": 0.0, "d2f_l1": 0.0}
    return tf


def testfn_from_dict(doc):
    """Build a test function from its JSON spec {kind, t, ...}."""
    kind = doc.get("kind")
    l_star = float(doc.get("l_star", 8.0))
    if kind == "zero":
        return make_zero(l_star)
    if kind == "half_regular_bump":
        return make_half_regular_bump(
            float(doc["t"]), float(doc["M"]), float(doc["E0"]), float(doc["E1"]),
            float(doc["cprime"]), doc.get("Cprime"), l_star,
        )
    if kind == "regular":
        return make_regular_bump(float(doc["center"]), float(doc["halfwidth"]),
                                 float(doc["t"]), l_star)
    if kind == "mollified_step":
        return make_mollified_step(float(doc["E0"]), float(doc["t"]),
                                   doc.get("M"), l_star)
    raise DataContractViolation(f"unknown test-function kind {kind!r}")


def _smoothstep(u):
    """Quintic smoothstep on [0,1]: value, first, second derivative."""
    u = np.clip(u, 0.0, 1.0)
    p = u**3 * (10.0 - 15.0 * u + 6.0 * u**2)
    dp = 30.0 * u**2 * (1.0 - u) ** 2
    d2p = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return p, dp, d2p


class _Ramp:
    """Monotone 0 -> 1 rise centered at e0, Cauchy scale t, support |x-e0| <= t*m."""

    def __init__(self, e0, t, m, sign=+1.0):
        self.e0, self.t, self.m, self.sign = e0, t, m, sign
        self.norm = 2.0 * np.arctan(m)

    def eval(self, x):
        s = self.sign * (np.asarray(x, dtype=float) - self.e0)
        r = (np.arctan(s / self.t) + np.arctan(self.m)) / self.norm
        inside = np.abs(s) < self.t * self.m
        rc = np.clip(r, 0.0, 1.0)
        p, dp, d2p = _smoothstep(rc)
        den = s**2 + self.t**2
        r1 = (self.t / den) / self.norm
        r2 = (-2.0 * s * self.t / den**2) / self.norm
        f = np.where(s >= self.t * self.m, 1.0, np.where(s <= -self.t * self.m, 0.0, p))
        f1 = np.where(inside, dp * r1, 0.0) * self.sign
        f2 = np.where(inside, d2p * r1**2 + dp * r2, 0.0)
        return f, f1, f2


class _CauchyRamp:
    """Rise whose derivative is exactly the Cauchy kernel at scale t, times a
    smooth taper supported on the outer tenth of the half-width t*m."""

    def __init__(self, e0, t, m):
        from scipy.integrate import cumulative_simpson
        from scipy.interpolate import PchipInterpolator

        self.e0, self.t, self.m = e0, t, m
        self.half = t * m
        theta = np.linspace(-np.arctan(m), np.arctan(m), 6001)
        x = t * np.tan(theta)
        raw = self._raw_deriv(x)
        cum = cumulative_simpson(raw, x=x, initial=0.0)
        self.norm = cum[-1]
        self._interp = PchipInterpolator(x, cum / self.norm, extrapolate=False)

    def _taper(self, s):
        # s = |x - e0| / (t m); flat to 0.9, quintic drop on [0.9, 1]
        p, dp, _ = _smoothstep((np.abs(s) - 0.9) / 0.1)
        return 1.0 - p, -dp / 0.1 * np.sign(s) / 1.0

    def _raw_deriv(self, u):
        s = u / self.half
        tap, _ = self._taper(s)
        return tap * self.t / (u**2 + self.t**2)

    def eval(self, x):
        u = np.asarray(x, dtype=float) - self.e0
        inside = np.abs(u) < self.half
        f = np.where(u >= self.half, 1.0, 0.0)
        vals = self._interp(np.clip(u, -self.half, self.half))
        f = np.where(inside, np.nan_to_num(vals), f)
        s = u / self.half
        tap, dtap = self._taper(s)
        kern = self.t / (u**2 + self.t**2)
        dkern = -2.0 * u * self.t / (u**2 + self.t**2) ** 2
        f1 = np.where(inside, tap * kern / self.norm, 0.0)
        f2 = np.where(inside, (tap * dkern + dtap / self.half * kern) / self.norm, 0.0)
        return f, f1, f2


class _LinearStep:
    """Monotone 0 -> 1 rise over [a, b] in a linear coordinate."""

    def __init__(self, a, b, sign=+1.0):
        self.a, self.b, self.sign = a, b, sign

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        u = (x - self.a) / (self.b - self.a)
        inside = (u > 0.0) & (u < 1.0)
        p, dp, d2p = _smoothstep(u)
        if self.sign < 0:
            p, dp = 1.0 - p, -dp
            d2p = -d2p
        scale = 1.0 / (self.b - self.a)
        return p, np.where(inside, dp * scale, 0.0), np.where(inside, d2p * scale**2, 0.0)


@dataclass
class TestFunction:
    """Piecewise mollifier with evaluators for f, f', f'' and the cutoff chi."""

    kind: str
    t: float
    m_width: float              # ramp half-width multiplier M
    e0: float
    e1: float
    cprime: float               # achieved/declared shape constant C'
    csupp: float                # descent width constant c'
    l_star: float
    pieces: list = field(repr=False, default_factory=list)   # (segment, kind)
    norms: dict = field(default_factory=dict)

    # pieces layout: list of (lo, hi, evaluator, orientation) applied additively:
    # f(x) = prod of piece values is wrong for bumps; we store explicit closures.
    _f: object = field(repr=False, default=None)

    def f(self, x):
        return self._f(np.asarray(x, dtype=float))[0]

    def df(self, x):
        return self._f(np.asarray(x, dtype=float))[1]

    def d2f(self, x):
        return self._f(np.asarray(x, dtype=float))[2]

    def __call__(self, x):
        return self.f(x)

    # -- even C^2 cutoff in the imaginary direction -------------------------

    def chi(self, y):
        a = np.abs(np.asarray(y, dtype=float))
        p, _, _ = _smoothstep(a - 2.0 * self.l_star)
        return 1.0 - p

    def dchi(self, y):
        y = np.asarray(y, dtype=float)
        a = np.abs(y)
        _, dp, _ = _smoothstep(a - 2.0 * self.l_star)
        return -dp * np.sign(y)

    def f_tilde(self, x, y):
        f, f1, _ = self._f(np.asarray(x, dtype=float))
        return (f + 1j * y * f1) * self.chi(y)

    def dbar(self, x, y):
        """d/dzbar of the quasi-analytic extension, as a function of (x, y)."""
        f, f1, f2 = self._f(np.asarray(x, dtype=float))
        return 0.5 * (1j * y * self.chi(y) * f2 + 1j * (f + 1j * y * f1) * self.dchi(y))

    def support(self):
        lo = min(p[0] for p in self.pieces)
        hi = max(p[1] for p in self.pieces)
        return lo, hi

    def d2f_support(self):
        """Intervals where f'' can be nonzero."""
        return [(p[0], p[1]) for p in self.pieces if p[2] != "plateau"]

    def to_dict(self):
        return {
            "kind": self.kind,
            "t": self.t,
            "M": self.m_width,
            "E0": self.e0,
            "E1": self.e1,
            "cprime": self.csupp,
            "Cprime": self.cprime,
            "l_star": self.l_star,
        }


def quasi_analytic(tf: TestFunction):
    """(f_tilde, dbar) pair of the extension; kept for interface clarity."""
    return tf.f_tilde, tf.dbar


def _l1_norms(fun, segments, n=4001):
    f1 = df1 = d2f1 = 0.0
    for lo, hi, _kind in segments:
        x = np.linspace(lo, hi, n)
        f, d1, d2 = fun(x)
        f1 += np.trapezoid(np.abs(f), x)
        df1 += np.trapezoid(np.abs(d1), x)
        d2f1 += np.trapezoid(np.abs(d2), x)
    return f1, df1, d2f1


def make_half_regular_bump(t, m_width, e0, e1, csupp, cprime=None, l_star=8.0,
                           bulk=None, n_check=10000):
    """Bump rising at e0 on scale t (half-width t*m_width) and descending
    across [e1 - c'/2, e1 + c'/2]; plateau value exactly 1.

    Checks the shape contract on n_check sample points and raises
    DataContractViolation with the first failing inequality.  With
    cprime=None the achieved constant is recorded instead of checked.
    bulk=(lo, hi) optionally asserts both anchors sit inside that interval.
    """
    if t <= 0 or m_width <= 0 or csupp <= 0:
        raise DataContractViolation("t, M and c' must be positive")
    if e1 - e0 < csupp:
        raise DataContractViolation(f"anchor separation {e1 - e0:g} below c' = {csupp:g}")
    if e0 + t * m_width >= e1 - csupp / 2.0:
        raise DataContractViolation("ramp and descent overlap: t*M too large for the gap")
    if bulk is not None:
        lo, hi = bulk
        kappa_max = min(e0 - lo, hi - e1)
        if kappa_max <= 0:
            raise DataContractViolation("anchors must lie inside the bulk interval")
        if not (t * m_width < kappa_max / 10.0 and csupp < kappa_max / 10.0):
            raise DataContractViolation("need t*M, c' < kappa/10 for the bulk margin")

    up = _Ramp(e0, t, m_width)
    down = _LinearStep(e1 - csupp / 2.0, e1 + csupp / 2.0, sign=-1.0)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        fu, du, d2u = up.eval(x)
        fd, dd, d2d = down.eval(x)
        left = x <= e0 + t * m_width
        f = np.where(left, fu, fd)
        d1 = np.where(left, du, dd)
        d2 = np.where(left, d2u, d2d)
        return f, d1, d2

    segments = [
        (e0 - t * m_width, e0 + t * m_width, "ramp"),
        (e0 + t * m_width, e1 - csupp / 2.0, "plateau"),
        (e1 - csupp / 2.0, e1 + csupp / 2.0, "descent"),
    ]
    tf = TestFunction("half_regular_bump", t, m_width, e0, e1,
                      cprime if cprime is not None else np.nan, csupp, l_star,
                      pieces=segments)
    tf._f = evaluate

    # contract checks / achieved constants
    xs = np.linspace(e0 - t * m_width, e0 + t * m_width, n_check)
    f, d1, d2 = evaluate(xs)
    if (d1 < -1e-14).any():
        raise DataContractViolation("ramp derivative must be nonnegative")
    env = t / ((xs - e0) ** 2 + t**2)
    c_candidates = [np.max(d1 / env), np.max(np.abs(d2) * ((xs - e0) ** 2 + t**2))]
    xs2 = np.linspace(e1 - csupp / 2.0, e1 + csupp / 2.0, n_check)
    _, d1d, d2d = evaluate(xs2)
    c_candidates += [np.max(np.abs(d1d)), np.max(np.abs(d2d))]
    l1, dl1, d2l1 = _l1_norms(evaluate, segments)
    c_candidates += [l1 + dl1, d2l1 * t]
    achieved = float(max(c_candidates))
    tf.norms = {"f_l1": l1, "df_l1": dl1, "d2f_l1": d2l1, "achieved_cprime": achieved}
    if cprime is None:
        tf.cprime = 1.05 * achieved
    elif achieved > cprime:
        labels = ["ramp derivative envelope", "ramp curvature envelope",
                  "descent slope bound", "descent curvature bound",
                  "L1 norm of f and f'", "t * L1 norm of f''"]
        first = labels[int(np.argmax(c_candidates))]
        raise DataContractViolation(
            f"half-regular contract fails: {first} needs C' >= {achieved:.3g}, got {cprime:g}"
        )
    # exact endpoint values
    for x_chk, want in ((e0 - t * m_width, 0.0), (e0 + t * m_width, 1.0),
                        (0.5 * (e0 + t * m_width + e1 - csupp / 2.0), 1.0)):
        got = float(tf.f(x_chk))
        if abs(got - want) > 1e-14:
            raise DataContractViolation(f"f({x_chk:g}) = {got:g}, expected {want:g}")
    return tf


def make_regular_bump(center, halfwidth, t, l_star=8.0):
    """Compactly supported bump: rises over [c-h, c-h+t], flat, falls over [c+h-t, c+h]."""
    if not 0 < t <= halfwidth:
        raise DataContractViolation("need 0 < t <= halfwidth")
    up = _LinearStep(center - halfwidth, center - halfwidth + t)
    down = _LinearStep(center + halfwidth - t, center + halfwidth, sign=-1.0)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        fu, du, d2u = up.eval(x)
        fd, dd, d2d = down.eval(x)
        left = x <= center
        return (np.where(left, fu, fd), np.where(left, du, dd), np.where(left, d2u, d2d))

    segments = [
        (center - halfwidth, center - halfwidth + t, "ramp"),
        (center - halfwidth + t, center + halfwidth - t, "plateau"),
        (center + halfwidth - t, center + halfwidth, "descent"),
    ]
    tf = TestFunction("regular", t, 1.0, center - halfwidth, center + halfwidth,
                      np.nan, t, l_star, pieces=segments)
    tf._f = evaluate
    l1, dl1, d2l1 = _l1_norms(evaluate, segments)
    tf.norms = {"f_l1": l1, "df_l1": dl1, "d2f_l1": d2l1}
    tf.cprime = 1.05 * max(l1 + dl1, d2l1 * t)
    return tf


def make_mollified_step(e0, t, m_width=None, l_star=8.0, ramp_shape="quintic"):
    """Smoothed indicator of [e0, +inf) seen by the spectrum: rises at e0 on
    scale t, stays 1, and returns to 0 across [2 L*, 2 L* + 1], far outside
    any admissible support.

    ramp_shape selects the rise profile: "quintic" composes an arctan
    coordinate with a quintic smoothstep; "cauchy" makes the derivative an
    exactly-Cauchy kernel with a smooth taper on the outer tenth.
    """
    m_width = m_width if m_width is not None else 10.0
    up = _CauchyRamp(e0, t, m_width) if ramp_shape == "cauchy" else _Ramp(e0, t, m_width)
    down = _LinearStep(2.0 * l_star, 2.0 * l_star + 1.0, sign=-1.0)

    def evaluate(x):
        x = np.asarray(x, dtype=float)
        fu, du, d2u = up.eval(x)
        fd, dd, d2d = down.eval(x)
        left = x <= 0.5 * (e0 + t * m_width + 2.0 * l_star)
        return (np.where(left, fu, fd), np.where(left, du, dd), np.where(left, d2u, d2d))

    segments = [
        (e0 - t * m_width, e0 + t * m_width, "ramp"),
        (e0 + t * m_width, 2.0 * l_star, "plateau"),
        (2.0 * l_star, 2.0 * l_star + 1.0, "descent"),
    ]
    if e0 + t * m_width >= 2.0 * l_star:
        raise StencilOutOfRange("step anchor must sit below the far cutoff")
    tf = TestFunction("mollified_step", t, m_width, e0, 2.0 * l_star + 0.5,
                      np.nan, 1.0, l_star, pieces=segments)
    tf._f = evaluate
    l1, dl1, d2l1 = _l1_norms(evaluate, segments)
    tf.norms = {"f_l1": l1, "df_l1": dl1, "d2f_l1": d2l1}
    tf.cprime = 1.05 * max(l1 + dl1, d2l1 * t)
    return tf
