"""Privileged coordinates and first order approximations.

The chart construction mirrors the lifting pipeline: a linear change
adapted to a bracket frame, polynomial corrections that push the
nonholonomic order of each coordinate up to its weight, and a final
homogeneous identification that makes the leading part of the frame
equal the canonical fields exactly.  This module also owns the small
anisotropic geometry helpers (pseudo-norm and dilations) used all over
the planner and the steering layer.
"""

import math
from fractions import Fraction

from .canonical import canonical_fields
from .desing import _chart_round
from .errors import SpecError
from .poly import TriangularMap, is_exact, poly_to_str, taylor_truncate


def _int_nth_root(n, k):
    """Exact integer k-th root, or None."""
    if n < 0:
        return None
    if n in (0, 1) or k == 1:
        return n
    root = round(n ** (1.0 / k))
    for cand in (root - 1, root, root + 1):
        if cand >= 0 and cand ** k == n:
            return cand
    return None


def nth_root_fraction(q, k):
    """Exact k-th root of a nonnegative Fraction, or None."""
    q = Fraction(q)
    if q < 0:
        return None
    num = _int_nth_root(q.numerator, k)
    den = _int_nth_root(q.denominator, k)
    if num is None or den is None:
        return None
    return Fraction(num, den)


def pseudo_norm(z, weights):
    """Anisotropic norm: sum of |z_j| to the power 1/w_j.

    Stays an exact Fraction when every component admits an exact root;
    otherwise returns a float.
    """
    total = Fraction(0)
    exact = True
    for v, w in zip(z, weights):
        if exact and is_exact(v):
            root = nth_root_fraction(abs(Fraction(v)), w)
            if root is not None:
                total = total + root
                continue
        exact = False
        break
    if exact:
        return total
    return math.fsum(abs(float(v)) ** (1.0 / w) for v, w in
                     zip(z, weights))


def dilate(z, t, weights):
    """Apply the weighted dilation: component j scales by t^w_j."""
    out = []
    for v, w in zip(z, weights):
        if is_exact(v) and is_exact(t):
            out.append(Fraction(t) ** w * Fraction(v))
        else:
            out.append(float(t) ** w * float(v))
    return out


class PrivilegedChart:
    """Polynomial coordinates adapted to the bracket filtration.

    Built in three stages around an anchor: an affine map putting the
    frame values on the axes, a triangular correction raising each
    coordinate's vanishing order to its weight, and a homogeneous
    shear matching the leading field parts to the canonical
    monomials.  Forward and inverse maps are both polynomial, so the
    chart is a bijection of the whole space and evaluation never
    needs root-finding.
    """

    __slots__ = ("anchor", "weights", "affine", "correct", "identify",
                 "map", "det_value")

    def __init__(self, anchor, weights, align, correct, identify,
                 det_value):
        n = len(anchor)
        self.anchor = tuple(anchor)
        self.weights = tuple(weights)
        ident = [[1 if i == j else 0 for j in range(n)] for i in range(n)]
        centre = TriangularMap.affine(ident, anchor)
        self.affine = align.compose(centre)
        self.correct = correct
        self.identify = identify
        self.map = identify.compose(correct).compose(self.affine)
        self.det_value = det_value

    @property
    def n(self):
        return len(self.anchor)

    def apply(self, x):
        return self.map.apply(x)

    def apply_inverse(self, z):
        return self.map.apply_inverse(z)

    def is_exact(self):
        return all(c.is_exact() for c in self.map.comps)

    def to_json(self):
        xnames = ["x%d" % (i + 1) for i in range(self.n)]
        znames = ["z%d" % (i + 1) for i in range(self.n)]
        return {
            "anchor": [float(v) for v in self.anchor],
            "weights": list(self.weights),
            "forward": [poly_to_str(c, xnames) for c in self.map.comps],
            "inverse": [poly_to_str(c, znames) for c in self.map.inv],
            "det": float(self.det_value),
        }

    def __repr__(self):
        return "PrivilegedChart(anchor=%s)" % (self.anchor,)


class ApproxSystem:
    """A system's canonical first-order model at an anchor.

    The model fields are the canonical ones, the same for every
    anchor; what changes with the anchor is the chart.  fields_chart
    keeps the input system's jets in the chart coordinates so the
    quality of the approximation can be inspected directly.
    """

    __slots__ = ("chart", "system", "fields_chart")

    def __init__(self, chart, system, fields_chart):
        self.chart = chart
        self.system = system
        self.fields_chart = tuple(fields_chart)

    @property
    def fields(self):
        return self.system.fields

    @property
    def basis(self):
        return self.system.basis

    @property
    def weights(self):
        return self.chart.weights

    def to_json(self):
        znames = ["z%d" % (i + 1) for i in range(self.chart.n)]
        return {
            "m": self.system.m,
            "r": self.system.r,
            "chart": self.chart.to_json(),
            "fields": [[poly_to_str(c, znames) for c in f.comps]
                       for f in self.fields],
        }


def first_order_approx(fields, a, basis, trig=None, cap=None):
    """Privileged chart and canonical model for a free system.

    The system must already be free up to step basis.r at the anchor,
    meaning the first len(basis) bracket fields are a frame there;
    otherwise the alignment step raises SingularFrame and the caller
    should lift first.  The whole chart chain runs in one pass since
    no fiber coordinates are needed.
    """
    n = len(basis)
    if len(a) != n:
        raise SpecError("anchor has %d coordinates, the free dimension "
                        "is %d" % (len(a), n))
    for f in fields:
        if f.n != n:
            raise SpecError("field lives on dimension %d, expected %d"
                            % (f.n, n))
    if len(fields) != basis.m:
        raise SpecError("%d fields for a basis with %d generators"
                        % (len(fields), basis.m))
    if cap is None:
        cap = 2 * basis.r + 1
    shadows = [taylor_truncate(f, a, (1,) * n, cap, trig) for f in fields]
    coords = list(range(1, n + 1))
    align, correct, identify, shadows, det = _chart_round(
        shadows, basis, coords, basis.r, cap)
    weights = basis.free_weights
    chart = PrivilegedChart(a, weights, align, correct, identify, det)
    fields_chart = [f.with_weights(weights) for f in shadows]
    return ApproxSystem(chart, canonical_fields(basis.m, basis.r),
                        fields_chart)
