"""Exact sinusoidal steering of the canonical nilpotent system.

The classes of the basis (grouped by generator content) are steered
one per 2 pi period.  Within a period every class element gets a block
of unit-amplitude cosines at carefully spaced integer frequencies plus
one resonance sinusoid whose amplitude is solved for; the frequency
spacing guarantees that the only integer combination hitting zero is
the designated one, so the net displacement of the class coordinates
is exactly linear in the resonance amplitudes.

Everything is integrated in closed form.  Controls are trigonometric
polynomials with integer frequencies, so all state values at period
boundaries live in the field of rational functions of pi; the small
tower PiPoly/PiFrac/TrigPoly implements that field and the per-period
propagation.  When inputs are floats the same code runs in floating
point instead.
"""

import itertools
import json
import math
from fractions import Fraction

from .errors import SearchBudgetExhausted, SingularMatrix
from .poly import is_exact
from .privcoord import dilate, pseudo_norm

F0 = Fraction(0)
F1 = Fraction(1)
HALF = Fraction(1, 2)
_PI_HAT = Fraction(math.pi)


# ---------------------------------------------------------------------------
# Rational functions of pi


class PiPoly:
    """Polynomial in pi with rational coefficients."""

    __slots__ = ("c", "_hash")

    def __init__(self, c=None):
        self.c = {}
        self._hash = None
        if c:
            for d, v in c.items():
                if v != 0:
                    self.c[d] = Fraction(v)

    @classmethod
    def const(cls, q):
        return cls({0: Fraction(q)})

    @classmethod
    def pi_pow(cls, k, coeff=F1):
        return cls({k: Fraction(coeff)})

    def is_zero(self):
        return not self.c

    def degree(self):
        return max(self.c) if self.c else -1

    def lead(self):
        return self.c[self.degree()]

    def add(self, o):
        out = dict(self.c)
        for d, v in o.c.items():
            nv = out.get(d, F0) + v
            if nv == 0:
                out.pop(d, None)
            else:
                out[d] = nv
        return PiPoly(out)

    def neg(self):
        return PiPoly({d: -v for d, v in self.c.items()})

    def sub(self, o):
        return self.add(o.neg())

    def mul(self, o):
        out = {}
        for d1, v1 in self.c.items():
            for d2, v2 in o.c.items():
                d = d1 + d2
                nv = out.get(d, F0) + v1 * v2
                if nv == 0:
                    out.pop(d, None)
                else:
                    out[d] = nv
        return PiPoly(out)

    def scale(self, q):
        return PiPoly({d: v * q for d, v in self.c.items()})

    def __eq__(self, o):
        return isinstance(o, PiPoly) and self.c == o.c

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(frozenset(self.c.items()))
        return self._hash

    def eval_fraction(self, x):
        total = F0
        for d, v in self.c.items():
            total += v * x ** d
        return total

    def __float__(self):
        # Evaluate at the exact Fraction value of math.pi so huge
        # coefficient ratios cancel before float conversion.
        return float(self.eval_fraction(_PI_HAT))

    def __repr__(self):
        if not self.c:
            return "0"
        bits = []
        for d in sorted(self.c):
            v = self.c[d]
            if d == 0:
                bits.append(str(v))
            elif d == 1:
                bits.append("%s*pi" % v)
            else:
                bits.append("%s*pi^%d" % (v, d))
        return " + ".join(bits)


def _pp_divmod(a, b):
    q = {}
    r = dict(a.c)
    db = b.degree()
    lb = b.lead()
    while r and max(r) >= db:
        d = max(r)
        qd = d - db
        qc = r[d] / lb
        q[qd] = q.get(qd, F0) + qc
        for bd, bc in b.c.items():
            nd = bd + qd
            nv = r.get(nd, F0) - qc * bc
            if nv == 0:
                r.pop(nd, None)
            else:
                r[nd] = nv
    return PiPoly(q), PiPoly(r)


def _pp_primitive(p):
    """Scale to coprime integer coefficients (primitive part)."""
    num_gcd = 0
    den_lcm = 1
    for v in p.c.values():
        num_gcd = math.gcd(num_gcd, v.numerator)
        den_lcm = den_lcm * v.denominator // math.gcd(
            den_lcm, v.denominator)
    if num_gcd == 0:
        return p
    return p.scale(Fraction(den_lcm, num_gcd))


def _pp_gcd(a, b):
    # primitive remainder sequence keeps coefficient growth tame
    a = _pp_primitive(a)
    b = _pp_primitive(b)
    while not b.is_zero():
        _, r = _pp_divmod(a, b)
        if not r.is_zero():
            r = _pp_primitive(r)
        a, b = b, r
    if a.is_zero():
        return PiPoly.const(1)
    return a.scale(F1 / a.lead())


def _as_pipoly(x):
    if isinstance(x, PiPoly):
        return x
    if isinstance(x, (int, Fraction)):
        return PiPoly.const(x)
    raise TypeError("cannot lift %r into a pi-polynomial" % (x,))


_PP_ONE = PiPoly.const(1)


class PiFrac:
    """Element of the field of rational functions of pi.

    Arithmetic is lazy: results are not reduced to lowest terms, so
    the hot propagation loops never run polynomial gcds.  Equality
    cross-multiplies and zero tests look only at the numerator, both
    of which are exact on unreduced values; reduced() gives the
    canonical coprime monic-denominator form when it is worth having.
    """

    __slots__ = ("num", "den")

    def __init__(self, num, den=None, reduce=True):
        num = _as_pipoly(num)
        den = _PP_ONE if den is None else _as_pipoly(den)
        if den.is_zero():
            raise ZeroDivisionError("pi-fraction with zero denominator")
        if num.is_zero():
            den = _PP_ONE
        elif reduce and (den.degree() > 0 or den.lead() != 1):
            g = _pp_gcd(num, den)
            if g.degree() > 0:
                num, _ = _pp_divmod(num, g)
                den, _ = _pp_divmod(den, g)
            lc = den.lead()
            if lc != 1:
                num = num.scale(F1 / lc)
                den = den.scale(F1 / lc)
        self.num = num
        self.den = den

    @classmethod
    def lift(cls, x):
        if isinstance(x, PiFrac):
            return x
        return cls(_as_pipoly(x), None, reduce=False)

    def reduced(self):
        return PiFrac(self.num, self.den)

    def is_zero(self):
        return self.num.is_zero()

    def __bool__(self):
        return not self.is_zero()

    def __add__(self, o):
        if isinstance(o, float):
            return float(self) + o
        if isinstance(o, (int, Fraction)):
            if o == 0:
                return self
            return PiFrac(self.num.add(self.den.scale(Fraction(o))),
                          self.den, reduce=False)
        if isinstance(o, PiPoly):
            o = PiFrac.lift(o)
        if not isinstance(o, PiFrac):
            return NotImplemented
        if self.den == o.den:
            return PiFrac(self.num.add(o.num), self.den, reduce=False)
        return PiFrac(self.num.mul(o.den).add(o.num.mul(self.den)),
                      self.den.mul(o.den), reduce=False)

    __radd__ = __add__

    def __neg__(self):
        return PiFrac(self.num.neg(), self.den, reduce=False)

    def __sub__(self, o):
        if isinstance(o, float):
            return float(self) - o
        if isinstance(o, (int, Fraction)):
            return self.__add__(-o)
        if isinstance(o, PiPoly):
            o = PiFrac.lift(o)
        if not isinstance(o, PiFrac):
            return NotImplemented
        return self.__add__(o.__neg__())

    def __rsub__(self, o):
        if isinstance(o, float):
            return o - float(self)
        return self.__neg__().__add__(o)

    def __mul__(self, o):
        if isinstance(o, float):
            return float(self) * o
        if isinstance(o, (int, Fraction)):
            if o == 0:
                return PiFrac(PiPoly(), None, reduce=False)
            return PiFrac(self.num.scale(Fraction(o)), self.den,
                          reduce=False)
        if isinstance(o, PiPoly):
            o = PiFrac.lift(o)
        if not isinstance(o, PiFrac):
            return NotImplemented
        return PiFrac(self.num.mul(o.num), self.den.mul(o.den),
                      reduce=False)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, float):
            return float(self) / o
        if isinstance(o, (int, Fraction)):
            return PiFrac(self.num.scale(F1 / Fraction(o)), self.den,
                          reduce=False)
        if isinstance(o, PiPoly):
            o = PiFrac.lift(o)
        if not isinstance(o, PiFrac):
            return NotImplemented
        if o.num.is_zero():
            raise ZeroDivisionError("division by zero pi-fraction")
        return PiFrac(self.num.mul(o.den), self.den.mul(o.num),
                      reduce=False)

    def __rtruediv__(self, o):
        if isinstance(o, float):
            return o / float(self)
        return PiFrac.lift(o).__truediv__(self)

    def __eq__(self, o):
        if isinstance(o, float):
            return float(self) == o
        if isinstance(o, (int, Fraction, PiPoly)):
            o = PiFrac.lift(o)
        if not isinstance(o, PiFrac):
            return NotImplemented
        if self.den == o.den:
            return self.num == o.num
        return self.num.mul(o.den) == o.num.mul(self.den)

    def __float__(self):
        den = self.den.eval_fraction(_PI_HAT)
        if den == 0:
            return float(self.num) / 0.0
        return float(self.num.eval_fraction(_PI_HAT) / den)

    def __abs__(self):
        return abs(float(self))

    def __repr__(self):
        r = self.reduced()
        if r.den == _PP_ONE:
            return "(%s)" % repr(r.num)
        return "(%s)/(%s)" % (repr(r.num), repr(r.den))


def coeff_is_zero(c):
    if isinstance(c, PiFrac):
        return c.is_zero()
    return c == 0


def simplify_value(v):
    """Canonicalise a PiFrac; one that is actually rational collapses
    back to Fraction."""
    if isinstance(v, PiFrac):
        v = v.reduced()
        if v.den == _PP_ONE and v.num.degree() <= 0:
            return v.num.c.get(0, F0)
    return v


# ---------------------------------------------------------------------------
# Trigonometric polynomials with integer frequencies


def _acc(out, p, w, s, c):
    if coeff_is_zero(c):
        return
    key = (p, w, s)
    cur = out.get(key)
    nv = c if cur is None else cur + c
    if coeff_is_zero(nv):
        out.pop(key, None)
    else:
        out[key] = nv


def _acc_cos(out, p, w, c):
    _acc(out, p, abs(w), 0, c)


def _acc_sin(out, p, w, c):
    if w == 0:
        return
    if w < 0:
        _acc(out, p, -w, 1, -c)
    else:
        _acc(out, p, w, 1, c)


class TrigPoly:
    """Sums of t^p cos(w t) and t^p sin(w t), integer w >= 0.

    Closed under products (by product-to-sum) and antiderivatives (by
    parts), which is all the per-period propagation needs.  Values at
    multiples of 2 pi are exact because every sine vanishes and every
    cosine is one there.
    """

    __slots__ = ("terms",)

    def __init__(self, terms=None):
        self.terms = {}
        if terms:
            for (p, w, s), c in terms.items():
                _acc(self.terms, p, w, s, c)

    @classmethod
    def zero(cls):
        return cls()

    @classmethod
    def const(cls, c):
        return cls({(0, 0, 0): c})

    @classmethod
    def sinusoid(cls, amp, w, quarter):
        """amp * cos(w t - quarter * pi / 2)."""
        q = quarter % 4
        out = {}
        if q == 0:
            _acc_cos(out, 0, w, amp)
        elif q == 1:
            _acc_sin(out, 0, w, amp)
        elif q == 2:
            _acc_cos(out, 0, w, -amp)
        else:
            _acc_sin(out, 0, w, -amp)
        return cls(out)

    def is_zero(self):
        return not self.terms

    def add(self, o):
        out = dict(self.terms)
        for (p, w, s), c in o.terms.items():
            _acc(out, p, w, s, c)
        return TrigPoly(out)

    def neg(self):
        return TrigPoly({k: -c for k, c in self.terms.items()})

    def sub(self, o):
        return self.add(o.neg())

    def scale(self, c):
        if coeff_is_zero(c):
            return TrigPoly()
        return TrigPoly({k: v * c for k, v in self.terms.items()})

    def mul(self, o):
        out = {}
        for (p1, w1, s1), c1 in self.terms.items():
            for (p2, w2, s2), c2 in o.terms.items():
                p = p1 + p2
                c = c1 * c2 * HALF
                if s1 == 0 and s2 == 0:
                    _acc_cos(out, p, w1 - w2, c)
                    _acc_cos(out, p, w1 + w2, c)
                elif s1 == 1 and s2 == 1:
                    _acc_cos(out, p, w1 - w2, c)
                    _acc_cos(out, p, w1 + w2, -c)
                elif s1 == 1:
                    _acc_sin(out, p, w1 + w2, c)
                    _acc_sin(out, p, w1 - w2, c)
                else:
                    _acc_sin(out, p, w1 + w2, c)
                    _acc_sin(out, p, w2 - w1, c)
        return TrigPoly(out)

    def antiderivative(self):
        """Primitive vanishing at t = 0."""
        out = {}
        for (p, w, s), c in self.terms.items():
            if w == 0:
                _acc(out, p + 1, 0, 0, c * Fraction(1, p + 1))
                continue
            pp, cc, ss = p, c, s
            while True:
                if ss == 0:
                    _acc_sin(out, pp, w, cc * Fraction(1, w))
                    if pp == 0:
                        break
                    cc = cc * Fraction(-pp, w)
                    ss = 1
                    pp -= 1
                else:
                    _acc_cos(out, pp, w, cc * Fraction(-1, w))
                    if pp == 0:
                        break
                    cc = cc * Fraction(pp, w)
                    ss = 0
                    pp -= 1
        prim = TrigPoly(out)
        v0 = prim.value_zero()
        if not coeff_is_zero(v0):
            prim = prim.add(TrigPoly.const(-v0))
        return prim

    def derivative(self):
        out = {}
        for (p, w, s), c in self.terms.items():
            if p > 0:
                _acc(out, p - 1, w, s, c * p)
            if w > 0:
                if s == 0:
                    _acc_sin(out, p, w, c * (-w))
                else:
                    _acc_cos(out, p, w, c * w)
        return TrigPoly(out)

    def value_zero(self):
        vals = [c for (p, w, s), c in self.terms.items()
                if p == 0 and s == 0]
        if not vals:
            return F0
        if any(isinstance(c, float) for c in vals):
            return math.fsum(float(c) for c in vals)
        groups = {}
        for c in vals:
            if isinstance(c, PiFrac):
                num, den = c.num, c.den
            else:
                num, den = PiPoly.const(c), _PP_ONE
            cur = groups.get(den)
            groups[den] = num if cur is None else cur.add(num)
        total = None
        for den, num in groups.items():
            pf = PiFrac(num, den, reduce=False)
            total = pf if total is None else total + pf
        return simplify_value(total)

    def value_2pi(self, float_mode=False):
        """Exact value at t = 2 pi (or float when asked)."""
        if float_mode:
            total = 0.0
            for (p, w, s), c in self.terms.items():
                if s == 0:
                    total += float(c) * (2.0 * math.pi) ** p
            return total
        # group contributions by denominator so unreduced adds do not
        # pile up denominator degree
        groups = {}
        for (p, w, s), c in self.terms.items():
            if s != 0:
                continue
            if isinstance(c, PiFrac):
                num, den = c.num, c.den
            else:
                num, den = PiPoly.const(c), _PP_ONE
            if p:
                num = num.mul(PiPoly.pi_pow(p, 2 ** p))
            cur = groups.get(den)
            groups[den] = num if cur is None else cur.add(num)
        total = None
        for den, num in groups.items():
            pf = PiFrac(num, den, reduce=False)
            total = pf if total is None else total + pf
        if total is None:
            return F0
        return simplify_value(total)

    def eval_float(self, t):
        total = 0.0
        for (p, w, s), c in self.terms.items():
            base = math.cos(w * t) if s == 0 else math.sin(w * t)
            total += float(c) * t ** p * base
        return total

    def has_float(self):
        return any(isinstance(c, float) for c in self.terms.values())

    def __repr__(self):
        return "TrigPoly(%d terms)" % len(self.terms)


def poly_on_trigs(poly, trajs, cache=None):
    """Evaluate a Poly on TrigPoly arguments."""
    if cache is None:
        cache = {}

    def power(i, k):
        key = (i, k)
        hit = cache.get(key)
        if hit is None:
            if k == 1:
                hit = trajs[i]
            else:
                hit = power(i, k - 1).mul(trajs[i])
            cache[key] = hit
        return hit

    total = TrigPoly.zero()
    for expo, coef in poly.terms.items():
        term = TrigPoly.const(coef)
        for i, a in enumerate(expo):
            if a:
                term = term.mul(power(i, a))
        total = total.add(term)
    return total


# ---------------------------------------------------------------------------
# Field linear algebra (works for Fraction, PiFrac and float entries)


def field_matvec(rows, vec):
    out = []
    for r in rows:
        acc = r[0] * vec[0]
        for x, v in zip(r[1:], vec[1:]):
            acc = acc + x * v
        out.append(acc)
    return out


def field_inverse(rows):
    n = len(rows)
    a = [list(r) + [F1 if i == j else F0 for j in range(n)]
         for i, r in enumerate(rows)]
    for col in range(n):
        pivot = None
        for r in range(col, n):
            if not coeff_is_zero(a[r][col]):
                pivot = r
                break
        if pivot is None:
            raise SingularMatrix("matrix has no pivot in column %d" % col)
        a[col], a[pivot] = a[pivot], a[col]
        pv = a[col][col]
        a[col] = [x / pv for x in a[col]]
        for r in range(n):
            if r != col and not coeff_is_zero(a[r][col]):
                f = a[r][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    return [row[n:] for row in a]


def field_det(rows):
    n = len(rows)
    a = [list(r) for r in rows]
    det = F1
    for col in range(n):
        pivot = None
        for r in range(col, n):
            if not coeff_is_zero(a[r][col]):
                pivot = r
                break
        if pivot is None:
            return F0
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            det = -det
        det = det * a[col][col]
        for r in range(col + 1, n):
            if not coeff_is_zero(a[r][col]):
                f = a[r][col] / a[col][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    return det


# ---------------------------------------------------------------------------
# Frequency plans


class SlotPlan:
    """Frequencies for one class element.

    channels[c] lists the unit-amplitude basic frequencies on channel
    c+1; the resonance sinusoid (whose amplitude is solved for) sits on
    resonance_channel at frequency resonance.  carrier, when nonzero,
    is one more unit cosine on the resonance channel, used when that
    channel would otherwise have no basic of its own.
    """

    __slots__ = ("element", "channels", "resonance_channel", "resonance",
                 "carrier")

    def __init__(self, element, channels, resonance_channel, resonance,
                 carrier=0):
        self.element = element
        self.channels = tuple(tuple(c) for c in channels)
        self.resonance_channel = resonance_channel
        self.resonance = resonance
        self.carrier = carrier

    def to_json(self):
        return {
            "element": self.element,
            "channels": [list(c) for c in self.channels],
            "resonance_channel": self.resonance_channel,
            "resonance": self.resonance,
            "carrier": self.carrier,
        }


class ClassPlan:
    """Frequency and matrix data for one equivalence class.

    The stored matrix A is column equilibrated: slot k's probe column
    is divided by the exact power of two ``gains[k]`` nearest its
    norm, so the determinant threshold measures angular independence
    instead of raw scale.  solve_amps undoes the gains, returning the
    actual resonance amplitudes.
    """

    def __init__(self, class_id, elements, delta, epsilon, slots,
                 spacing, rotation=0):
        self.class_id = class_id
        self.elements = tuple(elements)
        self.delta = tuple(delta)
        self.epsilon = epsilon
        self.slots = list(slots)
        self.spacing = spacing
        self.rotation = rotation
        self.A = None
        self.B = None
        self.det = None
        self.gains = None

    @property
    def is_generator(self):
        return self.delta and sum(self.delta) == 1

    def solve_amps(self, delta_target):
        if self.B is None:
            raise ValueError("class plan has no control matrix yet")
        raw = field_matvec(self.B, list(delta_target))
        out = []
        for g, a in zip(self.gains, raw):
            a = a / g
            if isinstance(a, PiFrac):
                a = simplify_value(a)
            out.append(a)
        return out

    def max_frequency(self):
        top = 0
        for slot in self.slots:
            for ch in slot.channels:
                for w in ch:
                    top = max(top, w)
            top = max(top, slot.resonance, slot.carrier)
        return top

    def to_json(self):
        out = {
            "class_id": self.class_id,
            "elements": list(self.elements),
            "delta": list(self.delta),
            "epsilon": self.epsilon,
            "spacing": self.spacing,
            "slots": [s.to_json() for s in self.slots],
        }
        if self.A is not None:
            out["A"] = [[float(x) for x in row] for row in self.A]
            out["det"] = float(self.det)
        return out


class FrequencyPlan:
    """Plans for every class of a basis, in steering order."""

    def __init__(self, m, r, classes):
        self.m = m
        self.r = r
        self.classes = list(classes)

    def to_json(self):
        return {"m": self.m, "r": self.r,
                "classes": [c.to_json() for c in self.classes]}


def plan_frequencies(basis, class_id, spacing=1, rotation=0):
    """Assign integer frequencies to the slots of one class.

    The chain rule keeps every new frequency strictly above sum(delta)
    times everything assigned so far (scaled by ``spacing``), which
    makes the designated per-slot resonances the only vanishing integer
    combinations reachable with the multiplicities any coordinate can
    produce; verify_nonresonance double-checks that combinatorially.
    The channel fill order rotates with the slot position (plus
    ``rotation``), giving each slot of a multi-element class a
    different magnitude pattern; identical patterns make the probe
    columns nearly parallel.
    """
    cls = basis.classes[class_id]
    delta = basis.element(cls[0]).delta
    m = basis.m
    total = sum(delta)
    if total == 1:
        gen = delta.index(1) + 1
        slot = SlotPlan(cls[0], [()] * m, gen, 0, 0)
        return ClassPlan(class_id, cls, delta, 0, [slot], spacing,
                         rotation)
    eps = (total - 1) % 2
    vmax = 0

    def fresh():
        nonlocal vmax
        val = spacing * total * vmax + 1
        vmax = max(vmax, val)
        return val

    slots = []
    for pos, element in enumerate(cls):
        res_ch = basis.element(element).phi
        counts = [delta[c - 1] - (1 if c == res_ch else 0)
                  for c in range(1, m + 1)]
        channels = [[] for _ in range(m)]
        for step in range(m):
            c = (pos + rotation + step) % m
            channels[c] = [fresh() for _ in range(counts[c])]
        resonance = sum(sum(ch) for ch in channels)
        vmax = max(vmax, resonance)
        carrier = fresh() if not channels[res_ch - 1] else 0
        slots.append(SlotPlan(element, channels, res_ch, resonance,
                              carrier))
    return ClassPlan(class_id, cls, delta, eps, slots, spacing,
                     rotation)


def _signed_sums(pool, count):
    """All achievable (sum, multiset) pairs using ``count`` signed
    factors drawn with repetition from ``pool``."""
    signed = []
    for w in sorted(set(pool)):
        signed.append((w, 1))
        signed.append((w, -1))
    out = []
    for combo in itertools.combinations_with_replacement(signed, count):
        total = sum(w * s for w, s in combo)
        out.append((total, combo))
    return out


def _reduce_pairs(combo):
    """Cancel matched +/- occurrences of the same frequency in the same
    channel; such pairs only produce phase-quadrature terms with no net
    period displacement."""
    out = {}
    freqs = {(c, w) for c, w, _s in combo}
    for c, w in freqs:
        k = combo.get((c, w, 1), 0) - combo.get((c, w, -1), 0)
        if k > 0:
            out[(c, w, 1)] = k
        elif k < 0:
            out[(c, w, -1)] = -k
    return frozenset(out.items())


def _negate(sig):
    return frozenset(((c, w, -s), k) for (c, w, s), k in sig)


def verify_nonresonance(basis, entry):
    """Check that the only vanishing integer frequency combinations in
    this class's period are the designated slot resonances.

    A settled coordinate of an earlier class would be displaced by a
    zero-sum signed combination matching its generator counts, so up to
    matched-pair cancellation none may exist; for the class itself the
    combinations must be exactly the designed one per slot, keeping the
    endpoint linear in the resonance amplitudes.  Later classes are
    free to drift.
    """
    m = basis.m
    pools = [[] for _ in range(m)]
    for slot in entry.slots:
        for c in range(m):
            pools[c].extend(slot.channels[c])
        pools[slot.resonance_channel - 1].append(slot.resonance)
        if slot.carrier:
            pools[slot.resonance_channel - 1].append(slot.carrier)
    designed = set()
    for slot in entry.slots:
        combo = {}
        for c in range(m):
            for w in slot.channels[c]:
                key = (c, w, -1)
                combo[key] = combo.get(key, 0) + 1
        key = (slot.resonance_channel - 1, slot.resonance, 1)
        combo[key] = combo.get(key, 0) + 1
        designed.add(frozenset(combo.items()))
    allowed = {frozenset()} | designed | {_negate(s) for s in designed}
    per_channel = {}
    for ci in range(entry.class_id + 1):
        delta_j = basis.element(basis.classes[ci][0]).delta
        if sum(delta_j) == 1:
            continue
        own = ci == entry.class_id
        lists = []
        for c in range(m):
            key = (c, delta_j[c])
            if key not in per_channel:
                per_channel[key] = _signed_sums(pools[c], delta_j[c])
            lists.append(per_channel[key])
        found = set()
        for parts in itertools.product(*lists):
            if sum(p[0] for p in parts) != 0:
                continue
            combo = {}
            for c, (_total, factors) in enumerate(parts):
                for w, s in factors:
                    key = (c, w, s)
                    combo[key] = combo.get(key, 0) + 1
            found.add(_reduce_pairs(combo))
        if own:
            if not found <= allowed or not designed <= found:
                return False
        elif found - {frozenset()}:
            return False
    return True


def template_channels(entry, amps):
    """Per-channel term lists (amp, freq, quarter) for one period."""
    m = len(entry.delta)
    channels = [[] for _ in range(m)]
    for slot, amp in zip(entry.slots, amps):
        for c in range(m):
            for w in slot.channels[c]:
                channels[c].append((F1, w, 0))
        quarter = 0 if entry.is_generator else entry.epsilon
        channels[slot.resonance_channel - 1].append(
            (amp, slot.resonance, quarter))
        if slot.carrier:
            channels[slot.resonance_channel - 1].append(
                (F1, slot.carrier, 0))
    return channels


def channel_trigpolys(channels):
    out = []
    for terms in channels:
        u = TrigPoly.zero()
        for amp, w, q in terms:
            u = u.add(TrigPoly.sinusoid(amp, w, q))
        out.append(u)
    return out


def propagate_period(system, channels, state, float_mode=None,
                     want_trajs=False):
    """Exact state after one 2 pi period of the given controls.

    The canonical dynamics are triangular: coordinate j integrates
    P_j(v(t)) times its channel.  Trajectories are TrigPoly in t, so
    each antiderivative is closed form and period-end values are exact
    elements of the pi-fraction field (or floats in float mode).
    """
    us = channel_trigpolys(channels)
    if float_mode is None:
        float_mode = (any(isinstance(v, float) for v in state)
                      or any(u.has_float() for u in us))
    trajs = []
    out = []
    cache = {}
    for j in range(1, system.n + 1):
        mono = system.monomials[j - 1]
        chan = system.basis.element(j).phi
        integrand = poly_on_trigs(mono, trajs, cache).mul(us[chan - 1])
        vj = integrand.antiderivative()
        init = state[j - 1]
        if not coeff_is_zero(init):
            vj = vj.add(TrigPoly.const(init))
        trajs.append(vj)
        out.append(simplify_value(vj.value_2pi(float_mode)))
    if want_trajs:
        return out, trajs, us
    return out


def control_matrix(system, entry, elements=None, det_threshold=1e-6):
    """Displacement matrix of one class: column k is the net change of
    the class coordinates under a unit probe on slot k's resonance.

    Also verifies that the basics alone produce exactly zero net
    change, fills entry.A / entry.B / entry.det, and raises
    SingularMatrix below the determinant threshold.
    """
    if elements is None:
        elements = entry.elements
    q = len(entry.slots)
    zero_state = [F0] * system.n
    earlier = [j for j in range(1, system.n + 1)
               if system.basis.class_of[j] < entry.class_id]

    def check_settled(end, what):
        for j in earlier:
            if not coeff_is_zero(simplify_value(end[j - 1])):
                raise SingularMatrix(
                    "%s of class %d displaces settled coordinate %d"
                    % (what, entry.class_id, j), class_id=entry.class_id)

    if not entry.is_generator:
        base = propagate_period(
            system, template_channels(entry, [F0] * q), zero_state,
            float_mode=False)
        for j in elements:
            v = simplify_value(base[j - 1])
            if not coeff_is_zero(v):
                raise SingularMatrix(
                    "basics alone displace coordinate %d of class %d"
                    % (j, entry.class_id), value=float(v))
        check_settled(base, "basics")
    cols = []
    for k in range(q):
        amps = [F1 if i == k else F0 for i in range(q)]
        end = propagate_period(system, template_channels(entry, amps),
                               zero_state, float_mode=False)
        check_settled(end, "probe %d" % k)
        cols.append([PiFrac.lift(end[j - 1]) for j in elements])
    gains = []
    for k in range(q):
        norm = math.sqrt(math.fsum(float(x) ** 2 for x in cols[k]))
        if norm == 0.0:
            raise SingularMatrix("slot %d displaces nothing" % k,
                                 class_id=entry.class_id)
        gains.append(Fraction(2) ** round(math.log2(norm)))
    a = [[cols[k][i] / gains[k] for k in range(q)] for i in range(q)]
    det = field_det(a)
    det_f = abs(float(det)) if not coeff_is_zero(det) else 0.0
    norms = [math.sqrt(math.fsum(float(x) ** 2 for x in row))
             for row in a]
    if any(n == 0.0 for n in norms):
        raise SingularMatrix("zero row in control matrix",
                             class_id=entry.class_id)
    geo = math.exp(math.fsum(math.log(n) for n in norms) / q)
    if coeff_is_zero(det) or det_f < det_threshold * geo:
        raise SingularMatrix(
            "control matrix determinant %.3e below threshold %.3e"
            % (det_f, det_threshold * geo), class_id=entry.class_id)
    entry.A = a
    entry.B = field_inverse(a)
    entry.det = det
    entry.gains = gains
    return a


def plan_class(system, class_id, budget=64, det_threshold=1e-6):
    """Frequencies plus control matrix.  The rotation advances on every
    retry (reseeding the candidate search and cycling the channel fill
    order) and the spacing doubles every eight retries, until the
    budget runs out."""
    last = None
    for attempt in range(budget):
        spacing = 1 << (attempt // 8)
        entry = plan_frequencies(system.basis, class_id, spacing,
                                 rotation=attempt)
        if not entry.is_generator and not verify_nonresonance(
                system.basis, entry):
            last = "resonant frequency combination (attempt %d)" % attempt
            continue
        try:
            control_matrix(system, entry, det_threshold=det_threshold)
            return entry
        except SingularMatrix as exc:
            last = exc
    raise SearchBudgetExhausted(
        "no usable frequencies for class %d after %d attempts"
        % (class_id, budget), last_error=str(last))


def build_plan(system, budget=64, det_threshold=1e-6):
    entries = [plan_class(system, ci, budget, det_threshold)
               for ci in range(len(system.basis.classes))]
    return FrequencyPlan(system.m, system.r, entries)


def steer_class(delta_target, entry):
    """Channel terms realising a prescribed net change of one class."""
    amps = entry.solve_amps(delta_target)
    return template_channels(entry, amps), amps


# ---------------------------------------------------------------------------
# Control laws


class ControlLaw:
    """Concatenated per-period sinusoidal controls.

    Each period holds one term list per channel; a term (amp, w, q)
    contributes amp * cos(w tau - q pi/2) on the period's local time
    tau in [0, 2 pi].  The law's value is scale / time_scale times the
    period value at tau = (t / time_scale) mod 2 pi, so ``scale``
    implements the dilation homogeneity and ``time_scale`` implements
    input-bound reparameterisation without touching endpoints.
    """

    def __init__(self, m, periods, scale=F1, time_scale=F1, meta=None):
        self.m = m
        self.periods = list(periods)
        self.scale = scale
        self.time_scale = time_scale
        self.meta = meta or {}

    @property
    def nperiods(self):
        return len(self.periods)

    @property
    def horizon(self):
        return 2.0 * math.pi * self.nperiods * float(self.time_scale)

    def eval(self, t):
        """Control values at time t, as floats."""
        if not self.periods:
            return [0.0] * self.m
        ts = float(self.time_scale)
        base = 2.0 * math.pi * ts
        k = int(t // base)
        if k >= self.nperiods:
            k = self.nperiods - 1
        if k < 0:
            k = 0
        tau = (t - k * base) / ts
        gain = float(self.scale) / ts
        out = []
        for terms in self.periods[k]["channels"]:
            val = 0.0
            for amp, w, q in terms:
                val += float(amp) * math.cos(w * tau - q * math.pi / 2.0)
            out.append(gain * val)
        return out

    def period_trigpolys(self, k):
        return channel_trigpolys(self.periods[k]["channels"])

    def to_json(self):
        periods = []
        for p in self.periods:
            periods.append({
                "class_id": p.get("class_id"),
                "elements": list(p.get("elements", ())),
                "channels": [[[float(a), int(w), int(q)]
                              for a, w, q in terms]
                             for terms in p["channels"]],
            })
        out = {
            "m": self.m,
            "scale": float(self.scale),
            "time_scale": float(self.time_scale),
            "periods": periods,
        }
        if is_exact(self.scale):
            out["scale_exact"] = str(Fraction(self.scale))
        return out

    def to_json_str(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, blob):
        if isinstance(blob, str):
            blob = json.loads(blob)
        periods = []
        for p in blob["periods"]:
            periods.append({
                "class_id": p.get("class_id"),
                "elements": tuple(p.get("elements", ())),
                "channels": [[(a, int(w), int(q)) for a, w, q in terms]
                             for terms in p["channels"]],
            })
        scale = blob.get("scale", 1.0)
        if "scale_exact" in blob:
            scale = Fraction(blob["scale_exact"])
        return cls(blob["m"], periods, scale, blob.get("time_scale", 1.0))


def _max_abs(values):
    return max((abs(float(v)) for v in values), default=0.0)


def exact_steer(x_init, system, plan=None):
    """Steer the canonical system from x_init to the origin.

    Returns a ControlLaw on [0, 2 pi N].  The propagation always runs
    in the pi-fraction field, so the canonical endpoint is exactly
    zero: float coordinates are dyadic rationals already, and when the
    pseudo-norm of the state has no exact root the normalisation scale
    is rounded to a nearby dyadic (the scale only conditions the
    amplitude magnitudes, so exactness of the root is not needed).
    """
    if len(x_init) != system.n:
        raise ValueError("state has dimension %d, expected %d"
                         % (len(x_init), system.n))
    weights = system.weights
    x = [Fraction(v) for v in x_init]
    lam = pseudo_norm(x, weights)
    if lam == 0:
        return ControlLaw(system.m, [], F1,
                          meta={"system": system, "plan": plan,
                                "z_init": [F0] * system.n,
                                "x_init": x})
    if not is_exact(lam):
        lam = Fraction(float(lam))
    if plan is None:
        plan = build_plan(system)
    state = dilate(x, F1 / lam, weights)
    z_init = list(state)
    periods = []
    done = []
    for entry in plan.classes:
        target = [-(state[j - 1]) for j in entry.elements]
        channels, amps = steer_class(target, entry)
        state = propagate_period(system, channels, state,
                                 float_mode=False)
        for j in entry.elements:
            assert coeff_is_zero(simplify_value(state[j - 1])), \
                "class coordinate %d not annihilated" % j
            state[j - 1] = F0
        for j in done:
            assert coeff_is_zero(simplify_value(state[j - 1])), \
                "earlier class coordinate %d moved" % j
            state[j - 1] = F0
        done.extend(entry.elements)
        periods.append({
            "class_id": entry.class_id,
            "elements": entry.elements,
            "channels": channels,
            "amps": amps,
        })
    return ControlLaw(system.m, periods, lam,
                      meta={"system": system, "plan": plan,
                            "z_init": z_init, "x_init": x})


# ---------------------------------------------------------------------------
# Smooth concatenation


def _carrier_frequencies(pool_max, mult, count, taken):
    """A chain of mutually non-resonant carrier frequencies above the
    period's pool."""
    freqs = []
    v = max(pool_max, max(taken, default=0))
    for _ in range(count):
        v = mult * v + 1
        freqs.append(v)
    return freqs


def _junction_data(us, order):
    """Values and derivatives (up to ``order``) of each channel at the
    period start and end."""
    starts = []
    ends = []
    for u in us:
        svals = []
        evals = []
        cur = u
        for _ in range(order + 1):
            svals.append(simplify_value(cur.value_zero()))
            evals.append(simplify_value(cur.value_2pi(cur.has_float())))
            cur = cur.derivative()
        starts.append(svals)
        ends.append(evals)
    return starts, ends


def _solve_carrier_amps(freqs_even, freqs_odd, gaps):
    """Carrier amplitudes matching value/derivative gaps at tau = 0.

    gaps[d] is the required extra derivative of order d.  cos carriers
    produce even derivatives ((-w^2)^i at order 2i), sin carriers the
    odd ones (w (-w^2)^i at order 2i+1); the two Vandermonde systems
    are solved independently and exactly.
    """
    even_orders = [d for d in range(len(gaps)) if d % 2 == 0]
    odd_orders = [d for d in range(len(gaps)) if d % 2 == 1]
    amps = []
    if even_orders:
        rows = [[Fraction(-w * w) ** (d // 2) for w in freqs_even]
                for d in even_orders]
        rhs = [gaps[d] for d in even_orders]
        sol = _field_solve(rows, rhs)
        amps.extend(zip(freqs_even, [0] * len(freqs_even), sol))
    if odd_orders:
        rows = [[Fraction(w) * Fraction(-w * w) ** ((d - 1) // 2)
                 for w in freqs_odd] for d in odd_orders]
        rhs = [gaps[d] for d in odd_orders]
        sol = _field_solve(rows, rhs)
        amps.extend(zip(freqs_odd, [1] * len(freqs_odd), sol))
    return amps


def _field_solve(rows, rhs):
    inv = field_inverse([[PiFrac.lift(x) if not isinstance(x, float)
                          else x for x in r] for r in rows])
    return field_matvec(inv, rhs)


def smooth_concatenate(laws, k):
    """Join laws into one whose channels are C^(k-1) across junctions.

    k = 0 plainly concatenates.  For k >= 1 each period gains a few
    high-frequency non-resonant carrier sinusoids per channel whose
    amplitudes close the value and derivative gaps at its start; when
    the first law came from exact_steer (and so carries its system and
    plan), the resonance amplitudes are re-solved by a fixed-point
    iteration so the endpoint stays exact to far below any working
    tolerance.  The first period is also anchored at zero, so the
    joined control starts at rest.
    """
    if isinstance(laws, ControlLaw):
        laws = [laws]
    if not laws:
        raise ValueError("nothing to concatenate")
    m = laws[0].m
    if any(law.m != m for law in laws):
        raise ValueError("channel counts differ")
    if k == 0:
        periods = []
        scale0 = laws[0].scale
        for law in laws:
            ratio = _scale_ratio(law.scale, scale0)
            for p in law.periods:
                periods.append(_scaled_period(p, ratio))
        return ControlLaw(m, periods, scale0, laws[0].time_scale,
                          meta={"smoothed": 0})
    single = (len(laws) == 1 and laws[0].meta.get("system") is not None
              and laws[0].meta.get("plan") is not None)
    if single:
        return _smooth_replan(laws[0], k)
    return _smooth_stitch(laws, k)


def _scale_ratio(a, b):
    if is_exact(a) and is_exact(b):
        return Fraction(a) / Fraction(b)
    return float(a) / float(b)


def _scaled_period(p, ratio):
    if ratio == 1:
        return dict(p)
    out = dict(p)
    out["channels"] = [[(a * ratio, w, q) for a, w, q in terms]
                       for terms in p["channels"]]
    return out


def _smooth_replan(law, k):
    """Exact smoothing of a single exact_steer law.

    Re-solves each period's resonance amplitudes together with its
    carrier amplitudes so that junctions match exactly and the
    endpoint error is pushed below 1e-30 componentwise.
    """
    system = law.meta["system"]
    plan = law.meta["plan"]
    state = [Fraction(v) if is_exact(v) else v
             for v in law.meta["z_init"]]
    exact_mode = all(is_exact(v) for v in state)
    resid_tol = 1e-30 if exact_mode else 1e-12
    order = k - 1
    mult = max(2, max(sum(e.delta) for e in plan.classes) + 1)
    prev_end = [[F0] * (order + 1) for _ in range(law.m)]
    new_periods = []
    for p in law.periods:
        entry = plan.classes[p["class_id"]]
        q = len(entry.slots)
        pool = entry.max_frequency()
        n_even = len([d for d in range(order + 1) if d % 2 == 0])
        n_odd = len([d for d in range(order + 1) if d % 2 == 1])
        carrier_freqs = []
        taken = []
        for c in range(law.m):
            evens = _carrier_frequencies(pool, mult, n_even, taken)
            taken.extend(evens)
            odds = _carrier_frequencies(pool, mult, n_odd, taken)
            taken.extend(odds)
            carrier_freqs.append((evens, odds))
        target = [-(state[j - 1]) for j in entry.elements]
        amps = entry.solve_amps(target)
        final = None
        for round_no in range(30):
            channels = template_channels(entry, amps)
            plain_us = channel_trigpolys(channels)
            carried = []
            for c in range(law.m):
                u = plain_us[c]
                gaps = []
                cur = u
                for d in range(order + 1):
                    start_v = cur.value_zero()
                    gaps.append(prev_end[c][d] - start_v)
                    cur = cur.derivative()
                extra = _solve_carrier_amps(carrier_freqs[c][0],
                                            carrier_freqs[c][1], gaps)
                terms = list(channels[c])
                for w, is_sin, amp in extra:
                    terms.append((amp, w, 1 if is_sin else 0))
                carried.append(terms)
            end = propagate_period(system, carried, state,
                                   float_mode=not exact_mode)
            resid = [end[j - 1] for j in entry.elements]
            worst = _max_abs(resid)
            if worst < resid_tol:
                final = (carried, end)
                break
            correction = entry.solve_amps(resid)
            amps = [a - c for a, c in zip(amps, correction)]
        if final is None:
            raise SearchBudgetExhausted(
                "smoothing did not converge for class %d"
                % p["class_id"], residual=worst)
        carried, end = final
        us = channel_trigpolys(carried)
        _, ends = _junction_data(us, order)
        prev_end = ends
        state = [simplify_value(v) for v in end]
        new_periods.append({
            "class_id": p["class_id"],
            "elements": p["elements"],
            "channels": carried,
        })
    meta = dict(law.meta)
    meta["smoothed"] = k
    meta["final_state"] = state
    return ControlLaw(law.m, new_periods, law.scale, law.time_scale,
                      meta)


def _smooth_stitch(laws, k):
    """Value/derivative stitching without replanning.

    Used for heterogeneous law lists (different charts or scales); the
    carriers are displacement-neutral to first order, so per-segment
    endpoint errors stay far below planner tolerances.
    """
    m = laws[0].m
    order = k - 1
    scale0 = laws[0].scale
    mult = 4
    prev_end = [[F0] * (order + 1) for _ in range(m)]
    new_periods = []
    for law in laws:
        ratio = _scale_ratio(law.scale, scale0)
        for p in law.periods:
            base = _scaled_period(p, ratio)
            pool = 0
            for terms in base["channels"]:
                for _, w, _q in terms:
                    pool = max(pool, w)
            n_even = len([d for d in range(order + 1) if d % 2 == 0])
            n_odd = len([d for d in range(order + 1) if d % 2 == 1])
            taken = []
            out_channels = []
            us = channel_trigpolys(base["channels"])
            for c in range(m):
                evens = _carrier_frequencies(pool, mult, n_even, taken)
                taken.extend(evens)
                odds = _carrier_frequencies(pool, mult, n_odd, taken)
                taken.extend(odds)
                gaps = []
                cur = us[c]
                for d in range(order + 1):
                    gaps.append(prev_end[c][d] - cur.value_zero())
                    cur = cur.derivative()
                extra = _solve_carrier_amps(evens, odds, gaps)
                terms = list(base["channels"][c])
                for w, is_sin, amp in extra:
                    terms.append((amp, w, 1 if is_sin else 0))
                out_channels.append(terms)
            stitched = dict(base)
            stitched["channels"] = out_channels
            new_periods.append(stitched)
            _, ends = _junction_data(channel_trigpolys(out_channels),
                                     order)
            prev_end = ends
    return ControlLaw(m, new_periods, scale0, laws[0].time_scale,
                      meta={"smoothed": k, "stitched": True})
