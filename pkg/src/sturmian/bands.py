"""Spectral generating band hierarchy with validated root isolation.

Level k holds three band types. Type I bands are generated by y_k (trace of
the mixed word), types II and III by x_k; child counts follow the coding
rules: an I parent holds one II child, a II parent holds a+1 I children
interleaved with a III children, a III parent holds a I children interleaved
with a-1 III children, where a is the next continued-fraction coefficient.

Numerics: generating traces are evaluated by the scalar renormalization
recursion from the level-0 seed, O(sum a_j) operations per point, never by
multiplying q_k transfer matrices. Interior zeros are bracketed on a grid
sized from the known child counts (isolation doubles as validation); band
edges are solved between neighbouring zeros, where the Fricke invariant
guarantees the other family's magnitude is at least lambda, so brackets are
always sign-definite. Double precision is used while band lengths stay well
above the double resolution near their magnitude; deeper levels switch to
gmpy2 floats with a per-level precision budget that is re-verified after the
level is built and retried larger on shortfall.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import gmpy2
from gmpy2 import mpfr

from .contfrac import FrequencySpec
from .errors import ChildCountMismatchError, PrecisionError, SpecificationError

__all__ = [
    "Band",
    "BandLevel",
    "LevelStats",
    "level0",
    "children",
    "build_hierarchy",
    "level_stats",
    "count_recursion",
    "expected_child_counts",
    "grid_type_counts",
    "bands_csv",
    "bands_json",
    "beam_max_band",
    "tau_edge",
]

TYPE_I = "I"
TYPE_II = "II"
TYPE_III = "III"


def tau_edge(e: str, n: int) -> int:
    """Letter multiplicity table tau_e(n)."""
    if e == "e12":
        return 1
    if e == "e21":
        return n + 1
    if e in ("e23", "e31"):
        return n
    if e == "e33":
        return n - 1
    raise SpecificationError(f"unknown edge {e!r}")


def _child_edge_and_type(parent_type: str, family: str) -> tuple:
    if parent_type == TYPE_I:
        return "e12", TYPE_II
    if family == "y":
        return ("e21", TYPE_I) if parent_type == TYPE_II else ("e31", TYPE_I)
    return ("e23", TYPE_III) if parent_type == TYPE_II else ("e33", TYPE_III)


@dataclass(frozen=True)
class Band:
    """One spectral generating band.

    ``word`` is the coding word (empty at order 0), each letter a triple
    (edge name, tau, l). ``slope`` is the sign of the generating trace's
    derivative on the band. Endpoints and the interior zero z_B are floats at
    shallow levels and gmpy2 floats once lengths drop below what doubles
    resolve; the *_log fields are always ordinary floats (natural log).
    """

    order: int
    btype: str
    word: tuple
    left: object
    right: object
    z_center: object
    deriv_log: float
    slope: int
    coeffs: tuple
    parent_index: Optional[int] = None
    parent_deriv_log: Optional[float] = None

    @property
    def generator(self) -> str:
        """Which trace drives this band: "y" for type I, "x" otherwise."""
        return "y" if self.btype == TYPE_I else "x"

    @property
    def length(self) -> float:
        return float(self.right - self.left)

    @property
    def length_log(self) -> float:
        return _log_float(self.right - self.left)

    @property
    def deriv(self) -> float:
        """|t_B'(z_B)|; inf if it overflows a double (use deriv_log then)."""
        return math.exp(self.deriv_log) if self.deriv_log < 700 else math.inf

    def word_text(self) -> str:
        return "-".join(f"{e}:{tau}:{l}" for (e, tau, l) in self.word)


@dataclass
class BandLevel:
    """All bands of one order, sorted by left endpoint."""

    order: int
    lam: float
    bands: list

    @property
    def counts(self) -> tuple:
        n = {TYPE_I: 0, TYPE_II: 0, TYPE_III: 0}
        for b in self.bands:
            n[b.btype] += 1
        return (n[TYPE_I], n[TYPE_II], n[TYPE_III])


@dataclass(frozen=True)
class LevelStats:
    max_length: float
    min_deriv: float
    measure: float
    max_length_log: float
    min_deriv_log: float


def count_recursion(counts: tuple, a: int) -> tuple:
    """(n_I, n_II, n_III) -> counts one level down with coefficient a."""
    n1, n2, n3 = counts
    return ((a + 1) * n2 + a * n3, n1, a * n2 + (a - 1) * n3)


def expected_child_counts(btype: str, a: int) -> dict:
    """Children per parent, keyed by the child generator family."""
    if a < 1:
        raise SpecificationError("a must be >= 1")
    if btype == TYPE_I:
        return {"x": 1, "y": 0}
    if btype == TYPE_II:
        return {"y": a + 1, "x": a}
    if btype == TYPE_III:
        return {"y": a, "x": a - 1}
    raise SpecificationError(f"unknown band type {btype!r}")


def level0(lam: float) -> BandLevel:
    """The two order-0 bands: type I [lam-2, lam+2], type III [-2, 2].

    Requires lam > 4 (hierarchy disjointness). The derivative-ratio and
    length lemmas additionally assume lam >= 20; a warning flags the gap.
    """
    if not lam > 4:
        raise SpecificationError("lambda must exceed 4")
    if lam < 20:
        import warnings

        warnings.warn(
            "4 < lambda < 20: hierarchy is valid but derivative/length bounds "
            "assume lambda >= 20",
            stacklevel=2,
        )
    lam = float(lam)
    band_iii = Band(0, TYPE_III, (), -2.0, 2.0, 0.0, 0.0, 1, ())
    band_i = Band(0, TYPE_I, (), lam - 2.0, lam + 2.0, lam, 0.0, 1, ())
    return BandLevel(0, lam, [band_iii, band_i])


# --- trace evaluation --------------------------------------------------------


def _trace_vals(z, coeffs, lam):
    """(x_{K-1}, x_K, y_K, y_{K-1}) at level K = len(coeffs); duck-typed."""
    xp = 2 + 0 * z
    xc = z
    yc = z - lam
    py = yc
    for a in coeffs:
        py = yc
        tm, t = xp, yc  # (t_{(k,0)}, t_{(k,1)}); a-1 steps reach t_{(k,a)} = x_{k+1}
        for _ in range(a - 1):
            tm, t = t, xc * t - tm
        yc = xc * t - tm
        xp, xc = xc, t
    return xp, xc, yc, py


def _trace_vals_d(z, coeffs, lam):
    """As _trace_vals plus derivatives: appends (dx_{K-1}, dx_K, dy_K, dy_{K-1})."""
    xp = 2 + 0 * z
    xc = z
    yc = z - lam
    dxp = 0 * z
    dxc = 1 + 0 * z
    dyc = dxc
    py, pdy = yc, dyc
    for a in coeffs:
        py, pdy = yc, dyc
        tm, t = xp, yc
        dtm, dt = dxp, dyc
        for _ in range(a - 1):
            tm, t, dtm, dt = t, xc * t - tm, dt, dxc * t + xc * dt - dtm
        yc = xc * t - tm
        dyc = dxc * t + xc * dt - dtm
        xp, xc, dxp, dxc = xc, t, dxc, dt
    return xp, xc, yc, py, dxp, dxc, dyc, pdy


class _ChildEvaluator:
    """Both child generators (x and y branch) one level below a parent.

    For large next coefficients inside II/III parents the within-level
    recurrence is replaced by its exact Chebyshev closed form
    t_p = [y_k sin(p theta) - x_{k-1} sin((p-1) theta)] / sin(theta) with
    2 cos(theta) = x_k, cutting the cost per point from O(a) to O(1) past the
    parent-level recursion. Valid wherever |x_k| < 2, i.e. strictly inside
    the parent; points outside fall back to the recurrence.
    """

    _ANGULAR_CUTOFF = 24

    __slots__ = ("coeffs1", "lam", "parent_type", "a_next", "angular")

    def __init__(self, coeffs1: tuple, lam, parent_type: str):
        self.coeffs1 = coeffs1
        self.lam = lam
        self.parent_type = parent_type
        self.a_next = coeffs1[-1]
        self.angular = parent_type != TYPE_I and self.a_next > self._ANGULAR_CUTOFF

    def pair(self, z):
        """(x_child, y_child) at z."""
        if self.angular:
            out = self._pair_angular(z)
            if out is not None:
                return out
        _xp, xc, yc, _py = _trace_vals(z, self.coeffs1, self.lam)
        return xc, yc

    def one(self, z, family):
        xc, yc = self.pair(z)
        return xc if family == "x" else yc

    def one_d(self, z, family):
        """(t, t', parent_gen') for the requested family."""
        if self.angular:
            out = self._one_d_angular(z, family)
            if out is not None:
                return out
        xp, xc, yc, py, dxp, dxc, dyc, pdy = _trace_vals_d(z, self.coeffs1, self.lam)
        pdg = pdy if self.parent_type == TYPE_I else dxp
        if family == "x":
            return xc, dxc, pdg
        return yc, dyc, pdg

    def _pair_angular(self, z):
        X, xk, Y, _py = _trace_vals(z, self.coeffs1[:-1], self.lam)
        c = xk / 2
        if not -1 < c < 1:
            return None
        a = self.a_next
        theta = gmpy2.acos(c)
        s = gmpy2.sin(theta)
        sa = gmpy2.sin(a * theta)
        sam = gmpy2.sin((a - 1) * theta)
        sap = gmpy2.sin((a + 1) * theta)
        return (Y * sa - X * sam) / s, (Y * sap - X * sa) / s

    def _one_d_angular(self, z, family):
        X, xk, Y, _py, dX, dxk, dY, _pdy = _trace_vals_d(z, self.coeffs1[:-1], self.lam)
        c = xk / 2
        if not -1 < c < 1:
            return None
        p = self.a_next if family == "x" else self.a_next + 1
        theta = gmpy2.acos(c)
        s = gmpy2.sin(theta)
        sp = gmpy2.sin(p * theta)
        spm = gmpy2.sin((p - 1) * theta)
        cp = gmpy2.cos(p * theta)
        cpm = gmpy2.cos((p - 1) * theta)
        cth = c
        t = (Y * sp - X * spm) / s
        dtheta = -dxk / (2 * s)
        dt = (dY * sp - dX * spm) / s + dtheta * (
            (Y * p * cp - X * (p - 1) * cpm) / s - t * cth / s
        )
        return t, dt, dxk


# --- root solving ------------------------------------------------------------


def _sign(v) -> int:
    return 1 if v > 0 else (-1 if v < 0 else 0)


def _newton_root(eval_fd, lo, hi, f_lo_sign, rel_tol, seed=None, max_iter=20000):
    """Root of f in [lo, hi] given sign(f(lo)) != sign(f(hi)).

    ``eval_fd(z) -> (f, df, payload)``. Newton steps confined to the bracket;
    a bisection is forced whenever two successive iterations fail to halve
    the bracket, so progress is guaranteed even where the function approaches
    its zero at effectively high order (deep extremal-letter bands). ``seed``
    (e.g. a secant point from grid values) sets the first iterate. The root
    may sit at an endpoint. Returns (root, payload, f at the last iterate).
    """
    a, b = lo, hi
    x = seed if seed is not None and a < seed < b else a + (b - a) / 2
    last = None
    f = None
    prev_width = b - a
    prev_step = None
    stalls = 0
    for _ in range(max_iter):
        f, df, last = eval_fd(x)
        if f == 0:
            return x, last, f
        if (f > 0) == (f_lo_sign > 0):
            a = x
        else:
            b = x
        width = b - a
        if width <= rel_tol * (abs(x) + 1):
            return x, last, f
        xn = None
        if stalls < 2 and df != 0:
            step = abs(f / df)
            cand = x - f / df
            if a < cand < b:
                xn = cand
                if step <= rel_tol * (abs(x) + 1):
                    return xn, last, f
                # progress = bracket halved or step shrinking geometrically
                if width > 0.5 * prev_width and not (
                    prev_step is not None and step <= 0.5 * prev_step
                ):
                    stalls += 1
                else:
                    stalls = 0
                prev_step = step
        else:
            stalls = 0
            prev_step = None
        prev_width = width
        x = xn if xn is not None else a + (b - a) / 2
    return x, last, f


@dataclass
class _Ctx:
    """Numeric context for one level construction (None = double precision)."""

    prec: Optional[int]

    @property
    def is_float(self) -> bool:
        return self.prec is None

    @property
    def rel_tol(self) -> float:
        # 40 bits above the working precision: comfortably above the
        # evaluation noise floor, far below any band scale in use
        if self.is_float:
            return 4.4e-16
        return float(gmpy2.exp2(-(self.prec - 40)))

    def promote(self, x):
        return float(x) if self.is_float else mpfr(x)

    def linspace(self, lo, hi, n):
        step = (hi - lo) / (n - 1)
        if self.is_float:
            return [lo + i * step for i in range(n)]
        return [lo + mpfr(i) * step for i in range(n)]

    def run(self, fn):
        if self.is_float:
            return fn()
        with gmpy2.context(gmpy2.get_context(), precision=self.prec):
            return fn()


def _log_float(x) -> float:
    if isinstance(x, mpfr):
        return float(gmpy2.log(x))
    return math.log(x)


def _auto_precision(
    parent_length_log: float, lam: float, a_next: int, e12_cap: Optional[int] = None
) -> Optional[int]:
    """Bits for the next level build; None when doubles suffice.

    Budget = dynamic range from the magnitude down to the estimated minimum
    child length (worst per-step shrink from the length lemma) plus guard
    bits. Doubles also require the child traces not to overflow across the
    isolation grid, where gaps reach ~ lambda^(a+1). ``e12_cap`` limits the
    e12 shrink term for beam runs, which skip unreachable e12 children.
    """
    t1 = max((lam - 8) / 3, 2.0)
    e12_bits = (min(a_next, e12_cap) if e12_cap else a_next - 1) * math.log2(t1)
    shrink_bits = max(
        e12_bits,
        math.log2(3 * (lam + 5)) + 3 * math.log2(a_next + 1),
    )
    child_len_bits = parent_length_log / math.log(2) - shrink_bits
    depth_bits = math.log2(lam + 4) - child_len_bits
    overflow_bits = (a_next + 2) * math.log2(lam + 5)
    if depth_bits <= 40 and overflow_bits < 980:
        return None
    return int(max(96, depth_bits + 80))


# --- child construction ------------------------------------------------------


def _build_children(parent: Band, a_next: int, lam, ctx: _Ctx, parent_index=None):
    """All children of one parent, left to right, with validated counts.

    Only the x-family zeros need grid isolation: the y-family zeros
    interleave strictly with them, so each gap between consecutive x zeros
    (and the parent edges) brackets exactly one y zero with a guaranteed
    sign change. For a_next = 1 the x generator is the previous level's
    companion trace, whose single zero is bracketed by the parent itself,
    and no grid is needed at all.
    """
    want = expected_child_counts(parent.btype, a_next)
    coeffs1 = parent.coeffs + (a_next,)
    k1 = parent.order + 1

    # x_{k+1} == y_k identically when a_{k+1} = 1: the single II child of an
    # I parent is the parent interval itself. Copy, no numerics.
    if parent.btype == TYPE_I and a_next == 1:
        letter = ("e12", 1, 1)
        return [
            Band(
                k1,
                TYPE_II,
                parent.word + (letter,),
                parent.left,
                parent.right,
                parent.z_center,
                parent.deriv_log,
                parent.slope,
                coeffs1,
                parent_index,
                parent.deriv_log,
            )
        ]

    ev = _ChildEvaluator(coeffs1, lam, parent.btype)
    L = ctx.promote(parent.left)
    R = ctx.promote(parent.right)

    zs = [L, R]
    xv_grid = None
    yv_grid = None
    x_brackets = []
    if want["x"]:
        if a_next == 1:
            f_l = ev.one(L, "x")
            f_r = ev.one(R, "x")
            if _sign(f_l) == _sign(f_r):
                raise ChildCountMismatchError(
                    f"companion zero not bracketed at order {k1}", word=parent.word
                )
            seed = L - f_l * (R - L) / (f_r - f_l)
            x_brackets = [(0, _sign(f_l), seed)]
        else:
            zs, xv_grid, yv_grid, cells = _isolate_x(ev, L, R, want["x"], parent, lam)
            for i in cells:
                fl, fr = xv_grid[i], xv_grid[i + 1]
                seed = zs[i] - fl * (zs[i + 1] - zs[i]) / (fr - fl)
                x_brackets.append((i, _sign(fl), seed))

    x_solved = []
    for (i_cell, sign_left, seed) in x_brackets:
        z0, _fam, dval, pderiv = _solve_zero(
            ev, ctx, zs[i_cell], zs[i_cell + 1], "x", sign_left, seed
        )
        x_solved.append((z0, dval, pderiv, i_cell))

    solved = [(z0, "x", dval, pderiv, i_cell) for (z0, dval, pderiv, i_cell) in x_solved]
    if want["y"]:
        refs = [L] + [item[0] for item in x_solved] + [R]
        ref_vals = [ev.one(r, "y") for r in refs]
        if len(refs) - 1 != want["y"]:
            raise ChildCountMismatchError(
                f"gap count {len(refs) - 1} != expected y children {want['y']} "
                f"at order {k1}",
                word=parent.word,
            )
        y_cells = []
        if yv_grid is not None:
            y_cells = [
                i
                for i in range(len(zs) - 1)
                if (yv_grid[i] > 0) != (yv_grid[i + 1] > 0)
            ]
        for g in range(len(refs) - 1):
            f_l, f_r = ref_vals[g], ref_vals[g + 1]
            if _sign(f_l) == _sign(f_r) or f_l == 0:
                raise ChildCountMismatchError(
                    f"y zero not bracketed in gap {g} at order {k1}", word=parent.word
                )
            lo, hi, sign_lo, seed = refs[g], refs[g + 1], _sign(f_l), None
            if y_cells:
                inside = [i for i in y_cells if lo <= zs[i] and zs[i + 1] <= hi]
                if len(inside) == 1:
                    i = inside[0]
                    fl, fr = yv_grid[i], yv_grid[i + 1]
                    lo, hi, sign_lo = zs[i], zs[i + 1], _sign(fl)
                    seed = lo - fl * (hi - lo) / (fr - fl)
            z0, _fam, dval, pderiv = _solve_zero(ev, ctx, lo, hi, "y", sign_lo, seed)
            solved.append((z0, "y", dval, pderiv, None))
    solved.sort(key=lambda item: item[0])
    families = [item[1] for item in solved]
    if any(families[i] == families[i + 1] for i in range(len(families) - 1)):
        raise ChildCountMismatchError(
            f"children do not interleave at order {k1}", word=parent.word
        )

    bands = []
    l_counter = {"x": 0, "y": 0}
    empty = []
    for i, (z0, family, dval, pderiv, i_cell) in enumerate(solved):
        left_ref = solved[i - 1][0] if i > 0 else L
        right_ref = solved[i + 1][0] if i + 1 < len(solved) else R
        if family == "x" and xv_grid is not None:
            prev_cell = solved[i - 1][4] if i > 0 and solved[i - 1][4] is not None else None
            vals = xv_grid
            cell_leftwalk = (prev_cell + 1 if prev_cell is not None else 0, i_cell)
            nxt = solved[i + 1][4] if i + 1 < len(solved) and solved[i + 1][4] is not None else None
            cell_rightwalk = (i_cell + 1, nxt if nxt is not None else len(zs) - 1)
        else:
            vals = empty
            cell_leftwalk = (1, 0)
            cell_rightwalk = (1, 0)
        left_edge = _solve_edge(
            ev, ctx, family, zs, vals, cell_leftwalk[0], cell_leftwalk[1], left_ref, z0, True, parent
        )
        right_edge = _solve_edge(
            ev, ctx, family, zs, vals, cell_rightwalk[0], cell_rightwalk[1], right_ref, z0, False, parent
        )
        if not (left_edge <= z0 <= right_edge and left_edge < right_edge):
            raise PrecisionError(f"edge ordering failed at order {k1}")
        l_counter[family] += 1
        e, btype = _child_edge_and_type(parent.btype, family)
        letter = (e, tau_edge(e, a_next), l_counter[family])
        bands.append(
            Band(
                k1,
                btype,
                parent.word + (letter,),
                left_edge,
                right_edge,
                z0,
                _log_float(abs(dval)),
                _sign(dval),
                coeffs1,
                parent_index,
                _log_float(abs(pderiv)),
            )
        )
    return bands


def _isolate_x(ev, L, R, n_want, parent, lam):
    """Sign-change cells for the x-family zeros, validated against the count.

    Uniform grids are tried first; when the count fails (the parent generator
    can be extremely lopsided near extremal letter indices) the grid is laid
    uniformly in the angular coordinate of the parent generator with
    geometric refinement into the corners.
    """
    base = max(8, 8 * n_want)
    plans = [
        ("uniform", base),
        ("uniform", 4 * base),
        ("theta", base),
        ("theta", 4 * base),
        ("theta", 16 * base),
    ]
    for kind, grid_n in plans:
        if kind == "uniform":
            step = (R - L) / grid_n
            if isinstance(L, float):
                zs = [L + i * step for i in range(grid_n)] + [R]
            else:
                zs = [L + mpfr(i) * step for i in range(grid_n)] + [R]
        else:
            zs = _theta_grid(parent, lam, L, R, grid_n)
            if zs is None:
                continue
        pairs = [ev.pair(z) for z in zs]
        xv = [p[0] for p in pairs]
        yv = [p[1] for p in pairs]
        cells = [i for i in range(len(zs) - 1) if (xv[i] > 0) != (xv[i + 1] > 0)]
        if len(cells) == n_want:
            return zs, xv, yv, cells
    raise ChildCountMismatchError(
        f"x isolation failed in a {parent.btype} parent at order {parent.order}: "
        f"wanted {n_want}",
        word=parent.word,
    )


def _theta_grid(parent, lam, L, R, n):
    """Grid L = z_0 < ... < R with parent generator values 2 s cos(theta_i).

    The theta ladder is uniform over (0, pi) plus geometric refinements into
    both corners: children of strongly lopsided parents (extreme letter
    indices) cluster exponentially close to the parent edges, where uniform
    grids of any practical size miss them. Interior points are solved by
    warm-started Newton on the monotone parent generator.
    """
    coeffs_par = parent.coeffs
    want_y = parent.btype == TYPE_I

    def gen_fd(z):
        _xp, xc, yc, _py, _dxp, dxc, dyc, _pdy = _trace_vals_d(z, coeffs_par, lam)
        return (yc, dyc) if want_y else (xc, dxc)

    t_left = gen_fd(L)[0]
    s = 1 if t_left > 0 else -1
    if abs(t_left) < 2 * (1 - 1e-6):
        return None
    thetas = {math.pi * i / n for i in range(1, n)}
    corner = [math.pi * 2.0 ** (-0.5 * j) for j in range(2, 81)]
    thetas.update(corner)
    thetas.update(math.pi - t for t in corner)
    thetas = sorted(thetas)
    # grid points need only coarse placement, relative to the parent width
    rel = max(
        math.exp(parent.length_log - math.log(abs(float(L)) + 1)) * 1e-4, 1e-300
    )
    zs = [L]
    prev_step = (R - L) / n
    for theta in thetas:
        target = 2 * s * math.cos(theta)

        def eval_fd(z, t=target):
            v, dv = gen_fd(z)
            return v - t, dv, None

        lo = zs[-1]
        # t(lo) sits on the s side of every later target, so sign(f(lo)) = s
        seed = lo + prev_step
        if not (lo < seed < R):
            seed = None
        z_i, _, _f = _newton_root(eval_fd, lo, R, s, rel, seed)
        if z_i > zs[-1]:
            prev_step = z_i - zs[-1]
            zs.append(z_i)
    zs.append(R)
    return zs


def _solve_zero(ev, ctx, zl, zr, family, sign_left, seed=None):
    def eval_fd(z):
        t, dt, pdg = ev.one_d(z, family)
        return t, dt, (dt, pdg)

    z0, payload, f_last = _newton_root(eval_fd, zl, zr, sign_left, ctx.rel_tol, seed)
    if not abs(f_last) < 1.0:
        raise PrecisionError(f"zero solve did not converge (|t| = {float(abs(f_last)):.3g})")
    dval, pderiv = payload
    return z0, family, dval, pderiv


def _solve_edge(ev, ctx, family, zs, vals, cell_lo, cell_hi, ref, z0, is_left, parent):
    """One edge of the band around z0.

    The bracket is taken from the isolation grid when a cell straddling the
    edge exists between this zero and its neighbour (walk from the zero until
    |t| >= 2). Otherwise the neighbour zero (|t| >= lambda there by the
    Fricke invariant) or the parent edge (|t| >= 2, equality exactly in the
    shared-edge cases) brackets it.
    """
    target = None
    lo = hi = None
    sign_lo = 0
    seed = None
    if is_left:
        for j in range(cell_hi, cell_lo - 1, -1):
            if abs(vals[j]) >= 2:
                target = 2 if vals[j] > 0 else -2
                inner = zs[j + 1] if j + 1 <= cell_hi else z0
                f_in = vals[j + 1] - target if j + 1 <= cell_hi else -target
                lo, hi = zs[j], inner
                f_out = vals[j] - target
                sign_lo = _sign(f_out)
                if f_out != f_in:
                    seed = lo - f_out * (hi - lo) / (f_in - f_out)
                break
    else:
        for j in range(cell_lo, cell_hi + 1):
            if abs(vals[j]) >= 2:
                target = 2 if vals[j] > 0 else -2
                inner = zs[j - 1] if j - 1 >= cell_lo else z0
                f_in = vals[j - 1] - target if j - 1 >= cell_lo else -target
                lo, hi = inner, zs[j]
                sign_lo = _sign(f_in)
                f_out = vals[j] - target
                if f_out != f_in:
                    seed = lo - f_in * (hi - lo) / (f_out - f_in)
                break
    if target is None:
        # no grid cell brackets the edge: fall back to the neighbour zero or
        # the parent edge as the outside reference
        tv = ev.one(ref, family)
        if abs(tv) < 2 * (1 - 1e-9):
            raise ChildCountMismatchError(
                f"band straddles its bracket at order {parent.order + 1}",
                word=parent.word,
            )
        target = 2 if tv > 0 else -2
        f_ref = tv - target
        if f_ref == 0 or abs(f_ref) < abs(tv) * 1e-30:
            return ref
        lo, hi = (ref, z0) if is_left else (z0, ref)
        sign_lo = _sign(f_ref) if is_left else _sign(0 - target)

    def eval_fd(z, t=target):
        v, dv, _pdg = ev.one_d(z, family)
        return v - t, dv, None

    if sign_lo == 0:
        return lo
    edge, _, f_last = _newton_root(eval_fd, lo, hi, sign_lo, ctx.rel_tol, seed)
    if not abs(f_last) < 1.0:
        raise PrecisionError(f"edge solve did not converge (residual {float(abs(f_last)):.3g})")
    return edge


def children(parent: Band, a_next: int, lam, tol: float = 1e-12, prec: Optional[int] = None):
    """Children of one band, ordered left to right.

    ``tol`` is the absolute edge tolerance of the request; the solver always
    converges to the working precision, which exceeds it (doubles, or gmpy2
    floats once the parent is too thin for doubles).
    """
    if a_next < 1:
        raise SpecificationError("a_next must be >= 1")
    if tol <= 0:
        raise SpecificationError("tol must be positive")
    if prec is None:
        prec = _auto_precision(parent.length_log, float(lam), a_next)
    ctx = _Ctx(prec)
    return ctx.run(lambda: _build_children(parent, a_next, float(lam), ctx))


def _children_chunk(args):
    parents, a_next, lam, prec, base_index = args
    ctx = _Ctx(prec)
    return ctx.run(
        lambda: [
            b
            for off, parent in enumerate(parents)
            for b in _build_children(parent, a_next, lam, ctx, base_index + off)
        ]
    )


def build_hierarchy(
    freq: FrequencySpec,
    lam: float,
    K: int,
    tol: float = 1e-12,
    *,
    validate: bool = True,
    threads: int = 1,
) -> list:
    """Levels 0..K of the band hierarchy.

    Counts are checked against the type recursion at every level; the numeric
    context is planned from the previous level's minimum length and the level
    is rebuilt at higher precision when the headroom check fails. With
    ``threads`` > 1 (0 = CPU count) parents of a level are split across
    processes; results are identical to the serial order.
    """
    if K < 0:
        raise SpecificationError("K must be >= 0")
    if tol <= 0:
        raise SpecificationError("tol must be positive")
    if threads == 0:
        import os

        threads = os.cpu_count() or 1
    lam = float(lam)
    levels = [level0(lam)]
    for k1 in range(1, K + 1):
        a_next = freq.a(k1)
        prev = levels[-1]
        min_len_log = min(b.length_log for b in prev.bands)
        prec = _auto_precision(min_len_log, lam, a_next)
        new_bands = None
        err = None
        for _retry in range(4):
            try:
                new_bands = _level_pass(prev.bands, a_next, lam, prec, threads)
                _check_headroom(new_bands, lam, prec)
                break
            except (PrecisionError, ChildCountMismatchError) as exc:
                err = exc
                prec = int((prec or 64) * 1.5) + 96
                new_bands = None
        if new_bands is None:
            raise PrecisionError(f"level {k1}: precision retries exhausted ({err})")
        level = BandLevel(k1, lam, new_bands)
        if validate:
            _validate_level(prev, level, a_next)
        levels.append(level)
    return levels


def _level_pass(parents, a_next, lam, prec, threads):
    if threads > 1 and len(parents) >= 64:
        import concurrent.futures

        n_chunks = 4 * threads
        bounds = [len(parents) * j // n_chunks for j in range(n_chunks + 1)]
        args = [
            (parents[bounds[j] : bounds[j + 1]], a_next, lam, prec, bounds[j])
            for j in range(n_chunks)
            if bounds[j + 1] > bounds[j]
        ]
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_children_chunk, args))
        return [b for chunk in chunks for b in chunk]
    return _children_chunk((parents, a_next, lam, prec, 0))


def _check_headroom(bands, lam, prec):
    """Shortest band must sit >= 20 bits above the working resolution."""
    bits = 52 if prec is None else prec
    resolution_log = (math.log2(lam + 4) - bits) * math.log(2)
    if min(b.length_log for b in bands) < resolution_log + 20 * math.log(2):
        raise PrecisionError("insufficient headroom at working precision")


def _validate_level(prev: BandLevel, level: BandLevel, a_next: int):
    expected = count_recursion(prev.counts, a_next)
    if level.counts != expected:
        raise ChildCountMismatchError(
            f"level {level.order}: counts {level.counts} != recursion {expected}"
        )
    bands = level.bands
    for i in range(len(bands) - 1):
        if not bands[i].right <= bands[i + 1].left:
            raise ChildCountMismatchError(f"level {level.order}: bands {i},{i + 1} overlap")
    for b in bands:
        p = prev.bands[b.parent_index]
        pad = 1e-9 * max(1.0, abs(float(p.left)))
        if not (p.left - pad <= b.left and b.right <= p.right + pad):
            raise ChildCountMismatchError(
                f"level {level.order}: band escapes its parent", word=b.word
            )


def level_stats(level: BandLevel) -> LevelStats:
    """Longest band, smallest |t_B'(z_B)|, and total measure of one level."""
    if not level.bands:
        raise SpecificationError("empty level")
    length_logs = [b.length_log for b in level.bands]
    deriv_logs = [b.deriv_log for b in level.bands]
    max_len_log = max(length_logs)
    min_deriv_log = min(deriv_logs)
    return LevelStats(
        max_length=math.exp(max_len_log),
        min_deriv=math.exp(min_deriv_log) if min_deriv_log < 700 else math.inf,
        measure=math.fsum(b.length for b in level.bands),
        max_length_log=max_len_log,
        min_deriv_log=min_deriv_log,
    )


# --- independent brute-force oracle -------------------------------------------


def grid_type_counts(freq: FrequencySpec, lam: float, k: int, points: int = 400_000):
    """Count (n_I, n_II, n_III) of order k by dense sign scanning.

    Zeros of x_k and y_k are located on a fine grid over the spectral window
    and classified by |x_{k-1}| at the refined zero: a y_k zero with
    |x_{k-1}| <= 2 lies in a type-I band; an x_k zero is type III when
    |x_{k-1}| <= 2, else type II. Fully independent of the hierarchy
    construction; valid while doubles resolve the level (small k).
    """
    import numpy as np

    if k < 1:
        raise SpecificationError("k must be >= 1")
    coeffs = freq.coefficients(k)
    lam = float(lam)
    zs = np.linspace(-2.5, lam + 2.5, points + 1)
    xp, xc, yc, _py = _trace_vals(zs, coeffs, lam)

    def refine(i, vals_idx):
        a, b = zs[i], zs[i + 1]
        fa = _trace_vals(a, coeffs, lam)[vals_idx]
        for _ in range(60):
            m = 0.5 * (a + b)
            fm = _trace_vals(m, coeffs, lam)[vals_idx]
            if (fm > 0) == (fa > 0):
                a, fa = m, fm
            else:
                b = m
        return 0.5 * (a + b)

    n1 = n2 = n3 = 0
    for vals, family in ((xc, "x"), (yc, "y")):
        crossings = np.nonzero(np.signbit(vals[:-1]) != np.signbit(vals[1:]))[0]
        for i in crossings:
            z0 = refine(int(i), 1 if family == "x" else 2)
            x_prev_abs = abs(_trace_vals(z0, coeffs, lam)[0])
            if family == "y":
                n1 += x_prev_abs <= 2
            elif x_prev_abs <= 2:
                n3 += 1
            else:
                n2 += 1
    return (int(n1), int(n2), int(n3))


# --- exports -------------------------------------------------------------------


def bands_csv(levels: Sequence[BandLevel]) -> str:
    lines = ["order,type,word,left,right,z_B,deriv"]
    for level in levels:
        for b in level.bands:
            deriv = math.exp(b.deriv_log) if b.deriv_log < 700 else math.inf
            lines.append(
                f"{b.order},{b.btype},{b.word_text()},{b.left!s},{b.right!s},"
                f"{b.z_center!s},{deriv:.17g}"
            )
    return "\n".join(lines) + "\n"


def bands_json(levels: Sequence[BandLevel]) -> str:
    payload = [
        {
            "order": level.order,
            "lambda": level.lam,
            "bands": [
                {
                    "order": b.order,
                    "type": b.btype,
                    "word": b.word_text(),
                    "left": str(b.left),
                    "right": str(b.right),
                    "z_B": str(b.z_center),
                    "deriv_log": b.deriv_log,
                    "length_log": b.length_log,
                }
                for b in level.bands
            ],
        }
        for level in levels
    ]
    return json.dumps(payload, indent=1)


# --- beam estimator (evidence runs only) ---------------------------------------


def beam_max_band(
    freq: FrequencySpec,
    lam: float,
    K: int,
    *,
    beam_width: int = 32,
    full_children_cap: int = 16,
    stratified: int = 16,
) -> list:
    """Per-level log of the maximal band length, via a length beam.

    An estimator for frequency samples whose full hierarchy is too large to
    construct: per level only the ``beam_width`` longest bands are kept, and
    parents with more than ``full_children_cap`` children contribute a
    stratified subset of child indices (the central ones carry the csc^2
    maximum, strata cover the rest). Can only underestimate the maximum;
    agreement with full hierarchies is checked in the test suite.
    """
    lam = float(lam)
    current = level0(lam).bands
    maxlogs = [max(b.length_log for b in current)]
    for k1 in range(1, K + 1):
        a_next = freq.a(k1)
        min_len_log = min(b.length_log for b in current)
        prec = _auto_precision(min_len_log, lam, a_next, e12_cap=8)
        kids = None
        for _retry in range(4):
            ctx = _Ctx(prec)
            try:
                kids = ctx.run(
                    lambda: _beam_level(
                        current, a_next, lam, ctx, full_children_cap, stratified, beam_width
                    )
                )
                if not kids:
                    raise PrecisionError("no children constructed")
                _check_headroom(kids, lam, prec)
                break
            except (PrecisionError, ChildCountMismatchError):
                prec = int((prec or 64) * 1.5) + 96
                kids = None
        if not kids:
            raise PrecisionError(f"beam level {k1}: construction failed")
        kids.sort(key=lambda b: -b.length_log)
        current = kids[:beam_width]
        maxlogs.append(current[0].length_log)
    return maxlogs


def _beam_level(parents, a_next, lam, ctx, cap, stratified, beam_width):
    kids = []
    floor_log = -math.inf
    for parent in parents:
        if parent.btype == TYPE_I and a_next >= 2:
            # the single e12 child shrinks by at least ((lam-8)/3)^(a-1) per
            # the length lemma; skip when it provably cannot reach the beam
            bound = parent.length_log - (a_next - 1) * math.log(max((lam - 8) / 3, 2))
            if bound < floor_log:
                continue
        n_children = sum(expected_child_counts(parent.btype, a_next).values())
        if n_children <= cap:
            kids.extend(_build_children(parent, a_next, lam, ctx))
        else:
            kids.extend(_windowed_children(parent, a_next, lam, ctx, stratified))
        if kids:
            best = max(b.length_log for b in kids)
            floor_log = best - 35.0
            if len(kids) >= beam_width:
                wth = sorted((b.length_log for b in kids), reverse=True)[beam_width - 1]
                floor_log = max(floor_log, wth)
    return kids


def _windowed_children(parent, a_next, lam, ctx, stratified):
    """Stratified subset of one parent's children via the angular form.

    On the parent band the generator equals 2 cos(theta) and the child traces
    are [Y sin(p theta) - X sin((p-1) theta)] / sin(theta) with X = x_{k-1},
    Y = y_k slowly varying, so child zeros track the solutions of
    tan(p theta) = -X sin(theta) / (Y - X cos(theta)). Candidate windows are
    mapped to z with a moving-bracket warm-started solve along the parent,
    then each is verified by local isolation before the band is solved.
    """
    want = expected_child_counts(parent.btype, a_next)
    coeffs1 = parent.coeffs + (a_next,)
    k1 = parent.order + 1
    ev = _ChildEvaluator(coeffs1, lam, parent.btype)
    L = ctx.promote(parent.left)
    R = ctx.promote(parent.right)
    coeffs_par = parent.coeffs
    # grid placement accuracy, relative to the parent width
    rel_grid = max(
        ctx.rel_tol,
        math.exp(parent.length_log - math.log(abs(float(L)) + 1)) * 1e-5,
    )

    # I parents never reach the windowed path (single child); the parent
    # generator is x_k and the companions are X = x_{k-1}, Y = y_k
    zc = ctx.promote(parent.z_center)
    xp_c, _xc_c, yc_c, _py_c = _trace_vals(zc, coeffs_par, lam)
    X = float(xp_c)
    Y = float(yc_c)

    def parent_gen_d(z):
        _xp, xc, _yc, _py, _dxp, dxc, _dyc, _pdy = _trace_vals_d(z, coeffs_par, lam)
        return xc, dxc

    def candidate_js(p):
        if p - 1 <= stratified + 8:
            return list(range(0, p + 1))
        center = p // 2
        half = max(2, stratified // 2)
        js = set(range(center - half, center + half + 1))
        for frac in (0.125, 0.25, 0.375, 0.625, 0.75, 0.875):
            js.add(round(frac * p))
        js.update((1, p - 1))
        return sorted(j for j in js if 0 <= j <= p)

    # angular candidates for both families, then their window boundaries
    cands = []
    for family in ("x", "y"):
        if want[family] == 0:
            continue
        p = a_next if family == "x" else a_next + 1
        for j in candidate_js(p):
            theta = math.pi * (j + 0.5) / p
            ok = False
            for _ in range(10):
                g = math.atan2(-X * math.sin(theta), Y - X * math.cos(theta))
                theta_new = (g + j * math.pi) / p
                if not (0 < theta_new < math.pi):
                    break
                if abs(theta_new - theta) < 1e-12:
                    theta = theta_new
                    ok = True
                    break
                theta = theta_new
            if ok and 1e-7 < theta < math.pi - 1e-7:
                dtheta = 0.45 * math.pi / p
                cands.append((theta, dtheta, family))
    if not cands:
        return []

    # theta runs from pi at the t=-2 end to 0 at the t=+2 end; orient so the
    # boundary solve sweeps the parent left to right with a moving bracket
    t_left_sign = -parent.slope
    cands.sort(key=lambda c: c[0], reverse=(t_left_sign < 0))
    bracket_lo = L
    prev_step = (R - L) / max(len(cands) * 2, 4)

    def advance(theta):
        nonlocal bracket_lo, prev_step
        target = 2 * math.cos(theta)

        def eval_fd(z, t=target):
            v, dv = parent_gen_d(z)
            return v - t, dv, None

        f_lo = _sign(float(2 * t_left_sign) - target) or t_left_sign
        seed = bracket_lo + prev_step
        if not (bracket_lo < seed < R):
            seed = None
        z, _, _f = _newton_root(eval_fd, bracket_lo, R, f_lo, rel_grid, seed)
        prev_step = (z - bracket_lo) if z > bracket_lo else prev_step
        bracket_lo = z
        return z

    results = []
    for (theta, dtheta, family) in cands:
        th_first = theta + dtheta if t_left_sign < 0 else theta - dtheta
        th_second = theta - dtheta if t_left_sign < 0 else theta + dtheta
        za = advance(min(max(th_first, 1e-9), math.pi - 1e-9))
        zb = advance(min(max(th_second, 1e-9), math.pi - 1e-9))
        if za > zb:
            za, zb = zb, za
        if not (L <= za < zb <= R):
            continue
        band = _solve_isolated_child(parent, ev, family, za, zb, coeffs1, k1, a_next, ctx)
        if band is not None:
            results.append(band)
    results.sort(key=lambda b: b.left)
    return results


def _solve_isolated_child(parent, ev, family, za, zb, coeffs1, k1, a_next, ctx):
    """One child inside [za, zb], or None if the window holds no single zero."""
    n = 16
    zs = ctx.linspace(za, zb, n + 1)
    vals = [ev.one(z, family) for z in zs]
    brackets = [i for i in range(len(zs) - 1) if (vals[i] > 0) != (vals[i + 1] > 0)]
    if len(brackets) != 1:
        return None
    i = brackets[0]
    fl, fr = vals[i], vals[i + 1]
    seed = zs[i] - fl * (zs[i + 1] - zs[i]) / (fr - fl)
    z0, family, dval, pderiv = _solve_zero(ev, ctx, zs[i], zs[i + 1], family, _sign(fl), seed)
    if not any(abs(vals[j]) >= 2 for j in range(i + 1)):
        return None
    if not any(abs(vals[j]) >= 2 for j in range(i + 1, len(zs))):
        return None
    try:
        left_edge = _solve_edge(ev, ctx, family, zs, vals, 0, i, zs[0], z0, True, parent)
        right_edge = _solve_edge(
            ev, ctx, family, zs, vals, i + 1, len(zs) - 1, zs[-1], z0, False, parent
        )
    except ChildCountMismatchError:
        return None
    if not (left_edge < z0 < right_edge):
        return None
    e, btype = _child_edge_and_type(parent.btype, family)
    letter = (e, tau_edge(e, a_next), 0)  # l index not tracked in subset mode
    return Band(
        k1,
        btype,
        parent.word + (letter,),
        left_edge,
        right_edge,
        z0,
        _log_float(abs(dval)),
        _sign(dval),
        coeffs1,
        None,
        _log_float(abs(pderiv)),
    )
