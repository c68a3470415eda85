"""Direct wavepacket dynamics on a finite lattice window.

The propagator is a Chebyshev polynomial expansion of exp(-itH) on the
spectral interval [-(2+lambda), 2+lambda]: coefficients are Bessel values
(2 - delta_n0)(-i)^n J_n((2+lambda) t), and the order is chosen from a
certified factorial tail bound, so the result approximates the
infinite-lattice evolution in l2 norm within the requested tolerance as long
as the polynomial light cone (order <= window) never touches the boundary.
No time stepping, hence no error accumulation across output times.

Potential values are decided by exact rational interval arithmetic on
convergent enclosures of alpha, so membership of n alpha + omega (mod 1) in
[1 - alpha, 1) is certified, never rounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import special

from .contfrac import FrequencySpec, frequency_interval
from .errors import CoverageError, PrecisionError, SpecificationError, WindowTooSmallError

__all__ = [
    "PotentialSpec",
    "WaveState",
    "TransportFit",
    "potential",
    "potential_floor_formula",
    "hamiltonian_apply",
    "required_order",
    "required_window",
    "evolve",
    "free_amplitudes",
    "moments",
    "moment_error_bar",
    "abel_time_grid",
    "time_average",
    "outside_probability",
    "fit_beta",
]


@dataclass(frozen=True)
class PotentialSpec:
    """Potential lambda * chi_[1-alpha, 1)(n alpha + omega mod 1) on [-L, L].

    lambda = 0 is admitted as the free calibration case.
    """

    freq: FrequencySpec
    lam: float
    omega: float = 0.0
    window: int = 1000

    def __post_init__(self):
        if self.lam < 0:
            raise SpecificationError("lambda must be >= 0")
        if not 0 <= self.omega < 1:
            raise SpecificationError("omega must lie in [0, 1)")
        if self.window < 1:
            raise SpecificationError("window must be >= 1")

    @property
    def sites(self) -> np.ndarray:
        return np.arange(-self.window, self.window + 1)


_MAX_POTENTIAL_BITS = 8192


def _chi_values(spec: PotentialSpec, ns: Sequence[int]) -> np.ndarray:
    """chi_[1-alpha,1)(n alpha + omega mod 1) for each n, certified exactly."""
    omega = Fraction(spec.omega)
    n_max = max((abs(int(n)) for n in ns), default=1)
    bits = 64 + 2 * max(8, math.ceil(math.log2(n_max + 2)))
    out = np.zeros(len(ns), dtype=np.int8)
    pending = list(range(len(ns)))
    while pending:
        lo, hi = frequency_interval(spec.freq, bits)
        b_lo, b_hi = 1 - hi, 1 - lo  # enclosure of the boundary 1 - alpha
        still = []
        for idx in pending:
            n = int(ns[idx])
            x_lo, x_hi = n * lo + omega, n * hi + omega
            if n < 0:
                x_lo, x_hi = x_hi, x_lo
            fl_lo, fl_hi = math.floor(x_lo), math.floor(x_hi)
            if fl_lo != fl_hi:
                # exact integer hit is possible only for (n+1) alpha + omega
                # integral, i.e. n = -1 with integral omega (alpha irrational,
                # omega rational): frac(-alpha) = 1 - alpha is in the interval
                if n == -1 and omega == 0:
                    out[idx] = 1
                    continue
                still.append(idx)
                continue
            f_lo, f_hi = x_lo - fl_lo, x_hi - fl_lo
            if f_lo > b_hi:
                out[idx] = 1
            elif f_hi < b_lo:
                out[idx] = 0
            else:
                # boundary tie (n+1) alpha + omega integral: same special case
                if n == -1 and omega == 0:
                    out[idx] = 1
                else:
                    still.append(idx)
        pending = still
        if pending:
            bits *= 2
            if bits > _MAX_POTENTIAL_BITS:
                raise PrecisionError(
                    f"potential membership undecided at {len(pending)} sites "
                    f"after {_MAX_POTENTIAL_BITS} bits"
                )
    return out


def potential(spec: PotentialSpec) -> np.ndarray:
    """Potential values on the window sites -L..L, in site order."""
    return spec.lam * _chi_values(spec, spec.sites).astype(float)


def potential_floor_formula(spec: PotentialSpec) -> np.ndarray:
    """Independent evaluation V(n) = lambda (floor((n+1) alpha) - floor(n alpha)).

    Equivalent to the characteristic-function form at omega = 0; used as an
    exactness oracle.
    """
    if spec.omega != 0:
        raise SpecificationError("floor formula applies at omega = 0 only")
    ns = spec.sites
    bits = 64 + 2 * max(8, math.ceil(math.log2(spec.window + 2)))
    while True:
        lo, hi = frequency_interval(spec.freq, bits)
        vals = np.zeros(len(ns))
        ok = True
        for idx, n in enumerate(ns):
            n = int(n)
            pairs = []
            for m in (n, n + 1):
                a, b = m * lo, m * hi
                if m < 0:
                    a, b = b, a
                fa, fb = math.floor(a), math.floor(b)
                if fa != fb:
                    ok = False
                    break
                pairs.append(fa)
            if not ok:
                break
            vals[idx] = spec.lam * (pairs[1] - pairs[0])
        if ok:
            return vals
        bits *= 2
        if bits > _MAX_POTENTIAL_BITS:
            raise PrecisionError("floor formula undecided at max precision")


@dataclass(frozen=True)
class WaveState:
    """Amplitudes on the window sites -L..L at one time."""

    amplitudes: np.ndarray
    time: float
    window: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def hamiltonian_apply(psi: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(H psi)(n) = psi(n+1) + psi(n-1) + V(n) psi(n) with open ends."""
    out = v * psi
    out[:-1] += psi[1:]
    out[1:] += psi[:-1]
    return out


def required_order(lam: float, t: float, tol: float) -> int:
    """Smallest certified Chebyshev order for exp(-itH) within l2 error tol.

    Tail bound: sum_{n>N} 2 |J_n(tau)| <= 2 (tau/2)^{N+1}/(N+1)! / (1 - q)
    with q = (tau/2)/(N+2) < 1, from |J_n(tau)| <= (tau/2)^n / n!.
    """
    if tol <= 0:
        raise SpecificationError("tol must be positive")
    tau = (2.0 + lam) * t
    if tau == 0:
        return 0
    half = tau / 2.0
    n = max(1, int(half))
    log_half = math.log(half)
    while True:
        n += max(1, n // 16)
        if n + 2 <= half:
            continue
        q = half / (n + 2)
        log_tail = math.log(2.0) + (n + 1) * log_half - math.lgamma(n + 2) - math.log(1 - q)
        if log_tail < math.log(tol) - 1:
            break
    # walk back to the smallest order that still certifies
    while n > 1:
        m = n - 1
        if m + 2 <= half:
            break
        q = half / (m + 2)
        log_tail = math.log(2.0) + (m + 1) * log_half - math.lgamma(m + 2) - math.log(1 - q)
        if log_tail >= math.log(tol) - 1:
            break
        n = m
    return n


def required_window(lam: float, t_max: float, tol: float) -> int:
    """Minimal half-width L so the polynomial light cone stays inside."""
    return required_order(lam, t_max, tol) + 1


def evolve(spec: PotentialSpec, times: Sequence[float], tol: float = 1e-9) -> list:
    """exp(-itH) delta_0 at the given times, each certified within tol in l2.

    One Chebyshev sweep serves all times: vectors T_n(H/r) delta_0 are
    accumulated against per-time Bessel coefficient rows. Raises
    WindowTooSmallError when the certified order for the largest time does
    not fit strictly inside the window.
    """
    times = [float(t) for t in times]
    if any(t < 0 for t in times):
        raise SpecificationError("times must be >= 0")
    if sorted(times) != times:
        raise SpecificationError("times must be sorted ascending")
    L = spec.window
    r = 2.0 + spec.lam
    t_max = times[-1] if times else 0.0
    n_max = required_order(spec.lam, t_max, tol)
    if n_max > L - 1:
        raise WindowTooSmallError(
            f"window {L} too small: certified order {n_max} for t={t_max} "
            f"(need L >= {n_max + 1})"
        )
    v = potential(spec)
    sites = 2 * L + 1
    taus = np.array([r * t for t in times])
    # Bessel coefficient matrix: c[j, n] = (2 - delta_n0) (-i)^n J_n(tau_j)
    orders = np.arange(n_max + 1)
    jn = special.jv(orders[None, :], taus[:, None])
    phases = np.array([1, -1j, -1, 1j])[orders % 4]
    coef = 2.0 * jn * phases[None, :]
    coef[:, 0] *= 0.5

    psi_prev = np.zeros(sites, dtype=complex)
    psi_prev[L] = 1.0  # T_0 delta_0
    acc = coef[:, 0:1] * psi_prev[None, :]
    if n_max >= 1:
        psi_cur = hamiltonian_apply(psi_prev, v) / r  # T_1 = U delta_0
        # accumulate per block of Chebyshev vectors so the contraction runs
        # as one matmul per block instead of an axpy per order
        block = 64
        vecs = np.empty((block, sites), dtype=complex)
        vecs[0] = psi_cur
        start = 1
        filled = 1
        for n in range(2, n_max + 1):
            psi_prev, psi_cur = psi_cur, 2.0 * hamiltonian_apply(psi_cur, v) / r - psi_prev
            vecs[filled] = psi_cur
            filled += 1
            if filled == block:
                acc += coef[:, start : start + filled] @ vecs[:filled]
                start += filled
                filled = 0
        if filled:
            acc += coef[:, start : start + filled] @ vecs[:filled]
    return [WaveState(acc[j].copy(), times[j], L) for j in range(len(times))]


def free_amplitudes(t: float, window: int) -> np.ndarray:
    """Closed-form free evolution (lambda = 0): psi(n, t) = (-i)^n J_n(2t)."""
    ns = np.arange(-window, window + 1)
    return (-1j) ** np.abs(ns) * special.jv(np.abs(ns), 2.0 * t)


def moments(state: WaveState, p: float) -> float:
    """<|X|^p>(t) over the window."""
    if p <= 0:
        raise SpecificationError("p must be positive")
    ns = np.abs(np.arange(-state.window, state.window + 1)).astype(float)
    return float(np.sum(ns**p * np.abs(state.amplitudes) ** 2))


def moment_error_bar(state: WaveState, p: float, tol: float) -> float:
    """Window-truncation budget for the moment: tol * L^p."""
    return tol * float(state.window) ** p


def abel_time_grid(T_min: float, T_max: float, points_per_octave: int = 16) -> np.ndarray:
    """t = 0 plus a geometric grid on [T_min/100, 8 T_max] for Abel averages."""
    if not 0 < T_min <= T_max:
        raise SpecificationError("need 0 < T_min <= T_max")
    lo, hi = T_min / 100.0, 8.0 * T_max
    n = max(2, math.ceil(points_per_octave * math.log2(hi / lo)) + 1)
    grid = np.geomspace(lo, hi, n)
    return np.concatenate(([0.0], grid))


def time_average(samples: tuple, T: float) -> float:
    """Abel average (2/T) int_0^inf exp(-2t/T) f(t) dt by trapezoid quadrature.

    ``samples`` is (t, f) with t sorted ascending; coverage must start at (or
    effectively at) t = 0 and reach at least 8T, where the dropped tail of
    the weight is below e^-16 of the total.
    """
    t, f = np.asarray(samples[0], dtype=float), np.asarray(samples[1], dtype=float)
    if t.ndim != 1 or t.shape != f.shape:
        raise SpecificationError("samples must be matching 1-d arrays")
    if T <= 0:
        raise SpecificationError("T must be positive")
    if t[0] > T / 100.0:
        raise CoverageError(f"samples must start near 0 (first t={t[0]}, T={T})")
    if t[-1] < 8.0 * T * (1 - 1e-12):
        raise CoverageError(f"samples must reach 8T={8 * T} (last t={t[-1]})")
    w = (2.0 / T) * np.exp(-2.0 * t / T)
    return float(np.trapezoid(w * f, t))


def outside_probability(states: Sequence[WaveState], N: int, T: float) -> float:
    """Abel-averaged probability mass at |n| >= N."""
    if not states:
        raise SpecificationError("no states")
    L = states[0].window
    if N > L:
        raise SpecificationError("N must not exceed the window")
    ns = np.abs(np.arange(-L, L + 1))
    mask = ns >= N
    t = np.array([s.time for s in states])
    pn = np.array([float(np.sum(np.abs(s.amplitudes[mask]) ** 2)) for s in states])
    return time_average((t, pn), T)


@dataclass(frozen=True)
class TransportFit:
    """Log-log slope fit of Abel-averaged moments over a geometric T grid."""

    p: float
    T_grid: tuple
    averaged: tuple
    beta_plus_hat: float
    beta_minus_hat: float
    fit_window: int = 4

    def as_dict(self) -> dict:
        return {
            "p": self.p,
            "T_grid": list(self.T_grid),
            "averaged": list(self.averaged),
            "beta_plus_hat": self.beta_plus_hat,
            "beta_minus_hat": self.beta_minus_hat,
            "fit_window": self.fit_window,
        }


def _check_geometric(T_grid: np.ndarray):
    if len(T_grid) < 8:
        raise SpecificationError("T grid needs >= 8 points")
    ratios = T_grid[1:] / T_grid[:-1]
    if np.any(ratios <= 1) or np.ptp(ratios) > 1e-6 * ratios[0]:
        raise SpecificationError("T grid must be geometric and increasing")


def fit_beta(
    spec: PotentialSpec,
    p: float,
    T_grid: Sequence[float],
    tol: float = 1e-9,
    states: Sequence[WaveState] | None = None,
) -> TransportFit:
    """Fitted upper/lower transport exponents at moment order p.

    The moments are evolved on a shared geometric time grid, Abel-averaged at
    each T, and the exponent candidates are the least-squares slopes of
    log <<|X|^p>> vs log T over every window of 4 consecutive grid points,
    divided by p; the max is beta_plus_hat, the min beta_minus_hat.
    Precomputed ``states`` (from :func:`evolve` on a grid covering
    [0, 8 max T]) may be supplied to share one evolution across p values.
    """
    T_grid = np.asarray(sorted(float(T) for T in T_grid))
    _check_geometric(T_grid)
    if states is None:
        tgrid = abel_time_grid(float(T_grid[0]), float(T_grid[-1]))
        states = evolve(spec, list(tgrid), tol)
    t = np.array([s.time for s in states])
    f = np.array([moments(s, p) for s in states])
    averaged = [time_average((t, f), T) for T in T_grid]
    logs = np.log(np.maximum(averaged, 1e-300))
    logT = np.log(T_grid)
    w = 4
    slopes = []
    for i in range(len(T_grid) - w + 1):
        x = logT[i : i + w]
        y = logs[i : i + w]
        slope = np.polyfit(x, y, 1)[0]
        slopes.append(slope / p)
    return TransportFit(
        p,
        tuple(map(float, T_grid)),
        tuple(map(float, averaged)),
        float(max(slopes)),
        float(min(slopes)),
    )
