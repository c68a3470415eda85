"""Trace recursion, Fricke invariant, and the complex-energy escape criterion.

Traces are advanced by the scalar renormalization recursion

    t_{(k, p+1)} = x_k * t_{(k, p)} - t_{(k, p-1)},

never by multiplying transfer matrices: a level costs O(a_{k+1}) scalar
operations while the matrix product would cost O(q_k). Within level k the
sequence starts from t_{(k,0)} = x_{k-1} and t_{(k,1)} = y_k, and ends at
t_{(k, a_{k+1})} = x_{k+1}, t_{(k, a_{k+1}+1)} = y_{k+1}.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .contfrac import FrequencySpec
from .errors import SpecificationError

__all__ = [
    "TraceState",
    "EscapeReport",
    "initial_state",
    "trace_step",
    "trace_orbit",
    "fricke",
    "escape_classify",
    "growth_sequence",
    "DEFAULT_CAP",
]

DEFAULT_CAP = 1e150


@dataclass(frozen=True)
class TraceState:
    """The triple (x_{k-1}, x_k, y_k), optionally with its z-derivative.

    ``diverged`` marks that a magnitude crossed the configured cap during the
    last step; the stored values are the last ones below the cap.
    """

    k: int
    x_prev: complex
    x_cur: complex
    y_cur: complex
    dx_prev: Optional[complex] = None
    dx_cur: Optional[complex] = None
    dy_cur: Optional[complex] = None
    diverged: bool = False
    intermediates: Optional[tuple] = None

    @property
    def has_derivative(self) -> bool:
        return self.dx_cur is not None


def initial_state(lam, z, derivative: bool = False) -> TraceState:
    """Level-0 seed (x_{-1}, x_0, y_0) = (2, z, z - lam), derivative (0, 1, 1)."""
    if derivative:
        return TraceState(0, 2 + 0 * z, z, z - lam, 0 * z, 1 + 0 * z, 1 + 0 * z)
    return TraceState(0, 2 + 0 * z, z, z - lam)


def trace_step(
    state: TraceState,
    a_next: int,
    *,
    cap: float = DEFAULT_CAP,
    keep_intermediates: bool = False,
) -> TraceState:
    """Advance (x_{k-1}, x_k, y_k) -> (x_k, x_{k+1}, y_{k+1}) across one level.

    Iterates the trace recursion p = 1..a_next+1 within level k. If any
    magnitude exceeds ``cap`` the returned state carries ``diverged=True``
    with the last sub-cap values instead of producing non-finite numbers.
    Derivatives, when present in the input, advance by the product-rule
    differentiated recursion.
    """
    if a_next < 1:
        raise SpecificationError("a_next must be >= 1")
    if state.diverged:
        return state
    xc = state.x_cur
    tm, t = state.x_prev, state.y_cur  # (t_{(k,0)}, t_{(k,1)})
    track = state.has_derivative
    dxc = state.dx_cur
    dtm, dt = state.dx_prev, state.dy_cur
    inter = [(tm, t)] if keep_intermediates else None
    # a_next - 1 applications bring (tm, t) to (t_{(k, a-1)}, t_{(k, a)});
    # t_{(k, a)} = x_{k+1} and one further application yields y_{k+1}.
    for _ in range(a_next - 1):
        if track:
            tm, t, dtm, dt = t, xc * t - tm, dt, dxc * t + xc * dt - dtm
        else:
            tm, t = t, xc * t - tm
        if inter is not None:
            inter.append((tm, t))
        if abs(t) > cap:
            return replace(
                state,
                diverged=True,
                intermediates=tuple(inter) if inter is not None else None,
            )
    y_new = xc * t - tm
    dy_new = dxc * t + xc * dt - dtm if track else None
    if inter is not None:
        inter.append((t, y_new))
    if abs(t) > cap or abs(y_new) > cap:
        return replace(
            state,
            diverged=True,
            intermediates=tuple(inter) if inter is not None else None,
        )
    return TraceState(
        state.k + 1,
        xc,
        t,
        y_new,
        dxc if track else None,
        dt if track else None,
        dy_new,
        intermediates=tuple(inter) if inter is not None else None,
    )


def trace_orbit(
    freq: FrequencySpec,
    lam,
    z,
    k_max: int,
    *,
    derivative: bool = False,
    cap: float = DEFAULT_CAP,
    keep_intermediates: bool = False,
) -> list[TraceState]:
    """States for k = 0..k_max (stops early on divergence)."""
    states = [initial_state(lam, z, derivative)]
    for k in range(1, k_max + 1):
        nxt = trace_step(
            states[-1], freq.a(k), cap=cap, keep_intermediates=keep_intermediates
        )
        states.append(nxt)
        if nxt.diverged:
            break
    return states


def fricke(x, y, w):
    """Fricke invariant x^2 + y^2 + w^2 - x*y*w - 4.

    Equals lambda^2 along every trace-recursion triple
    (t_{(k+1,0)}, t_{(k,p)}, t_{(k,p-1)}).
    """
    return x * x + y * y + w * w - x * y * w - 4


@dataclass(frozen=True)
class EscapeReport:
    """Outcome of the escape scan.

    When escaped: k0 is the first index with |x_{k0-1}| <= 2+delta < |x_{k0}|
    and |x_{k0+1}| > 2+delta, and ``growth`` is the exact integer sequence
    G_0=1, G_1=a_{k0+1}, G_{j+1} = a_{k0+j+1} G_j + G_{j-1}.
    When bounded: ``running_max`` is the empirical sup of |x_k| up to k_max
    (the uniform bound exists but has no closed form).
    """

    escaped: bool
    delta: float
    k_max: int
    k0: Optional[int] = None
    growth: tuple[int, ...] = ()
    running_max: float = 0.0

    @property
    def verdict(self) -> str:
        return f"escaped({self.k0})" if self.escaped else f"bounded_up_to({self.k_max})"


def growth_sequence(freq: FrequencySpec, k0: int, J: int) -> list[int]:
    """Exact G^{(k0)}_0..G^{(k0)}_J; strictly increasing from index 1."""
    if J < 0:
        raise SpecificationError("J must be >= 0")
    seq = [1]
    if J >= 1:
        seq.append(freq.a(k0 + 1))
    for j in range(1, J):
        seq.append(freq.a(k0 + j + 1) * seq[-1] + seq[-2])
    return seq


def escape_classify(
    freq: FrequencySpec,
    lam,
    z,
    delta: float = 0.0,
    k_max: int = 40,
    *,
    cap: float = DEFAULT_CAP,
) -> EscapeReport:
    """Scan k = 0..k_max for the first escape index.

    Detection fires before any magnitude cap can be hit: both tested traces
    sit just above 2+delta at the reported index, far below the cap.
    """
    if k_max < 1:
        raise SpecificationError("k_max must be >= 1")
    if delta < 0:
        raise SpecificationError("delta must be >= 0")
    if cap <= 2.0 + delta:
        raise SpecificationError("cap must exceed 2 + delta")
    thresh = 2.0 + delta
    state = initial_state(lam, z)
    xs = [abs(state.x_prev), abs(state.x_cur)]  # xs[j] = |x_{j-1}|
    for k in range(1, k_max + 2):
        state = trace_step(state, freq.a(k), cap=cap)
        if state.diverged:
            # Unreachable by construction: two consecutive traces must exceed
            # 2+delta, and hence fire the criterion, long before the cap.
            raise AssertionError("trace diverged before the escape criterion fired")
        xs.append(abs(state.x_cur))
        k0 = len(xs) - 3
        if xs[k0] <= thresh and xs[k0 + 1] > thresh and xs[k0 + 2] > thresh:
            growth = growth_sequence(freq, k0, max(0, k_max - k0))
            return EscapeReport(True, delta, k_max, k0, tuple(growth))
    return EscapeReport(False, delta, k_max, running_max=max(xs))
