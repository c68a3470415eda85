"""Transport-exponent estimators and closed-form constants.

The headline estimator converts the maximal band length of a hierarchy level
into the upper transport exponent via log q_k / (-log |B_max,k|); the
derivative estimator log q_k / log min|t_B'(z_B)| is reported alongside (the
two agree up to O(1/k) through the derivative-length product bound). All
exponent arithmetic runs in log space: q_k overflows doubles quickly, so its
logarithm is taken from the exact integer via bit length plus mantissa.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .bands import BandLevel, level_stats
from .contfrac import (
    Convergents,
    FrequencySpec,
    block_decompose,
    geometric_mean_delta,
    sample_statistics,
)
from .errors import SpecificationError

__all__ = [
    "ExponentReport",
    "MaxBandBounds",
    "AsymptoteEstimate",
    "McRecord",
    "exponent_estimate",
    "maxband_bounds",
    "verify_maxband",
    "koebe_radii_bounds",
    "constant_type_asymptote",
    "ae_constants",
    "gauss_monte_carlo",
    "log_int",
]


def log_int(n: int) -> float:
    """Natural log of a positive big integer, exact bit-length + mantissa."""
    if n <= 0:
        raise SpecificationError("log_int needs a positive integer")
    bits = n.bit_length()
    if bits <= 53:
        return math.log(n)
    shift = bits - 53
    return math.log(n >> shift) + shift * math.log(2)


@dataclass(frozen=True)
class ExponentReport:
    """Finite-k transport exponent estimators at one hierarchy level."""

    k: int
    lam: float
    log_qk_over_k: float
    log_min_deriv_over_k: float
    log_maxband_over_k: float
    alpha_hat_deriv: float
    alpha_hat_band: float
    flags: tuple = ()

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "lambda": self.lam,
            "log_qk_over_k": self.log_qk_over_k,
            "log_min_deriv_over_k": self.log_min_deriv_over_k,
            "log_maxband_over_k": self.log_maxband_over_k,
            "alpha_hat_deriv": self.alpha_hat_deriv,
            "alpha_hat_band": self.alpha_hat_band,
            "flags": list(self.flags),
        }


def exponent_estimate(levels: Sequence[BandLevel], conv: Convergents, k: int) -> ExponentReport:
    """Both exponent estimators at level k of a constructed hierarchy."""
    if k >= len(levels) or levels[k].order != k:
        raise SpecificationError(f"level {k} not present in the hierarchy")
    if conv.K < k:
        raise SpecificationError(f"convergents only reach K={conv.K} < {k}")
    level = levels[k]
    stats = level_stats(level)
    lam = level.lam
    flags = []
    if lam < 20:
        flags.append("lambda_below_20")
    lq = log_int(conv.qk(k))
    if k == 0 or lq == 0.0:
        flags.append("degenerate_level")
        return ExponentReport(k, lam, 0.0, stats.min_deriv_log, stats.max_length_log, 0.0, 0.0, tuple(flags))
    alpha_deriv = lq / stats.min_deriv_log if stats.min_deriv_log > 0 else math.inf
    alpha_band = lq / (-stats.max_length_log) if stats.max_length_log < 0 else math.inf
    return ExponentReport(
        k,
        lam,
        lq / k,
        stats.min_deriv_log / k,
        stats.max_length_log / k,
        alpha_deriv,
        alpha_band,
        tuple(flags),
    )


@dataclass(frozen=True)
class MaxBandBounds:
    """Log-scale bounds on the maximal band length at level k.

    lower = -k log 8 - k log delta_k + (-k + S) log lambda and
    upper =  k log 48 - k log delta_k + (-k + S) log lambda,
    with S the block-decomposition exponent sum of a_1..a_k.
    """

    k: int
    lam: float
    delta_k: float
    exponent_sum: int
    lower: float
    upper: float


def maxband_bounds(freq: FrequencySpec, lam: float, k: int) -> MaxBandBounds:
    """Certified bracket for log |B_max,k| (requires lambda >= 20)."""
    if lam < 20:
        raise SpecificationError("maximal-band bounds require lambda >= 20")
    if k < 1:
        raise SpecificationError("k must be >= 1")
    delta_k = geometric_mean_delta(freq, k)
    s = block_decompose(freq, k).exponent_sum
    log_lam = math.log(lam)
    common = -k * math.log(delta_k) + (-k + s) * log_lam
    return MaxBandBounds(
        k=k,
        lam=float(lam),
        delta_k=delta_k,
        exponent_sum=s,
        lower=-k * math.log(8.0) + common,
        upper=k * math.log(48.0) + common,
    )


def verify_maxband(levels: Sequence[BandLevel], bounds: MaxBandBounds) -> tuple:
    """(holds, margin_low, margin_high) for the computed level against bounds."""
    if bounds.k >= len(levels) or levels[bounds.k].order != bounds.k:
        raise SpecificationError(f"level {bounds.k} not present in the hierarchy")
    if levels[bounds.k].lam != bounds.lam:
        raise SpecificationError("bounds were computed for a different lambda")
    observed = level_stats(levels[bounds.k]).max_length_log
    return (
        bounds.lower <= observed <= bounds.upper,
        observed - bounds.lower,
        bounds.upper - observed,
    )


def koebe_radii_bounds(min_deriv: float, delta: float) -> tuple:
    """(1/R_k lower bound, 1/r_k upper bound) from distortion estimates.

    Both scale linearly in min|t_B'(z_B)|; the lower bound degenerates at
    delta = 0, which is therefore rejected.
    """
    if delta <= 0:
        raise SpecificationError("delta must be positive (bounds degenerate at 0)")
    if min_deriv <= 0:
        raise SpecificationError("min_deriv must be positive")
    denom = (2 + delta) * (2 + 2 * delta) ** 2
    inv_R_lower = delta**2 / denom * min_deriv
    inv_r_upper = (4 + 3 * delta) ** 2 / denom * min_deriv
    return (inv_R_lower, inv_r_upper)


@dataclass(frozen=True)
class AsymptoteEstimate:
    """Predicted large-coupling limit of alpha_u * log(lambda).

    ``conjectural`` marks periodic tails beyond the proven list: the q_k part
    is exact (Perron eigenvalue of the period's convergent matrices) and the
    run-structure part is exact, but the combination is only established for
    constant type and the published periodic examples.
    """

    value: float
    conjectural: bool = False


_KNOWN_PERIODS = {(1,), (2,), (1, 2), (2, 1), (1, 1, 2, 2), (1, 2, 2, 1), (2, 2, 1, 1), (2, 1, 1, 2)}


def constant_type_asymptote(freq: FrequencySpec) -> AsymptoteEstimate:
    """Large-coupling asymptote for constant or periodic tails.

    Constant m=1 gives 2 log((1+sqrt 5)/2); constant m >= 2 gives
    log((m+sqrt(m^2+4))/2). Periodic tails combine the exact per-level q_k
    growth rate with the exact density of half-counted 1-runs:
    value = lim (log q_k)/k divided by (1 - lim S_k/k).
    """
    if freq.tail_kind == "none":
        raise SpecificationError("asymptote needs a constant or periodic tail")
    if freq.tail_kind == "const":
        m = freq.tail[0]
        base = math.log((m + math.sqrt(m * m + 4)) / 2)
        return AsymptoteEstimate(2 * base if m == 1 else base, False)
    period = freq.tail
    if len(set(period)) == 1:
        return constant_type_asymptote(FrequencySpec.constant(period[0]))
    q_rate = _periodic_q_rate(period)
    ones_rate = _periodic_exponent_rate(period)
    value = q_rate / (1.0 - ones_rate)
    return AsymptoteEstimate(value, tuple(period) not in _KNOWN_PERIODS)


def _periodic_q_rate(period: tuple) -> float:
    """lim (1/k) log q_k for a periodic tail: log Perron root / period length."""
    a11, a12, a21, a22 = 1, 0, 0, 1
    for b in period:
        # multiply by [[b, 1], [1, 0]] on the right
        a11, a12 = a11 * b + a12, a11
        a21, a22 = a21 * b + a22, a21
    tr = a11 + a22
    det = a11 * a22 - a12 * a21  # +-1
    rho = (tr + math.sqrt(tr * tr - 4 * det)) / 2
    return math.log(rho) / len(period)


def _periodic_exponent_rate(period: tuple) -> float:
    """lim S_k / k with S_k the block-decomposition exponent sum.

    Computed from the cyclic run structure of the infinite periodic word;
    runs of 1's may wrap across the period boundary.
    """
    r = len(period)
    if all(b == 1 for b in period):
        return 0.5
    # rotate so the word starts right after a non-1 coefficient
    start = next(i for i, b in enumerate(period) if b != 1)
    rotated = period[start + 1 :] + period[: start + 1]
    total = 0
    run = 0
    for b in rotated:
        if b == 1:
            run += 1
        else:
            total += (run + 1) // 2
            run = 0
    total += (run + 1) // 2
    return total / r


def ae_constants() -> dict:
    """Closed-form constants of the almost-everywhere frequency analysis."""
    log2 = math.log(2.0)
    phi = (1 + math.sqrt(5.0)) / 2
    return {
        "levy": math.pi**2 / (12 * log2),
        "bound_thm1": math.pi**2 / (12 * math.log(phi)),
        "ae_band_slope": -math.log(phi) / log2,
        "digit1_freq": math.log(4.0 / 3.0) / log2,
        "odd_run_density": -math.log((3 + math.sqrt(5.0)) / 6.0) / log2,
    }


@dataclass(frozen=True)
class McRecord:
    """Monte Carlo means and standard errors over Gauss-measure samples."""

    samples: int
    k: int
    seed: int
    means: dict
    stderrs: dict

    def as_dict(self) -> dict:
        return {
            "samples": self.samples,
            "k": self.k,
            "seed": self.seed,
            "means": dict(self.means),
            "stderrs": dict(self.stderrs),
        }


_MC_FIELDS = ("digit1_freq", "odd_run_density", "combined_slope", "log_qk_over_k")


def _mc_chunk(args) -> dict:
    seed, start, stop, k = args
    sums = {f: 0.0 for f in _MC_FIELDS}
    sq = {f: 0.0 for f in _MC_FIELDS}
    for i in range(start, stop):
        stats = sample_statistics(seed, i, k)
        for f in _MC_FIELDS:
            v = stats[f]
            sums[f] += v
            sq[f] += v * v
    return {"sums": sums, "sq": sq}


def gauss_monte_carlo(seed: int, samples: int, k: int, threads: int = 1) -> McRecord:
    """Empirical Gauss-measure statistics: means and standard errors.

    Per sample: digit-1 frequency, odd-run density (1/k)#{odd m_j}, combined
    slope -1 + S_k/k, and (1/k) log q_k. Parallel runs split the sample range
    across processes; per-sample derived seeds keep the result identical to
    the serial order. ``threads=0`` uses the CPU count.
    """
    if samples < 1:
        raise SpecificationError("samples must be >= 1")
    if k < 100:
        raise SpecificationError("k must be >= 100 for meaningful statistics")
    if threads == 0:
        import os

        threads = os.cpu_count() or 1
    chunks = []
    if threads > 1 and samples >= 4 * threads:
        import concurrent.futures

        bounds = [samples * j // threads for j in range(threads + 1)]
        args = [(seed, bounds[j], bounds[j + 1], k) for j in range(threads)]
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_mc_chunk, args))
    else:
        chunks = [_mc_chunk((seed, 0, samples, k))]
    means = {}
    stderrs = {}
    for f in _MC_FIELDS:
        total = math.fsum(c["sums"][f] for c in chunks)
        total_sq = math.fsum(c["sq"][f] for c in chunks)
        mean = total / samples
        var = max(total_sq / samples - mean * mean, 0.0)
        means[f] = mean
        stderrs[f] = math.sqrt(var / samples)
    return McRecord(samples, k, seed, means, stderrs)
