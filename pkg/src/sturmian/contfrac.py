"""Exact continued-fraction arithmetic.

Frequencies are given by continued-fraction data (a finite prefix plus an
optional tail rule) rather than by floating-point values, so coefficients,
convergents and derived statistics are exact. Convergents use Python big
integers throughout: q_k grows exponentially and overflows 64-bit machine
words near k ~ 90 even in the all-ones case.
"""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import gmpy2

from .errors import CoefficientUndefinedError, RetryLimitError, SpecificationError

__all__ = [
    "FrequencySpec",
    "Convergents",
    "BlockDecomposition",
    "convergents",
    "frequency_value",
    "frequency_interval",
    "geometric_mean_delta",
    "block_decompose",
    "sample_gauss",
]

TAIL_CONST = "const"
TAIL_PERIODIC = "periodic"
TAIL_NONE = "none"


@dataclass(frozen=True)
class FrequencySpec:
    """A frequency alpha = [a_1, a_2, ...] in (0,1).

    ``prefix`` holds a_1..a_L explicitly; ``tail`` states how coefficients
    continue beyond the prefix: a constant value, a repeating period, or not
    at all (queries beyond the prefix then raise).
    """

    prefix: tuple[int, ...]
    tail_kind: str
    tail: tuple[int, ...]

    def __post_init__(self):
        if self.tail_kind not in (TAIL_CONST, TAIL_PERIODIC, TAIL_NONE):
            raise SpecificationError(f"unknown tail kind {self.tail_kind!r}")
        if any(a < 1 for a in self.prefix):
            raise SpecificationError("continued-fraction coefficients must be >= 1")
        if self.tail_kind == TAIL_CONST:
            if len(self.tail) != 1 or self.tail[0] < 1:
                raise SpecificationError("constant tail needs a single coefficient >= 1")
        elif self.tail_kind == TAIL_PERIODIC:
            if not self.tail or any(b < 1 for b in self.tail):
                raise SpecificationError("periodic tail needs a nonempty period of coefficients >= 1")
        elif self.tail:
            raise SpecificationError("explicit-only spec must not carry tail coefficients")

    @classmethod
    def constant(cls, m: int, prefix: Sequence[int] = ()) -> "FrequencySpec":
        return cls(tuple(prefix), TAIL_CONST, (m,))

    @classmethod
    def periodic(cls, period: Sequence[int], prefix: Sequence[int] = ()) -> "FrequencySpec":
        return cls(tuple(prefix), TAIL_PERIODIC, tuple(period))

    @classmethod
    def explicit(cls, prefix: Sequence[int]) -> "FrequencySpec":
        return cls(tuple(prefix), TAIL_NONE, ())

    @classmethod
    def parse(cls, text: str) -> "FrequencySpec":
        """Parse the textual format ``prefix=[...];tail=const:m|periodic:[...]|none``.

        A bare shorthand ``const:m`` / ``periodic:[...]`` (empty prefix) is
        also accepted since it is the common case on the command line.
        """
        text = text.strip()
        if "prefix=" not in text and text.startswith(("const:", "periodic:")):
            text = "prefix=[];tail=" + text
        parts = dict()
        for chunk in text.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" not in chunk:
                raise SpecificationError(f"malformed frequency spec chunk {chunk!r}")
            key, value = chunk.split("=", 1)
            parts[key.strip()] = value.strip()
        if set(parts) != {"prefix", "tail"}:
            raise SpecificationError("frequency spec needs exactly 'prefix' and 'tail' fields")
        prefix = _parse_int_list(parts["prefix"])
        tail = parts["tail"]
        if tail == TAIL_NONE:
            return cls.explicit(prefix)
        if tail.startswith("const:"):
            return cls.constant(_parse_int(tail[6:]), prefix)
        if tail.startswith("periodic:"):
            return cls.periodic(_parse_int_list(tail[9:]), prefix)
        raise SpecificationError(f"malformed tail {tail!r}")

    def format(self) -> str:
        prefix = "[" + ",".join(str(a) for a in self.prefix) + "]"
        if self.tail_kind == TAIL_NONE:
            tail = "none"
        elif self.tail_kind == TAIL_CONST:
            tail = f"const:{self.tail[0]}"
        else:
            tail = "periodic:[" + ",".join(str(b) for b in self.tail) + "]"
        return f"prefix={prefix};tail={tail}"

    def a(self, k: int) -> int:
        """Coefficient a_k (1-indexed); total for all k >= 1 when a tail exists."""
        if k < 1:
            raise SpecificationError("coefficient index must be >= 1")
        if k <= len(self.prefix):
            return self.prefix[k - 1]
        if self.tail_kind == TAIL_CONST:
            return self.tail[0]
        if self.tail_kind == TAIL_PERIODIC:
            return self.tail[(k - len(self.prefix) - 1) % len(self.tail)]
        raise CoefficientUndefinedError(
            f"a_{k} undefined: explicit-only prefix has length {len(self.prefix)}"
        )

    def coefficients(self, k: int) -> tuple[int, ...]:
        """The prefix a_1..a_k."""
        return tuple(self.a(j) for j in range(1, k + 1))


def _parse_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise SpecificationError(f"expected integer, got {text!r}") from exc
    return value


def _parse_int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise SpecificationError(f"expected bracketed list, got {text!r}")
    inner = text[1:-1].strip()
    if not inner:
        return ()
    return tuple(_parse_int(x) for x in inner.split(","))


@dataclass(frozen=True)
class Convergents:
    """Exact convergents p_k/q_k for k = -1..K.

    Seeds are p_{-1}=1, p_0=0, q_{-1}=0, q_0=1 and both sequences follow
    r_{k+1} = a_{k+1} r_k + r_{k-1}.
    """

    p: tuple[int, ...]
    q: tuple[int, ...]

    @property
    def K(self) -> int:
        return len(self.q) - 2

    def pk(self, k: int) -> int:
        return self.p[k + 1]

    def qk(self, k: int) -> int:
        return self.q[k + 1]

    def value(self, k: int) -> Fraction:
        return Fraction(self.pk(k), self.qk(k))

    def determinant(self, k: int) -> int:
        """p_k q_{k-1} - p_{k-1} q_k; equals (-1)^k exactly."""
        return self.pk(k) * self.qk(k - 1) - self.pk(k - 1) * self.qk(k)

    def as_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["k", "p_k", "q_k"])
        for k in range(-1, self.K + 1):
            writer.writerow([k, str(self.pk(k)), str(self.qk(k))])
        return buf.getvalue()


def convergents(freq: FrequencySpec, K: int) -> Convergents:
    """Exact convergents up to index K (>= 0)."""
    if K < 0:
        raise SpecificationError("K must be >= 0")
    p = [1, 0]
    q = [0, 1]
    for k in range(1, K + 1):
        a = freq.a(k)
        p.append(a * p[-1] + p[-2])
        q.append(a * q[-1] + q[-2])
    return Convergents(tuple(p), tuple(q))


def frequency_interval(freq: FrequencySpec, bits: int) -> tuple[Fraction, Fraction]:
    """An exact rational enclosure [lo, hi] of alpha with hi - lo < 2^-bits.

    Consecutive convergents bracket alpha, so the enclosure is rigorous; the
    width 1/(q_k q_{k+1}) shrinks at least geometrically.
    """
    if bits < 1:
        raise SpecificationError("bits must be positive")
    target = Fraction(1, 1 << bits)
    p = [1, 0]
    q = [0, 1]
    k = 0
    while True:
        k += 1
        a = freq.a(k)  # raises CoefficientUndefinedError on exhausted explicit tail
        p.append(a * p[-1] + p[-2])
        q.append(a * q[-1] + q[-2])
        if k >= 2 and Fraction(1, q[-1] * q[-2]) < target:
            lo, hi = Fraction(p[-2], q[-2]), Fraction(p[-1], q[-1])
            return (lo, hi) if lo < hi else (hi, lo)


def frequency_value(freq: FrequencySpec, bits: int) -> gmpy2.mpfr:
    """alpha as a floating value guaranteed within 2^-bits of the true number."""
    if bits < 64:
        raise SpecificationError("bits must be >= 64")
    lo, hi = frequency_interval(freq, bits + 2)
    with gmpy2.context(precision=bits + 16):
        mid = lo + (hi - lo) / 2
        return gmpy2.mpfr(mid.numerator) / gmpy2.mpfr(mid.denominator)


def geometric_mean_delta(freq: FrequencySpec, k: int) -> float:
    """delta_k = (a_1 ... a_k)^(1/k), computed in log space."""
    if k < 1:
        raise SpecificationError("k must be >= 1")
    total = math.fsum(math.log(freq.a(j)) for j in range(1, k + 1))
    return math.exp(total / k)


@dataclass(frozen=True)
class BlockDecomposition:
    """Decomposition a_1..a_k = A_1 1^{m_1} A_2 ... A_s 1^{m_s} A_{s+1}.

    Segments A_i are maximal runs of coefficients >= 2 (the outer two may be
    empty), the m_j are the lengths of the maximal runs of 1's.
    """

    segments: tuple[tuple[int, ...], ...]
    runs: tuple[int, ...]

    @property
    def s(self) -> int:
        return len(self.runs)

    @property
    def exponent_sum(self) -> int:
        """Sum over runs of floor((m_j + 1)/2)."""
        return sum((m + 1) // 2 for m in self.runs)

    def reassemble(self) -> tuple[int, ...]:
        out: list[int] = []
        for i, seg in enumerate(self.segments):
            out.extend(seg)
            if i < len(self.runs):
                out.extend([1] * self.runs[i])
        return tuple(out)


def block_decompose(freq: FrequencySpec, k: int) -> BlockDecomposition:
    """Exact segment/run decomposition of the prefix a_1..a_k."""
    if k < 1:
        raise SpecificationError("k must be >= 1")
    return decompose_coefficients(freq.coefficients(k))


def decompose_coefficients(coeffs: Sequence[int]) -> BlockDecomposition:
    segments: list[tuple[int, ...]] = []
    runs: list[int] = []
    seg: list[int] = []
    run = 0
    for a in coeffs:
        if a == 1:
            if run == 0:
                segments.append(tuple(seg))
                seg = []
            run += 1
        else:
            if run > 0:
                runs.append(run)
                run = 0
            seg.append(a)
    if run > 0:
        runs.append(run)
        segments.append(())
    else:
        segments.append(tuple(seg))
    return BlockDecomposition(tuple(segments), tuple(runs))


# --- Gauss-measure sampling -------------------------------------------------

# Average bit consumption of the Euclidean algorithm is ~2*Levy/ln 2 ~ 3.42
# bits per coefficient, so 64 + ceil(3.5 k) random bits make the first k
# coefficients of N/2^B agree with those of the underlying uniform real except
# with negligible probability; short expansions are rejected and redrawn.
def gauss_bits(k: int) -> int:
    return 64 + math.ceil(3.5 * k)


def _derive_seed(seed: int, index: int) -> int:
    # splitmix64-style mix; keeps per-sample streams independent of schedule
    x = (seed * 0x9E3779B97F4A7C15 + index + 1) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def _euclid_prefix(num: int, den: int, k: int) -> list[int] | None:
    """First k CF coefficients of num/den in (0,1); None if fewer exist."""
    coeffs = []
    p, q = den, num
    while q and len(coeffs) < k:
        a, r = divmod(p, q)
        coeffs.append(a)
        p, q = q, r
    return coeffs if len(coeffs) >= k else None


def sample_gauss(
    rng_seed: int, count: int, k: int, *, max_retries: int = 64
) -> Iterator[tuple[int, ...]]:
    """Yield ``count`` coefficient prefixes a_1..a_k drawn from the Gauss measure.

    Each sample sets alpha = N/2^B for a uniform random integer N in [1, 2^B)
    and runs the exact Euclidean algorithm; samples whose expansion terminates
    before k coefficients are rejected and redrawn. Deterministic under the
    seed and independent of evaluation order (per-sample derived seeds).
    """
    if count < 1 or k < 1:
        raise SpecificationError("count and k must be >= 1")
    B = gauss_bits(k)
    for i in range(count):
        rng = random.Random(_derive_seed(rng_seed, i))
        for _ in range(max_retries):
            N = rng.getrandbits(B)
            if N == 0:
                continue
            coeffs = _euclid_prefix(N, 1 << B, k)
            if coeffs is not None:
                yield tuple(coeffs)
                break
        else:
            raise RetryLimitError(f"sample {i}: no expansion of length {k} in {max_retries} draws")


def sample_statistics(rng_seed: int, index: int, k: int, *, max_retries: int = 64) -> dict:
    """Gauss-measure statistics of sample ``index`` without storing the prefix.

    Fuses the Euclidean expansion with the digit-1 count, the 1-run structure
    and a renormalized float recurrence for log q_k; equals the composition of
    :func:`sample_gauss` with :func:`decompose_coefficients` (tested).
    """
    B = gauss_bits(k)
    rng = random.Random(_derive_seed(rng_seed, index))
    for _ in range(max_retries):
        N = rng.getrandbits(B)
        if N == 0:
            continue
        p, q = 1 << B, N
        n = 0
        ones = 0
        run = 0
        odd_runs = 0
        floor_sum = 0
        qm, qc = 0.0, 1.0
        log_scale = 0.0
        while q and n < k:
            a, r = divmod(p, q)
            p, q = q, r
            n += 1
            if a == 1:
                ones += 1
                run += 1
            elif run:
                odd_runs += run & 1
                floor_sum += (run + 1) // 2
                run = 0
            qm, qc = qc, a * qc + qm
            if qc > 1e250:
                qm *= 1e-250
                qc *= 1e-250
                log_scale += 250.0 * math.log(10.0)
        if n < k:
            continue
        if run:
            odd_runs += run & 1
            floor_sum += (run + 1) // 2
        return {
            "digit1_freq": ones / k,
            "odd_run_density": odd_runs / k,
            "combined_slope": -1.0 + floor_sum / k,
            "log_qk_over_k": (math.log(qc) + log_scale) / k,
        }
    raise RetryLimitError(f"sample {index}: no expansion of length {k} in {max_retries} draws")
