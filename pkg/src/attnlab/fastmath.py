"""Software 2^x via exponent-field splicing plus a minimax polynomial.

Everything here works on float32 numpy arrays (scalars are promoted).
The polynomial path mirrors what an FMA pipeline would do: clamp, floor
via the 1.5 * 2^23 magic constant, Horner on the fractional part, then
add the integer part straight into the exponent bits.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

MAGIC_FLOOR = np.float32(2.0**23 + 2.0**22)
CLAMP_MIN = np.float32(-127.0)
BF16_EPS = 2.0**-8  # half-ulp relative bound of an 8-bit significand
# float32 Horner evaluation plus the final rounding, on top of the exact-polynomial bound
FP32_EVAL_SLACK = 4 * 2.0**-24

_FIT_GRID = 1 << 18
_CERT_GRID = 1 << 20
_MAX_ITERS = 100


class FitError(RuntimeError):
    """Raised when the minimax iteration fails to level the error."""


@dataclass(frozen=True)
class Poly2x:
    """Polynomial approximation of 2^x on [0, 1) with the constant term pinned to 1."""

    degree: int
    coeffs: tuple[float, ...]
    certified_max_rel_err: float = math.inf

    def __post_init__(self):
        if self.degree not in (3, 4, 5):
            raise ValueError(f"degree must be 3, 4 or 5, got {self.degree}")
        if len(self.coeffs) != self.degree + 1:
            raise ValueError("need degree + 1 coefficients")
        if self.coeffs[0] != 1.0:
            raise ValueError("p_0 must be exactly 1.0")
        if any(float(np.float32(c)) != c for c in self.coeffs):
            raise ValueError("coefficients must be representable in float32")

    def to_json(self) -> str:
        return json.dumps(
            {
                "degree": self.degree,
                "coeffs": list(self.coeffs),
                "certified_max_rel_err": self.certified_max_rel_err,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Poly2x":
        doc = json.loads(text)
        return cls(
            degree=int(doc["degree"]),
            coeffs=tuple(float(c) for c in doc["coeffs"]),
            certified_max_rel_err=float(doc["certified_max_rel_err"]),
        )

    def kernel_error_bound(self) -> float:
        """Bound for the float32 kernel: certified polynomial error plus evaluation rounding."""
        return self.certified_max_rel_err + FP32_EVAL_SLACK

    def rel_error(self, x: np.ndarray) -> np.ndarray:
        """Relative error of the exact-arithmetic polynomial against 2^x (float64)."""
        x = np.asarray(x, dtype=np.float64)
        return np.polyval(np.asarray(self.coeffs[::-1]), x) / np.exp2(x) - 1.0


# -- minimax fit ------------------------------------------------------------


def _solve_reference(ref: np.ndarray, degree: int) -> tuple[np.ndarray, float]:
    # unknowns: q_1..q_degree, E ; p(x) = 1 + sum q_k x^k
    # (p(x_i) - 2^x_i) / 2^x_i = (-1)^i E
    A = np.empty((degree + 1, degree + 1))
    for k in range(1, degree + 1):
        A[:, k - 1] = ref**k
    A[:, degree] = -((-1.0) ** np.arange(degree + 1)) * np.exp2(ref)
    b = np.exp2(ref) - 1.0
    sol = np.linalg.solve(A, b)
    return np.concatenate([[1.0], sol[:degree]]), float(sol[degree])


def _alternating_extrema(err: np.ndarray) -> np.ndarray:
    sign = np.sign(err)
    cuts = np.flatnonzero(sign[1:] != sign[:-1]) + 1
    bounds = np.concatenate([[0], cuts, [len(err)]])
    return np.array([lo + int(np.argmax(np.abs(err[lo:hi]))) for lo, hi in zip(bounds[:-1], bounds[1:])])


def _remez(degree: int, grid: np.ndarray) -> np.ndarray | None:
    k = np.arange(degree + 1)
    ref = np.sort(0.5 - 0.5 * np.cos(np.pi * (k + 0.5) / (degree + 1)))
    ref[-1] = grid[-1]
    for _ in range(_MAX_ITERS):
        p, _ = _solve_reference(ref, degree)
        err = np.polyval(p[::-1], grid) / np.exp2(grid) - 1.0
        ext = _alternating_extrema(err)
        if len(ext) != degree + 1:
            return None
        new_ref = grid[ext]
        if np.array_equal(new_ref, ref):
            return p
        ref = new_ref
    return None


def _lawson(degree: int, grid: np.ndarray) -> np.ndarray:
    # Lawson's iteratively reweighted least squares on the relative error
    target = (np.exp2(grid) - 1.0) / np.exp2(grid)
    basis = np.stack([grid**k / np.exp2(grid) for k in range(1, degree + 1)], axis=1)
    w = np.full(len(grid), 1.0 / len(grid))
    p = None
    for _ in range(20 * _MAX_ITERS):
        sw = np.sqrt(w)
        q, *_ = np.linalg.lstsq(basis * sw[:, None], target * sw, rcond=None)
        p = np.concatenate([[1.0], q])
        r = np.abs(basis @ q - target)
        w = w * r
        total = w.sum()
        if total == 0.0:
            break
        w /= total
    return p


def _is_levelled(p: np.ndarray, grid: np.ndarray, degree: int, tol: float = 1e-3) -> bool:
    err = np.polyval(p[::-1], grid) / np.exp2(grid) - 1.0
    ext = _alternating_extrema(err)
    if len(ext) < degree + 1:
        return False
    peaks = np.abs(err[ext])
    return peaks.max() <= (1.0 + tol) * peaks.min()


def _certify(coeffs: tuple[float, ...]) -> float:
    grid = np.arange(_CERT_GRID, dtype=np.float64) / _CERT_GRID
    grid = np.append(grid, np.nextafter(1.0, 0.0))
    err = np.polyval(np.asarray(coeffs[::-1]), grid) / np.exp2(grid) - 1.0
    # 1% head-room covers the inter-sample excursion at this grid density
    return float(np.max(np.abs(err)) * 1.01)


@lru_cache(maxsize=None)
def fit_minimax(degree: int) -> Poly2x:
    """Minimax fit of 2^x on [0, 1) in relative error, p_0 pinned to 1.0.

    Remez exchange first; Lawson IRLS if the exchange stalls. Coefficients
    are rounded to float32 and the bound is measured after rounding.
    """
    if degree not in (3, 4, 5):
        raise ValueError(f"degree must be 3, 4 or 5, got {degree}")
    grid = np.arange(1, _FIT_GRID + 1, dtype=np.float64) / _FIT_GRID
    p = _remez(degree, grid)
    if p is None:
        p = _lawson(degree, grid)
        if not _is_levelled(p, grid, degree, tol=0.05):
            raise FitError(f"minimax fit for degree {degree} did not converge")
    coeffs = tuple(float(np.float32(c)) for c in p)
    coeffs = (1.0,) + coeffs[1:]
    return Poly2x(degree, coeffs, _certify(coeffs))


# -- float32 kernels --------------------------------------------------------


def _fma32(a: np.ndarray, b: np.ndarray, c: np.ndarray | np.float32) -> np.ndarray:
    # product of two float32 values is exact in float64; one final rounding
    return (a.astype(np.float64) * b.astype(np.float64) + np.float64(c)).astype(np.float32)


def floor_magic(x) -> np.ndarray:
    """floor(x) for float32 |x| < 2^22 using the add/subtract magic constant.

    The hardware sequence subtracts with round-down; here the subtraction
    rounds to nearest and the result is pulled down by one when it lands
    above x.
    """
    x = np.asarray(x, dtype=np.float32)
    shifted = x + MAGIC_FLOOR
    j = shifted - MAGIC_FLOOR
    return np.where(j > x, j - np.float32(1.0), j).astype(np.float32)


def horner32(frac: np.ndarray, poly: Poly2x) -> np.ndarray:
    coeffs = [np.float32(c) for c in poly.coeffs]
    acc = np.full(frac.shape, coeffs[-1], dtype=np.float32)
    for c in reversed(coeffs[:-1]):
        acc = _fma32(acc, frac, c)
    return acc


def exp2_emulated(x, poly: Poly2x):
    """2^x on the FMA path. Valid for finite x < 128; x < -127 is clamped."""
    scalar = np.ndim(x) == 0
    x = np.maximum(np.asarray(x, dtype=np.float32), CLAMP_MIN)
    j = floor_magic(x)
    frac = x - j
    mant = horner32(frac, poly)
    bits = mant.view(np.int32) + (j.astype(np.int32) << 23)
    out = bits.view(np.float32)
    return np.float32(out) if scalar else out


def exp2_reference(x):
    """Correctly rounded float32 2^x (double-precision exp2, rounded once)."""
    scalar = np.ndim(x) == 0
    out = np.exp2(np.asarray(x, dtype=np.float32).astype(np.float64)).astype(np.float32)
    return np.float32(out) if scalar else out


# -- bf16 -------------------------------------------------------------------


@dataclass(frozen=True)
class Bf16Value:
    bits: int

    def to_float32(self) -> np.float32:
        return bf16_bits_to_float32(np.uint16(self.bits))


def round_to_bf16_bits(x) -> np.ndarray:
    """Round float32 to bf16 (round-to-nearest-even), returning uint16 patterns."""
    u = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    bias = ((u >> 16) & 1) + 0x7FFF
    return ((u + bias) >> 16).astype(np.uint16)


def bf16_bits_to_float32(bits) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def round_to_bf16(x) -> Bf16Value | np.ndarray:
    """Scalar input gives a Bf16Value; arrays give uint16 bit patterns."""
    bits = round_to_bf16_bits(x)
    if np.ndim(x) == 0:
        return Bf16Value(int(bits))
    return bits


def bf16_round_trip(x) -> np.ndarray:
    """float32 -> bf16 -> float32, the quantizer used on kernel data paths."""
    return bf16_bits_to_float32(round_to_bf16_bits(x))


def float64_to_bf16(x) -> np.ndarray:
    """Single rounding from float64 straight to an 8-bit significand (RNE)."""
    x = np.asarray(x, dtype=np.float64)
    m, e = np.frexp(x)
    return np.ldexp(np.rint(m * 256.0) / 256.0, e)


# -- accuracy harness -------------------------------------------------------


class Method(enum.Enum):
    IDEAL_ROUND = "Ideal (FP64->BF16)"
    HARDWARE_LIKE = "Hardware-like EX2"
    POLY_DEGREE_3 = "Degree 3"
    POLY_DEGREE_4 = "Degree 4"
    POLY_DEGREE_5 = "Degree 5"

    @property
    def degree(self) -> int | None:
        return {Method.POLY_DEGREE_3: 3, Method.POLY_DEGREE_4: 4, Method.POLY_DEGREE_5: 5}.get(self)

    @classmethod
    def for_degree(cls, degree: int) -> "Method":
        return {3: cls.POLY_DEGREE_3, 4: cls.POLY_DEGREE_4, 5: cls.POLY_DEGREE_5}[degree]


@dataclass(frozen=True)
class AccuracyReport:
    method: Method
    fp32_max_rel: float
    fp32_mean_rel: float
    bf16_max_rel: float
    bf16_mean_rel: float
    n_samples: int
    ulp_match_fraction: float

    def check(self) -> list[str]:
        """Return violated invariants (empty when consistent)."""
        problems = []
        if not math.isnan(self.fp32_max_rel) and not self.fp32_max_rel >= self.fp32_mean_rel >= 0:
            problems.append(f"{self.method.value}: fp32 max < mean or negative")
        if not self.bf16_max_rel >= self.bf16_mean_rel >= 0:
            problems.append(f"{self.method.value}: bf16 max < mean or negative")
        if not 0.0 <= self.ulp_match_fraction <= 1.0:
            problems.append(f"{self.method.value}: ulp fraction out of range")
        return problems


def sample_unit_interval(n_samples: int, seed: int) -> np.ndarray:
    """Uniform float32 draws in [0, 1) from numpy's PCG64 generator."""
    return np.random.default_rng(seed).random(n_samples, dtype=np.float32)


def evaluate(method: Method, x: np.ndarray) -> np.ndarray | None:
    if method is Method.IDEAL_ROUND:
        return None
    if method is Method.HARDWARE_LIKE:
        return exp2_reference(x)
    return exp2_emulated(x, fit_minimax(method.degree))


def accuracy_sweep(method: Method, n_samples: int, seed: int = 0) -> AccuracyReport:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = sample_unit_interval(n_samples, seed)
    exact = np.exp2(x.astype(np.float64))
    ref_bf16 = round_to_bf16_bits(exp2_reference(x)).astype(np.int32)

    y = evaluate(method, x)
    if y is None:
        fp32_max = fp32_mean = math.nan
        q = float64_to_bf16(exact)
        bits = round_to_bf16_bits(q.astype(np.float32)).astype(np.int32)
    else:
        rel = np.abs(y.astype(np.float64) - exact) / exact
        fp32_max, fp32_mean = float(rel.max()), float(rel.mean())
        bits = round_to_bf16_bits(y).astype(np.int32)
        q = bf16_bits_to_float32(bits.astype(np.uint16)).astype(np.float64)
    rel_bf16 = np.abs(q - exact) / exact
    ulp_ok = np.abs(bits - ref_bf16) <= 1
    return AccuracyReport(
        method=method,
        fp32_max_rel=fp32_max,
        fp32_mean_rel=fp32_mean,
        bf16_max_rel=float(rel_bf16.max()),
        bf16_mean_rel=float(rel_bf16.mean()),
        n_samples=n_samples,
        ulp_match_fraction=float(ulp_ok.mean()),
    )


CSV_COLUMNS = [
    "method",
    "fp32_max_rel",
    "fp32_mean_rel",
    "bf16_max_rel",
    "bf16_mean_rel",
    "n_samples",
    "ulp_match_fraction",
]


def _fmt(v: float) -> str:
    return "---" if math.isnan(v) else repr(v)


def _parse(v: str) -> float:
    return math.nan if v == "---" else float(v)


def reports_to_csv(reports: Iterable[AccuracyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(
            [
                r.method.value,
                _fmt(r.fp32_max_rel),
                _fmt(r.fp32_mean_rel),
                _fmt(r.bf16_max_rel),
                _fmt(r.bf16_mean_rel),
                r.n_samples,
                repr(r.ulp_match_fraction),
            ]
        )
    return buf.getvalue()


def reports_from_csv(text: str) -> list[AccuracyReport]:
    by_label = {m.value: m for m in Method}
    rows = csv.DictReader(io.StringIO(text))
    return [
        AccuracyReport(
            method=by_label[row["method"]],
            fp32_max_rel=_parse(row["fp32_max_rel"]),
            fp32_mean_rel=_parse(row["fp32_mean_rel"]),
            bf16_max_rel=_parse(row["bf16_max_rel"]),
            bf16_mean_rel=_parse(row["bf16_mean_rel"]),
            n_samples=int(row["n_samples"]),
            ulp_match_fraction=float(row["ulp_match_fraction"]),
        )
        for row in rows
    ]
