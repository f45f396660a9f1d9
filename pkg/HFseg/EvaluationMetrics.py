#!/usr/bin/env python3
"""
Segmentation evaluation statistics

Dice, Pearson correlation and a least-squares fit, MSR/CNR image quality,
paired t-test, Bland-Altman limits of agreement and two-way random-effects
intraclass correlation. Sample (n - 1) variances are used throughout.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from scipy import special, stats

from ImageCore import BScan, Mask, mean_filter, median_filter
from Morphology import closing_reconstruction
from segmentation_errors import (
    DegenerateRegionError,
    DegenerateStatisticError,
    DimensionError,
    ParameterError,
    SampleSizeError,
    UndefinedCorrelationError,
)

logger = logging.getLogger(__name__)

AGREEMENT = 1.96


@dataclass(frozen=True)
class PairedSeries:
    g: np.ndarray  # ground truth
    a: np.ndarray  # automatic

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.float64)
        if g.shape != a.shape or g.ndim != 1:
            raise DimensionError(f"paired series need equal 1-D lengths, got {g.shape} and {a.shape}")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(a))):
            raise ParameterError("paired series values must be finite")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "a", a)

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def differences(self) -> np.ndarray:
        return self.a - self.g


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def slice_of(self, data: np.ndarray) -> np.ndarray:
        rows, cols = data.shape
        if (self.top < 0 or self.left < 0 or self.height < 1 or self.width < 1
                or self.top + self.height > rows or self.left + self.width > cols):
            raise ParameterError(f"{self} does not fit inside a {rows}x{cols} image")
        if self.height * self.width < 2:
            raise ParameterError(f"{self} must cover at least 2 pixels")
        return data[self.top:self.top + self.height, self.left:self.left + self.width]


@dataclass(frozen=True)
class TTestResult:
    p_value: float
    t_statistic: float
    df: int
    flag: str = ""


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    lower: float
    upper: float
    within: int  # differences inside the limits
    n: int

    @property
    def fraction_within(self) -> float:
        return self.within / self.n


@dataclass(frozen=True)
class ICCResult:
    icc: float
    ci_low: float
    ci_high: float
    f_statistic: float
    p_value: float
    flag: str = ""


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def dice(a: Union[Mask, float], g: Union[Mask, float]) -> float:
    """
    Dice similarity in percent.

    Masks are compared pixelwise. Two volumes are compared with the smaller
    one standing in for the intersection. Two empty operands score 100.
    """
    if isinstance(a, Mask) or isinstance(g, Mask):
        if not (isinstance(a, Mask) and isinstance(g, Mask)):
            raise ParameterError("dice needs two masks or two volumes")
        if a.shape != g.shape:
            raise DimensionError(f"dice of masks with shapes {a.shape} and {g.shape}")
        intersection = float(np.count_nonzero(a.bits & g.bits))
        total = float(a.area + g.area)
    else:
        if a < 0 or g < 0:
            raise ParameterError(f"volumes must be >= 0, got {a} and {g}")
        intersection = float(min(a, g))
        total = float(a + g)
    if total == 0:
        logger.info("dice of two empty operands counted as 100%")
        return 100.0
    return 2.0 * intersection / total * 100.0


def pearson(s: PairedSeries) -> float:
    if s.n < 2:
        raise SampleSizeError(f"correlation needs n >= 2, got {s.n}")
    dg = s.g - s.g.mean()
    da = s.a - s.a.mean()
    sg = np.sqrt(np.sum(dg * dg) / (s.n - 1))
    sa = np.sqrt(np.sum(da * da) / (s.n - 1))
    if sg == 0 or sa == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    covariance = np.sum(dg * da) / (s.n - 1)
    return float(covariance / (sg * sa))


def linear_fit(s: PairedSeries) -> LinearFit:
    """Least-squares line of automatic on ground-truth values, with R^2"""
    r = pearson(s)
    fit = stats.linregress(s.g, s.a)
    return LinearFit(slope=float(fit.slope), intercept=float(fit.intercept), r_squared=r * r)


def msr_cnr(img: BScan, fg: Rect, bg: Rect) -> Tuple[float, float]:
    """
    Mean-to-standard-deviation ratio of fg and contrast-to-noise ratio of fg vs bg.

    Args:
        img: image to score
        fg: foreground rectangle
        bg: background rectangle

    Returns:
        (MSR, CNR)
    """
    f = fg.slice_of(img.data)
    b = bg.slice_of(img.data)
    mu_f, sd_f = f.mean(), f.std(ddof=1)
    mu_b, sd_b = b.mean(), b.std(ddof=1)
    if sd_f == 0:
        raise DegenerateRegionError("foreground region has zero standard deviation")
    msr = mu_f / sd_f
    cnr = abs(mu_f - mu_b) / np.sqrt(0.5 * (sd_f ** 2 + sd_b ** 2))
    return float(msr), float(cnr)


def compare_denoisers(img: BScan, fg: Rect, bg: Rect, se_radius: int = 1,
                      window: int = 3) -> Dict[str, Tuple[float, float]]:
    filtered = {
        "mean": mean_filter(img, window),
        "median": median_filter(img, window),
        "reconstruction": closing_reconstruction(img, se_radius),
    }
    return {name: msr_cnr(out, fg, bg) for name, out in filtered.items()}


def paired_t_test(s: PairedSeries) -> TTestResult:
    """Two-tailed paired t-test on a - g"""
    if s.n < 2:
        raise SampleSizeError(f"paired t-test needs n >= 2, got {s.n}")
    d = s.differences
    df = s.n - 1
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return TTestResult(1.0, 0.0, df, "all differences are zero")
        return TTestResult(0.0, float(np.copysign(np.inf, mean)), df, "zero variance with nonzero mean")
    t = mean / (sd / np.sqrt(s.n))
    p = special.betainc(0.5 * df, 0.5, df / (df + t * t))
    return TTestResult(float(p), float(t), df)


def bland_altman(s: PairedSeries) -> BlandAltman:
    if s.n < 2:
        raise SampleSizeError(f"Bland-Altman needs n >= 2, got {s.n}")
    d = s.differences
    bias = d.mean()
    spread = AGREEMENT * d.std(ddof=1)
    lower, upper = bias - spread, bias + spread
    within = int(np.count_nonzero((d >= lower) & (d <= upper)))
    return BlandAltman(float(bias), float(lower), float(upper), within, s.n)


def _mean_squares(ratings: np.ndarray) -> Tuple[float, float, float]:
    n, k = ratings.shape
    grand = ratings.mean()
    ss_total = np.sum((ratings - grand) ** 2)
    ms_rows = ratings.mean(axis=1).var(ddof=1) * k
    ms_cols = ratings.mean(axis=0).var(ddof=1) * n
    ms_error = (ss_total - ms_rows * (n - 1) - ms_cols * (k - 1)) / ((n - 1) * (k - 1))
    # rounding residue of an exactly additive table
    if ms_error <= 1e-12 * max(ss_total, 1.0):
        ms_error = 0.0
    return float(ms_rows), float(ms_cols), float(ms_error)


def _check_ratings(ratings) -> np.ndarray:
    x = np.asarray(ratings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise SampleSizeError(f"ratings need at least 2 subjects x 2 raters, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("ratings must be finite")
    return x


def icc21(ratings, alpha: float = 0.05) -> ICCResult:
    """
    Single-rater two-way random-effects absolute-agreement ICC with its CI.

    Args:
        ratings: n subjects x k raters
        alpha: 1 - confidence level, split over both tails

    Returns:
        ICCResult
    """
    x = _check_ratings(ratings)
    n, k = x.shape
    ms_r, ms_c, ms_e = _mean_squares(x)
    denominator = ms_r + (k - 1) * ms_e + k * (ms_c - ms_e) / n
    if denominator <= 0:
        raise DegenerateStatisticError("all mean squares vanish, ICC is undefined")
    icc = (ms_r - ms_e) / denominator
    if ms_e == 0:
        return ICCResult(icc, icc, icc, np.inf, 0.0, "zero residual mean square, interval collapsed")
    f_stat = ms_r / ms_e
    p_value = float(stats.f.sf(f_stat, n - 1, (n - 1) * (k - 1)))
    a = k * icc / (n * (1 - icc))
    b = 1 + k * icc * (n - 1) / (n * (1 - icc))
    v = (a * ms_c + b * ms_e) ** 2 / (
        (a * ms_c) ** 2 / (k - 1) + (b * ms_e) ** 2 / ((n - 1) * (k - 1))
    )
    f_low = stats.f.ppf(1 - alpha / 2, n - 1, v)
    f_high = stats.f.ppf(1 - alpha / 2, v, n - 1)
    low = n * (ms_r - f_low * ms_e) / (
        f_low * (k * ms_c + (k * n - k - n) * ms_e) + n * ms_r
    )
    high = n * (f_high * ms_r - ms_e) / (
        k * ms_c + (k * n - k - n) * ms_e + n * f_high * ms_r
    )
    return ICCResult(float(icc), float(low), float(high), float(f_stat), p_value)


def icc2k(ratings, alpha: float = 0.05) -> ICCResult:
    """Average-of-k-raters two-way random-effects absolute-agreement ICC"""
    x = _check_ratings(ratings)
    n, k = x.shape
    ms_r, ms_c, ms_e = _mean_squares(x)
    denominator = ms_r + (ms_c - ms_e) / n
    if denominator <= 0:
        raise DegenerateStatisticError("mean squares leave ICC(2,k) undefined")
    icc = (ms_r - ms_e) / denominator
    if ms_e == 0:
        return ICCResult(float(icc), float(icc), float(icc), np.inf, 0.0,
                         "zero residual mean square, interval collapsed")
    single = icc21(x, alpha)

    def average(value: float) -> float:
        return k * value / (1 + (k - 1) * value)

    return ICCResult(float(icc), average(single.ci_low), average(single.ci_high),
                     single.f_statistic, single.p_value)


def dice_series(pred: Sequence[Mask], truth: Sequence[Mask]) -> np.ndarray:
    if len(pred) != len(truth):
        raise DimensionError(f"{len(pred)} predictions for {len(truth)} ground-truth masks")
    return np.array([dice(p, g) for p, g in zip(pred, truth)])
