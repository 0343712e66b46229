"""Tail shape and scaling diagnostics for inferred delay distributions.

Queueing delays fed by self-similar traffic have Weibull-type tails
``P(X > x) = exp(-b * x**a)``; on log-log axes ``log(-log P)`` against
``log x`` is a straight line with slope ``a``, and for a single-hop
queue the shape relates to the Hurst exponent of the input traffic
through ``a = 2 * (1 - H)``.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma

from .delay_model import DelayDistribution, LinkParams


@dataclass(eq=False)
class CcdfCurve:
    """Complementary cumulative distribution P(X > x) on a finite grid."""

    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        p = np.asarray(self.p, dtype=float)
        if x.ndim != 1 or x.shape != p.shape or x.size == 0:
            raise ValueError("x and p must be equal-length 1-d arrays")
        if np.any(np.diff(x) <= 0):
            raise ValueError("x must be strictly increasing")
        if np.any(p < -1e-15) or np.any(p > 1 + 1e-15):
            raise ValueError("p must lie in [0, 1]")
        if np.any(np.diff(p) > 1e-15):
            raise ValueError("p must be non-increasing")
        self.x = x
        self.p = np.clip(p, 0.0, 1.0)

    def __len__(self) -> int:
        return self.x.size

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("x,p\n")
            for xi, pi in zip(self.x, self.p):
                fh.write(f"{xi!r},{pi!r}\n")


def ccdf_of(source) -> CcdfCurve:
    """Exact tail sums of a distribution, or empirical tails of samples.

    For a DelayDistribution the grid is 0 followed by the bin centers,
    with mass conditioned on the packet not being lost.  For a sample
    array the right-continuous convention #{samples > x} / n applies at
    each distinct sample value.
    """
    if isinstance(source, DelayDistribution):
        finite = source.mass.sum()
        if finite <= 0:
            raise ValueError("no finite probability mass")
        q = source.mass / finite
        x = np.concatenate(([0.0], source.support.centers()))
        tail = np.concatenate(([1.0], 1.0 - np.cumsum(q)))
        return CcdfCurve(x, np.maximum(tail, 0.0))
    samples = np.asarray(source, dtype=float)
    if samples.size == 0:
        raise ValueError("no samples")
    values, counts = np.unique(samples, return_counts=True)
    n = samples.size
    tail = (n - np.cumsum(counts)) / n
    return CcdfCurve(values, tail)


@dataclass(frozen=True)
class WeibullFit:
    """Least-squares Weibull tail fit P(X > x) = exp(-rate * x**shape)."""

    shape: float
    rate: float
    q_low: float
    q_high: float
    r_squared: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "a": self.shape,
            "b": self.rate,
            "H": hurst_from_shape(self.shape) if 0 < self.shape < 2 else None,
            "r2": self.r_squared,
            "range": [self.q_low, self.q_high],
            "n_points": self.n_points,
        }


def fit_weibull_tail(curve: CcdfCurve, q_low: float = 1e-3, q_high: float = 0.9) -> WeibullFit:
    """Fit a line to (log x, log(-log P)) over the central CCDF range.

    Points with P outside (q_low, q_high) are dropped: the flat head
    carries no tail information and the extreme tail is noise-dominated.
    The slope is the Weibull shape, exp(intercept) the rate.
    """
    keep = (curve.p > q_low) & (curve.p < q_high) & (curve.x > 0)
    if keep.sum() < 5:
        raise ValueError(f"only {int(keep.sum())} usable points, need at least 5")
    lx = np.log(curve.x[keep])
    ly = np.log(-np.log(curve.p[keep]))
    slope, intercept = np.polyfit(lx, ly, 1)
    if slope <= 0:
        raise ValueError("tail does not steepen with x; not Weibull-like")
    fitted = slope * lx + intercept
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return WeibullFit(float(slope), float(math.exp(intercept)), q_low, q_high, r2, int(keep.sum()))


def hurst_from_shape(a: float) -> float:
    """Hurst exponent H = 1 - a/2 of the traffic feeding a single queue."""
    if not 0 < a < 2:
        raise ValueError(f"shape {a} outside (0, 2); H would leave (0, 1)")
    return 1.0 - a / 2.0


def weibull_cv_prefactor(a: float) -> float:
    """Ratio sigma/mean of a Weibull distribution with shape a.

    g(a) = sqrt(Gamma(1 + 2/a) - Gamma(1 + 1/a)**2) / Gamma(1 + 1/a);
    g(1) is exactly 1 (exponential).
    """
    if a <= 0:
        raise ValueError("shape must be positive")
    g1 = gamma(1.0 + 1.0 / a)
    g2 = gamma(1.0 + 2.0 / a)
    return float(math.sqrt(g2 - g1 * g1) / g1)


def mean_std_points(params: LinkParams) -> list[tuple[int, float, float]]:
    """(node, mean, stddev) of the finite delay per link, in seconds."""
    out = []
    for node, dist in params.items():
        mean, std = dist.moments()
        out.append((node, mean, std))
    return out


def avg_delay_scaling_fit(
    means, central: tuple[float, float] = (0.05, 0.95)
) -> tuple[float, float, float]:
    """Fit P(mean > x) = C1 - C2 * log(x) to the empirical CCDF of means.

    A 1/x-type density of average delays makes this a straight line on a
    semilog plot.  Non-positive means are excluded; the fit uses CCDF
    points (midpoint convention) inside the ``central`` band.  Returns
    (C1, C2, r_squared) with C2 > 0 for a decaying tail.
    """
    means = np.asarray(means, dtype=float)
    means = means[means > 0]
    if means.size == 0:
        raise ValueError("no positive means")
    means = np.sort(means)
    n = means.size
    p = (n - np.arange(n) - 0.5) / n
    keep = (p >= central[0]) & (p <= central[1])
    lx = np.log(means[keep])
    py = p[keep]
    if keep.sum() < 2 or np.ptp(lx) <= 0:
        raise ValueError("need at least two distinct positive means in the central band")
    slope, intercept = np.polyfit(lx, py, 1)
    fitted = slope * lx + intercept
    ss_res = float(np.sum((py - fitted) ** 2))
    ss_tot = float(np.sum((py - py.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(intercept), float(-slope), r2


def analyze_to_dir(
    params: LinkParams, outdir, q_low: float = 1e-3, q_high: float = 0.9
) -> dict:
    """Write the analysis bundle for a set of link distributions.

    Produces mean_std.csv, per-link CCDF CSVs and Weibull fit JSONs
    (plus unsuffixed ccdf.csv / weibull_fit.json when there is a single
    link), and the average-delay CCDF with its semilog fit.  Returns a
    summary dict of what was written.
    """
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    points = mean_std_points(params)
    with open(outdir / "mean_std.csv", "w", encoding="utf-8") as fh:
        fh.write("node,mean,std\n")
        for node, mean, std in points:
            fh.write(f"{node},{mean!r},{std!r}\n")

    single = len(params) == 1
    fits = []
    for node, dist in params.items():
        curve = ccdf_of(dist)
        curve.to_csv(outdir / (f"ccdf_node{node}.csv" if not single else "ccdf.csv"))
        try:
            fit = fit_weibull_tail(curve, q_low, q_high)
        except ValueError:
            continue
        entry = {"node": node, **fit.to_dict()}
        fits.append(entry)
        if single:
            with open(outdir / "weibull_fit.json", "w", encoding="utf-8") as fh:
                json.dump(entry, fh, indent=1)
    with open(outdir / "weibull_fits.json", "w", encoding="utf-8") as fh:
        json.dump(fits, fh, indent=1)

    summary: dict = {"links": len(params), "fits": len(fits)}
    positive = [m for _, m, _ in points if m > 0]
    if len(positive) >= 2 and len(set(positive)) >= 2:
        curve = ccdf_of(np.asarray(positive))
        curve.to_csv(outdir / "avg_ccdf.csv")
        try:
            c1, c2, r2 = avg_delay_scaling_fit(positive)
        except ValueError:
            pass
        else:
            with open(outdir / "avg_ccdf_fit.json", "w", encoding="utf-8") as fh:
                json.dump({"C1": c1, "C2": c2, "r2": r2}, fh, indent=1)
            summary["avg_fit"] = {"C1": c1, "C2": c2, "r2": r2}
    return summary
