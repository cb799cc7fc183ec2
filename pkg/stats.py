"""
stats.py

Excess kurtosis (streamed, mergeable moments), Pearson correlation, Welch's
two-sample t-test with a self-contained Student-t CDF, and pairwise win counts.
Everything is accumulated in float64.
"""
import math
from dataclasses import dataclass

import numpy as np

from errors import StatsError
from weightstore import CheckpointManifest, select_quantizable

BETACF_MAX_ITER = 500
BETACF_TOL = 1e-15
TINY = 1e-300


@dataclass(frozen=True)
class KurtosisResult:
    excess_kurtosis: float
    n: int
    mean: float
    variance: float


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p_two_sided: float
    mean_a: float
    mean_b: float
    var_a: float
    var_b: float
    n_a: int
    n_b: int


@dataclass(frozen=True)
class WinRecord:
    wins: int
    ties: int
    total: int

    @property
    def losses(self):
        return self.total - self.wins - self.ties

    def __str__(self):
        return f"{self.wins}/{self.total}"


class Moments:
    """Count, mean and central moment sums M2..M4, mergeable pairwise.

    Chunks are reduced with numpy (two-pass inside the chunk) and combined with
    the pairwise update formulas, so pooling never materializes all samples.
    """

    def __init__(self, n=0, mean=0.0, m2=0.0, m3=0.0, m4=0.0):
        self.n = n
        self.mean = mean
        self.m2 = m2
        self.m3 = m3
        self.m4 = m4

    @classmethod
    def of(cls, samples):
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size == 0:
            return cls()
        mean = float(x.mean())
        d = x - mean
        d2 = d * d
        return cls(int(x.size), mean, float(d2.sum()), float((d2 * d).sum()), float((d2 * d2).sum()))

    def __add__(self, other):
        if other.n == 0:
            return Moments(self.n, self.mean, self.m2, self.m3, self.m4)
        if self.n == 0:
            return Moments(other.n, other.mean, other.m2, other.m3, other.m4)
        na, nb = self.n, other.n
        n = na + nb
        delta = other.mean - self.mean
        delta2 = delta * delta
        mean = self.mean + delta * nb / n
        m2 = self.m2 + other.m2 + delta2 * na * nb / n
        m3 = (self.m3 + other.m3
              + delta * delta2 * na * nb * (na - nb) / (n * n)
              + 3.0 * delta * (na * other.m2 - nb * self.m2) / n)
        m4 = (self.m4 + other.m4
              + delta2 * delta2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
              + 6.0 * delta2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
              + 4.0 * delta * (na * other.m3 - nb * self.m3) / n)
        return Moments(n, mean, m2, m3, m4)

    def kurtosis(self):
        if self.n < 4:
            raise StatsError(f"Kurtosis needs at least 4 samples, got {self.n}")
        variance = self.m2 / self.n
        # round-off leaves a tiny spread on constant input
        if not variance > (np.finfo(np.float64).eps * abs(self.mean)) ** 2:
            raise StatsError("Kurtosis is undefined for zero variance")
        excess = self.n * self.m4 / (self.m2 * self.m2) - 3.0
        return KurtosisResult(excess_kurtosis=excess, n=self.n, mean=self.mean, variance=variance)


def excess_kurtosis(samples):
    """Population excess kurtosis m4 / m2^2 - 3."""
    return Moments.of(samples).kurtosis()


def pooled_weight_kurtosis(tensors, selector=None, chunk_size=1 << 20):
    """Kurtosis of every selected weight element pooled into one sample.

    Tensors are visited in name order and each is reduced in fixed-size chunks,
    so the combine order is fixed regardless of how `tensors` is ordered.
    """
    manifest = CheckpointManifest.for_tensors(0, tensors)
    names = select_quantizable(manifest, selector)
    if not names:
        raise StatsError("No tensors selected for kurtosis")

    total = Moments()
    for name in names:
        flat = np.asarray(tensors[name]).ravel()
        for start in range(0, flat.size, chunk_size):
            total = total + Moments.of(flat[start:start + chunk_size])
    return total.kurtosis()


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise StatsError(f"Length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise StatsError("Pearson correlation needs at least 2 pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise StatsError("Pearson correlation is undefined for a constant series")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _betacf(a, b, x):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < TINY:
        d = TINY
    d = 1.0 / d
    h = d
    for m in range(1, BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < TINY:
            d = TINY
        c = 1.0 + aa / c
        if abs(c) < TINY:
            c = TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < TINY:
            d = TINY
        c = 1.0 + aa / c
        if abs(c) < TINY:
            c = TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETACF_TOL:
            return h
    raise StatsError(f"Incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise StatsError("betainc: a and b must both be > 0")
    if x < 0.0 or x > 1.0:
        raise StatsError("betainc: x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    # use the continued fraction where it converges fastest
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df):
    if not df > 0:
        raise StatsError(f"Degrees of freedom must be positive, got {df}")
    return min(1.0, max(0.0, betainc(0.5 * df, 0.5, df / (df + t * t))))


def welch_t(a, b):
    """Welch's unequal-variance two-sample t-test (two-sided)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise StatsError(f"Each sample needs at least 2 values, got {a.size} and {b.size}")
    mean_a, mean_b = float(a.mean()), float(b.mean())
    var_a, var_b = float(a.var(ddof=1)), float(b.var(ddof=1))
    if not (var_a > 0 and var_b > 0):
        raise StatsError("Welch's t-test needs positive variance in both samples")

    se_a = var_a / a.size
    se_b = var_b / b.size
    t = (mean_a - mean_b) / math.sqrt(se_a + se_b)
    df = (se_a + se_b) ** 2 / (se_a ** 2 / (a.size - 1) + se_b ** 2 / (b.size - 1))
    return WelchResult(
        t=t, df=df, p_two_sided=student_t_two_sided_p(t, df),
        mean_a=mean_a, mean_b=mean_b, var_a=var_a, var_b=var_b, n_a=int(a.size), n_b=int(b.size),
    )


def pairwise_wins(challenger, baseline, lower_is_better=True):
    """Count (c, b) pairs where c strictly beats b; equal values are ties."""
    challenger = [float(c) for c in challenger]
    baseline = [float(b) for b in baseline]
    if not challenger or not baseline:
        raise StatsError("pairwise_wins needs two non-empty samples")
    wins = ties = 0
    for c in challenger:
        for b in baseline:
            if c == b:
                ties += 1
            elif (c < b) == lower_is_better:
                wins += 1
    return WinRecord(wins=wins, ties=ties, total=len(challenger) * len(baseline))
