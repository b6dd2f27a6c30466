"""Statistical toolkit: excess kurtosis (streamed), Pearson correlation,
Welch's two-sample t-test, and pairwise win counting.

Kurtosis uses population (biased) moments, the common "excess kurtosis"
definition; at the ~1e7-weight scale the probes run at, the sample-size
correction is negligible.  The Student-t CDF is evaluated via a
continued-fraction regularized incomplete beta, so the module has no
statistics dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .weightstore import CheckpointManifest, QuantSelector, select_quantizable


class StatsError(Exception):
    pass


# ---------------------------------------------------------------------------
# streamed central moments

@dataclass
class MomentAccumulator:
    """Central moments up to order 4, mergeable across chunks.

    ``add`` folds in an array chunk; ``merge`` combines two accumulators with
    the standard pairwise-update formulas, so a pooled statistic can be
    streamed tensor by tensor without materializing the pool.  Combine order
    must be fixed for bitwise determinism; permutations agree to ~1e-9.
    """

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    m3: float = 0.0
    m4: float = 0.0

    def add(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return
        n = x.size
        mean = float(x.mean())
        d = x - mean
        d2 = d * d
        chunk = MomentAccumulator(n=n, mean=mean, m2=float(d2.sum()),
                                  m3=float((d2 * d).sum()), m4=float((d2 * d2).sum()))
        self.merge(chunk)

    def merge(self, other: "MomentAccumulator") -> None:
        if other.n == 0:
            return
        if self.n == 0:
            self.n, self.mean = other.n, other.mean
            self.m2, self.m3, self.m4 = other.m2, other.m3, other.m4
            return
        na, nb = self.n, other.n
        n = na + nb
        delta = other.mean - self.mean
        d_n = delta / n
        m2 = self.m2 + other.m2 + delta * d_n * na * nb
        m3 = (self.m3 + other.m3
              + delta * d_n ** 2 * na * nb * (na - nb)
              + 3.0 * d_n * (na * other.m2 - nb * self.m2))
        m4 = (self.m4 + other.m4
              + delta * d_n ** 3 * na * nb * (na * na - na * nb + nb * nb)
              + 6.0 * d_n ** 2 * (na * na * other.m2 + nb * nb * self.m2)
              + 4.0 * d_n * (na * other.m3 - nb * self.m3))
        self.n, self.mean = n, self.mean + d_n * nb
        self.m2, self.m3, self.m4 = m2, m3, m4

    @property
    def variance(self) -> float:
        return self.m2 / self.n if self.n else 0.0

    def excess_kurtosis(self) -> float:
        if self.n < 4:
            raise StatsError(f"kurtosis needs n >= 4, got n={self.n}")
        if self.m2 <= 0:
            raise StatsError("kurtosis undefined for zero variance")
        return self.n * self.m4 / (self.m2 * self.m2) - 3.0


@dataclass
class KurtosisResult:
    excess_kurtosis: float
    n: int
    mean: float
    variance: float


def excess_kurtosis(samples) -> KurtosisResult:
    """Population excess kurtosis m4/m2^2 - 3, accumulated in float64."""
    acc = MomentAccumulator()
    acc.add(np.asarray(samples, dtype=np.float64))
    return KurtosisResult(excess_kurtosis=acc.excess_kurtosis(), n=acc.n,
                          mean=acc.mean, variance=acc.variance)


def pooled_weight_kurtosis(tensors: dict[str, np.ndarray],
                           selector: QuantSelector | None = None,
                           manifest: CheckpointManifest | None = None,
                           ) -> KurtosisResult:
    """Kurtosis of all selected weight elements pooled as one sample.

    Tensors are streamed in name order; nothing is concatenated.  If a
    manifest is given its descriptors drive selection, otherwise the tensor
    dict itself is filtered.
    """
    selector = selector or QuantSelector()
    if manifest is not None:
        names = select_quantizable(manifest, selector)
    else:
        names = sorted(n for n, t in tensors.items()
                       if selector.matches(n, np.asarray(t).ndim))
    if not names:
        raise StatsError("selector matched no tensors")
    acc = MomentAccumulator()
    for name in names:
        acc.add(tensors[name])
    return KurtosisResult(excess_kurtosis=acc.excess_kurtosis(), n=acc.n,
                          mean=acc.mean, variance=acc.variance)


# ---------------------------------------------------------------------------
# correlation

def pearson(x, y) -> float:
    """Product-moment correlation in float64; requires nonconstant inputs."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise StatsError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise StatsError("need at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise StatsError("pearson undefined for constant input")
    r = float(dx @ dy) / (sx * sy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# Student-t CDF via regularized incomplete beta (continued fraction)

_BETA_TOL = 1e-14
_BETA_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    """Lentz continued fraction for the incomplete beta function."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_TOL:
            return h
    raise StatsError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not (a > 0 and b > 0):
        raise StatsError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for T ~ Student-t with df degrees of freedom."""
    if df <= 0:
        raise StatsError("df must be positive")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


@dataclass
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


def welch_t(a, b) -> WelchResult:
    """Welch's unequal-variance two-sample t-test (two-sided)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise StatsError("each sample needs n >= 2")
    var_a = float(a.var(ddof=1))
    var_b = float(b.var(ddof=1))
    if var_a <= 0 and var_b <= 0:
        if float(a.mean()) == float(b.mean()):
            # identical constants: no evidence of difference
            return WelchResult(t=0.0, df=float(a.size + b.size - 2), p_two_sided=1.0,
                               mean_a=float(a.mean()), mean_b=float(b.mean()),
                               var_a=var_a, var_b=var_b, n_a=a.size, n_b=b.size)
        raise StatsError("both samples have zero variance")
    sa = var_a / a.size
    sb = var_b / b.size
    se = math.sqrt(sa + sb)
    t = (float(a.mean()) - float(b.mean())) / se
    df = (sa + sb) ** 2 / (
        (sa * sa / (a.size - 1) if a.size > 1 else 0.0)
        + (sb * sb / (b.size - 1) if b.size > 1 else 0.0)
    )
    p = student_t_sf_two_sided(t, df)
    return WelchResult(t=t, df=df, p_two_sided=p,
                       mean_a=float(a.mean()), mean_b=float(b.mean()),
                       var_a=var_a, var_b=var_b, n_a=a.size, n_b=b.size)


# ---------------------------------------------------------------------------
# pairwise wins

@dataclass
class WinRecord:
    wins: int
    ties: int
    total: int

    @property
    def losses(self) -> int:
        return self.total - self.wins - self.ties

    def __str__(self) -> str:
        return f"{self.wins}/{self.total}"


def pairwise_wins(challenger, baseline, lower_is_better: bool = True) -> WinRecord:
    """Count pairs (c, b) where c is strictly better; equal values are ties."""
    c = np.asarray(challenger, dtype=np.float64).ravel()
    b = np.asarray(baseline, dtype=np.float64).ravel()
    if c.size == 0 or b.size == 0:
        raise StatsError("both samples must be non-empty")
    diff = c[:, None] - b[None, :]
    wins = int((diff < 0).sum()) if lower_is_better else int((diff > 0).sum())
    ties = int((diff == 0).sum())
    return WinRecord(wins=wins, ties=ties, total=c.size * b.size)
