"""Robust intervals around nonlinear shrinkage estimators.

Three families: highest-posterior-density intervals around the soft
thresholding estimator under a Laplace baseline prior, gamma-posterior-style
intervals for Poisson rates, and linear-shrinkage intervals that retain
average coverage conditional on the raw estimate falling in a selection
window.  Each family is indexed by a tuning parameter chi that widens the
sets, and is calibrated by inverting a discretized worst-case moment problem
from :mod:`shrinkci.momentlp`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfcx, gammaincinv, gammaln, ndtr, ndtri, roots_legendre

from shrinkci import momentlp as mlp

__all__ = [
    "SoftThresholdConfig",
    "PoissonConfig",
    "SelectionWindow",
    "EmptyHpdError",
    "soft_threshold",
    "hpd_interval",
    "soft_threshold_noncoverage",
    "soft_threshold_ebci",
    "soft_threshold_expected_length",
    "soft_threshold_worst_noncoverage",
    "poisson_interval",
    "garwood_interval",
    "poisson_noncoverage",
    "poisson_ebci",
    "selection_noncoverage",
    "selection_second_moment",
    "selection_critical_value",
]

_SQRT2PI = math.sqrt(2.0 * math.pi)


class EmptyHpdError(RuntimeError):
    """The requested highest-posterior-density set is empty."""


# ---------------------------------------------------------------------------
# soft thresholding under a Laplace baseline prior


def _default_theta_grid():
    return tuple(np.linspace(-10.0, 10.0, 500))


@dataclass(frozen=True)
class SoftThresholdConfig:
    """Homoskedastic normal model with a Laplace baseline prior.

    ``mu2`` is the prior second moment, ``sigma`` the noise standard
    deviation.  Grids and truncation control the calibration integrals.
    """

    mu2: float
    sigma: float = 1.0
    alpha: float = 0.05
    theta_grid: tuple[float, ...] = field(default_factory=_default_theta_grid)
    y_truncation: tuple[float, float] = (-10.0, 10.0)

    def __post_init__(self):
        if not (self.mu2 > 0 and self.sigma > 0):
            raise ValueError("mu2 and sigma must be > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        grid = tuple(float(g) for g in self.theta_grid)
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("theta_grid must be strictly increasing")
        if not self.y_truncation[0] < self.y_truncation[1]:
            raise ValueError("invalid y truncation")
        object.__setattr__(self, "theta_grid", grid)


def soft_threshold(y, mu2: float):
    """sign(y) * max(|y| - sqrt(2/mu2), 0): the posterior mode under the
    Laplace prior with second moment mu2 and unit noise variance (with
    noise sd sigma the mode thresholds at sigma^2 sqrt(2/mu2) instead)."""
    if not mu2 > 0:
        raise ValueError("mu2 must be > 0")
    y = np.asarray(y, dtype=float)
    out = np.sign(y) * np.maximum(np.abs(y) - math.sqrt(2.0 / mu2), 0.0)
    return float(out) if out.ndim == 0 else out


def _posterior_log_const(y, cfg: SoftThresholdConfig):
    """c(y) such that the posterior density is
    exp(c(y) - t^2/(2 sigma^2) + y t / sigma^2 - |t| sqrt(2/mu2)).

    Uses the scaled complementary error function, so no overflow for any
    argument the truncated grids produce.
    """
    y = np.asarray(y, dtype=float)
    s = cfg.sigma
    root = math.sqrt(s * s / cfg.mu2)
    a_minus = root - y / (s * math.sqrt(2.0))
    a_plus = root + y / (s * math.sqrt(2.0))
    return 0.5 * math.log(2.0 / (math.pi * s * s)) - np.log(erfcx(a_minus) + erfcx(a_plus))


def hpd_interval(y: float, cfg: SoftThresholdConfig, chi: float) -> tuple[float, float]:
    """Highest-posterior-density interval at log-density level -chi.

    Intersection of the solution sets of two upward quadratics; always an
    interval, containing the posterior mode whenever nonempty.  Raises
    EmptyHpdError when chi is too small for the posterior mode to clear the
    level, which can happen even at chi = 0 when the posterior is diffuse.
    """
    if chi < 0:
        raise ValueError("chi must be >= 0")
    iv = _hpd_or_none(y, cfg, chi)
    if iv is None:
        raise EmptyHpdError(f"HPD set empty at y={y}, chi={chi}")
    return iv


def _hpd_or_none(y: float, cfg: SoftThresholdConfig, chi: float):
    s2 = cfg.sigma**2
    level = chi + float(_posterior_log_const(y, cfg))
    lam = math.sqrt(2.0 / cfg.mu2)
    lo, hi = -math.inf, math.inf
    for c in (y / s2 - lam, y / s2 + lam):
        disc = s2 * s2 * c * c + 2.0 * s2 * level
        if disc < 0:
            return None
        root = math.sqrt(disc)
        lo = max(lo, s2 * c - root)
        hi = min(hi, s2 * c + root)
    if lo > hi:
        return None
    return lo, hi


def _covered_margin(theta, y, cfg: SoftThresholdConfig, chi: float):
    """Margin whose sign says whether theta lies in the HPD set at y.

    Positive iff both quadratic inequalities hold; vectorized over a theta
    column and a y row.
    """
    s2 = cfg.sigma**2
    lam = math.sqrt(2.0 / cfg.mu2)
    cbar = _posterior_log_const(y, cfg)
    return (
        chi
        + cbar
        + theta * y / s2
        - theta * theta / (2.0 * s2)
        - np.abs(theta) * lam
    )


def soft_threshold_noncoverage(theta, cfg: SoftThresholdConfig, chi: float) -> np.ndarray:
    """P(theta not in HPD set | theta) for each theta, by integration over y.

    The coverage region in y is located by a sign scan of the membership
    margin plus root refinement, then integrated exactly against the normal
    density of y given theta; y is truncated per the config, and mass outside
    the truncation counts as non-covered.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    y_lo, y_hi = cfg.y_truncation
    ys = np.linspace(y_lo, y_hi, 2001)
    margin = _covered_margin(theta[:, None], ys[None, :], cfg, chi)
    out = np.empty(theta.size)
    for i, th in enumerate(theta):
        out[i] = 1.0 - _covered_mass(th, ys, margin[i], cfg, chi)
    return out


def _covered_mass(th, ys, margin_row, cfg, chi):
    sign = margin_row > 0
    if not sign.any():
        return 0.0
    # refine the boundary crossings, then sum the normal mass of each covered run
    edges = []
    g = lambda y: float(_covered_margin(th, np.asarray(y), cfg, chi))
    flips = np.flatnonzero(sign[:-1] != sign[1:])
    for j in flips:
        edges.append(brentq(g, ys[j], ys[j + 1], xtol=1e-12))
    breaks = [ys[0], *edges, ys[-1]]
    mass = 0.0
    for a, b in zip(breaks, breaks[1:]):
        if g(0.5 * (a + b)) > 0:
            mass += float(
                ndtr((b - th) / cfg.sigma) - ndtr((a - th) / cfg.sigma)
            )
    return mass


def _laplace_pdf(theta, mu2):
    lam = math.sqrt(2.0 / mu2)
    return 0.5 * lam * np.exp(-lam * np.abs(theta))


def _laplace_average_noncoverage(cfg: SoftThresholdConfig, chi: float) -> float:
    """E[noncoverage(theta, chi)] under the Laplace baseline, by quadrature."""
    nodes, weights = roots_legendre(200)
    up = cfg.y_truncation[1]
    th = 0.5 * up * (nodes + 1.0)
    w = 0.5 * up * weights
    vals = soft_threshold_noncoverage(th, cfg, chi)
    return float(2.0 * np.sum(w * _laplace_pdf(th, cfg.mu2) * vals))


def soft_threshold_ebci(cfg: SoftThresholdConfig) -> tuple[float, float]:
    """Calibrated tuning parameters (chi_robust, chi_parametric).

    The robust value inverts the worst case over all effect distributions on
    the grid with second moment mu2; the parametric value makes the average
    non-coverage under the Laplace baseline itself equal to alpha.
    """
    grid = np.asarray(cfg.theta_grid)

    def family(chi):
        reward = np.clip(soft_threshold_noncoverage(grid, cfg, chi), 0.0, 1.0)
        return mlp.MomentProblem(grid, reward, grid[None, :] ** 2, [cfg.mu2])

    chi_robust = mlp.calibrate_chi(family, cfg.alpha, lo=0.0, hi=2.0)

    obj = lambda chi: _laplace_average_noncoverage(cfg, chi) - cfg.alpha
    hi = 2.0
    for _ in range(40):
        if obj(hi) <= 0:
            break
        hi *= 2.0
    chi_parametric = float(brentq(obj, 0.0, hi, xtol=1e-6))
    return chi_robust, chi_parametric


def soft_threshold_worst_noncoverage(cfg: SoftThresholdConfig, chi: float) -> float:
    """Worst-case non-coverage at chi over grid distributions matching mu2."""
    grid = np.asarray(cfg.theta_grid)
    reward = np.clip(soft_threshold_noncoverage(grid, cfg, chi), 0.0, 1.0)
    return mlp.solve_moment_lp(
        mlp.MomentProblem(grid, reward, grid[None, :] ** 2, [cfg.mu2])
    ).value


def soft_threshold_expected_length(cfg: SoftThresholdConfig, chi: float) -> float:
    """Expected HPD length under the Laplace baseline marginal of y."""
    y_lo, y_hi = cfg.y_truncation
    ys = np.linspace(y_lo, y_hi, 4001)
    lengths = np.empty(ys.size)
    for i, y in enumerate(ys):
        iv = _hpd_or_none(float(y), cfg, chi)
        lengths[i] = 0.0 if iv is None else iv[1] - iv[0]
    # marginal density of y recovered from the posterior normalizer
    marg = (
        np.exp(-0.5 * (ys / cfg.sigma) ** 2 - _posterior_log_const(ys, cfg))
        / (cfg.sigma * _SQRT2PI * math.sqrt(2.0 * cfg.mu2))
    )
    return float(np.trapezoid(lengths * marg, ys))


# ---------------------------------------------------------------------------
# Poisson rates under a gamma baseline prior


@dataclass(frozen=True)
class PoissonConfig:
    """Poisson counts with a Gamma(shape, scale) baseline prior."""

    shape: float
    scale: float
    alpha: float = 0.05
    y_max: int = 30
    theta_grid: tuple[float, ...] = ()

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("shape and scale must be > 0")
        if self.y_max < 10:
            raise ValueError("y_max must be >= 10")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        grid = self.theta_grid
        if not grid:
            upper = float(gammaincinv(1.0, 0.999)) * self.scale
            grid = tuple(np.linspace(1e-6, upper, 500))
        else:
            grid = tuple(float(g) for g in grid)
            if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] <= 0:
                raise ValueError("theta_grid must be positive and increasing")
        object.__setattr__(self, "theta_grid", grid)


def _gamma_quantile(q: float, shape: float, scale: float) -> float:
    if shape <= 0:
        return 0.0
    return float(gammaincinv(shape, q)) * scale


def poisson_interval(y: int, cfg: PoissonConfig, chi: float) -> tuple[float, float]:
    """Candidate interval for the rate: a chi-widened version of the
    equal-tailed gamma posterior credible interval.

    chi = 0 recovers the credible interval exactly; chi -> infinity the
    classical exact (Garwood) interval.
    """
    if y < 0 or chi < 0:
        raise ValueError("need y >= 0 and chi >= 0")
    shrink = math.exp(-chi)
    scale = cfg.scale / (shrink + cfg.scale)
    lo = _gamma_quantile(cfg.alpha / 2.0, shrink * cfg.shape + y, scale)
    hi = _gamma_quantile(1.0 - cfg.alpha / 2.0, 1.0 + shrink * (cfg.shape - 1.0) + y, scale)
    return lo, hi


def garwood_interval(y: int, alpha: float = 0.05) -> tuple[float, float]:
    """Classical exact interval for a Poisson rate from one count.

    Gamma-quantile form; the lower endpoint is 0 at y = 0.  Pointwise
    coverage is at least 1 - alpha at every rate.
    """
    if y < 0:
        raise ValueError("y must be >= 0")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    lo = _gamma_quantile(alpha / 2.0, float(y), 1.0)
    hi = _gamma_quantile(1.0 - alpha / 2.0, float(y) + 1.0, 1.0)
    return lo, hi


def _poisson_pmf_matrix(theta: np.ndarray, y_max: int) -> np.ndarray:
    ys = np.arange(y_max + 1)
    log_pmf = (
        ys[None, :] * np.log(theta[:, None]) - theta[:, None] - gammaln(ys + 1.0)[None, :]
    )
    return np.exp(log_pmf)


def poisson_noncoverage(theta, cfg: PoissonConfig, chi: float) -> np.ndarray:
    """P(theta not in interval(Y) | theta) by exact summation over y <= y_max."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    bounds = np.array([poisson_interval(y, cfg, chi) for y in range(cfg.y_max + 1)])
    pmf = _poisson_pmf_matrix(theta, cfg.y_max)
    inside = (bounds[None, :, 0] <= theta[:, None]) & (theta[:, None] <= bounds[None, :, 1])
    return 1.0 - np.sum(pmf * inside, axis=1)


def poisson_ebci(
    cfg: PoissonConfig,
    mean: float | None = None,
    second_moment: float | None = None,
) -> float:
    """Robust chi for the Poisson candidate family.

    Constrains the first two moments of the rate distribution; the defaults
    are the baseline gamma moments (shape*scale and shape*(shape+1)*scale^2).
    """
    if mean is None:
        mean = cfg.shape * cfg.scale
    if second_moment is None:
        second_moment = cfg.shape * (cfg.shape + 1.0) * cfg.scale**2
    if second_moment < mean**2:
        raise mlp.InfeasibleMomentsError(
            f"second moment {second_moment} below squared mean {mean**2}"
        )
    grid = np.asarray(cfg.theta_grid)

    def family(chi):
        reward = np.clip(poisson_noncoverage(grid, cfg, chi), 0.0, 1.0)
        return mlp.MomentProblem(
            grid, reward, np.vstack([grid, grid**2]), [mean, second_moment]
        )

    return mlp.calibrate_chi(family, cfg.alpha, lo=0.0, hi=2.0)


# ---------------------------------------------------------------------------
# coverage conditional on selection


@dataclass(frozen=True)
class SelectionWindow:
    """Units are kept when the raw estimate falls in [lo, hi]."""

    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")


def selection_noncoverage(
    theta, chi: float, window: SelectionWindow, w_eb: float, sigma: float = 1.0
):
    """Non-coverage of the shrinkage interval conditional on selection.

    Degenerate selection probability at a given theta yields 1 (the interval
    cannot be said to cover in a region the data never reaches).
    """
    if not 0.0 < w_eb < 1.0:
        raise ValueError("w_eb must be in (0, 1)")
    theta = np.asarray(theta, dtype=float)
    b = (1.0 - 1.0 / w_eb) * theta / sigma
    z_hi = (window.hi - theta) / sigma
    z_lo = (window.lo - theta) / sigma
    denom = ndtr(z_hi) - ndtr(z_lo)
    num = ndtr(np.minimum(chi - b, z_hi)) - ndtr(np.maximum(-chi - b, z_lo))
    with np.errstate(divide="ignore", invalid="ignore"):
        val = 1.0 - num / denom
    val = np.where(denom < 1e-300, 1.0, val)
    out = np.clip(val, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _kde_with_derivs(data: np.ndarray, points: np.ndarray, bandwidth: float):
    """Gaussian-kernel density estimate and its first two derivatives.

    Exact summation for small problems; fft-convolved linear binning above
    ~4e6 kernel evaluations.
    """
    n = data.size
    h = bandwidth
    if n * points.size <= 4_000_000:
        u = (points[:, None] - data[None, :]) / h
        k = np.exp(-0.5 * u * u) / _SQRT2PI
        f = k.sum(axis=1) / (n * h)
        fp = (-u * k).sum(axis=1) / (n * h**2)
        fpp = ((u * u - 1.0) * k).sum(axis=1) / (n * h**3)
        return f, fp, fpp
    from scipy.signal import fftconvolve

    m = 1 << 15
    lo = min(data.min(), points.min()) - 8.0 * h
    hi = max(data.max(), points.max()) + 8.0 * h
    step = (hi - lo) / (m - 1)
    grid = lo + step * np.arange(m)
    # linear binning of the sample
    pos = np.clip((data - lo) / step, 0, m - 1 - 1e-9)
    left = pos.astype(np.int64)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=m)
    counts += np.bincount(left + 1, weights=frac, minlength=m)
    half = int(np.ceil(8.0 * h / step))
    u = step * np.arange(-half, half + 1) / h
    k = np.exp(-0.5 * u * u) / _SQRT2PI
    f = fftconvolve(counts, k, mode="same") / (n * h)
    fp = fftconvolve(counts, -u * k, mode="same") / (n * h**2)
    fpp = fftconvolve(counts, (u * u - 1.0) * k, mode="same") / (n * h**3)
    return (
        np.interp(points, grid, f),
        np.interp(points, grid, fp),
        np.interp(points, grid, fpp),
    )


def _silverman_bandwidth(data: np.ndarray) -> float:
    n = data.size
    sd = float(np.std(data, ddof=1))
    iqr = float(np.subtract(*np.percentile(data, [75, 25])))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return 0.9 * spread * n ** (-0.2)


def selection_second_moment(
    ys: np.ndarray,
    window: SelectionWindow = SelectionWindow(),
    sigma: float = 1.0,
    min_selected: int = 30,
    return_se: bool = False,
):
    """Second moment of the effects conditional on selection, from the data.

    The identity E[theta^2 | sel] = v + E[(Y + v l'(Y))^2 + v^2 l''(Y) | sel]
    holds with l the log marginal density of Y and v the noise variance, here
    1 + bandwidth^2 since kernel smoothing adds its own bandwidth of noise.
    The conditional expectation is evaluated against the kernel density
    itself (a smoothed plug-in) rather than by averaging over sample points:
    the sample average squares the kernel noise in l', which at n = 1e5 is a
    bias worth several standard errors, while in the smoothed form the noisy
    ratio terms cancel in the integral.  Floored at 1e-8.
    """
    ys = np.asarray(ys, dtype=float) / sigma
    lo, hi = window.lo / sigma, window.hi / sigma
    selected = ys[(ys >= lo) & (ys <= hi)]
    if selected.size < min_selected:
        raise ValueError(
            f"only {selected.size} selected observations; need {min_selected}"
        )
    h = _silverman_bandwidth(ys)
    v = 1.0 + h * h
    grid_lo = max(lo, float(ys.min()) - 8.0 * h)
    grid_hi = min(hi, float(ys.max()) + 8.0 * h)
    grid = np.linspace(grid_lo, grid_hi, 8193)
    f, fp, fpp = _kde_with_derivs(ys, grid, h)
    # the density-weighted integrand collapses to a ratio-free form:
    # [v + (y + v l')^2 + v^2 l''] f  =  v f + y^2 f + 2 v y f' + v^2 f''
    integrand = v * f + grid**2 * f + 2.0 * v * grid * fp + v * v * fpp
    num = float(np.trapezoid(integrand, grid))
    den = float(np.trapezoid(f, grid))
    est = max(num / den, 1e-8) * sigma**2
    if return_se:
        # first-order influence proxy: the estimator agrees with the moment
        # identity E[Y^2] - v on the selected sample to O(h^2)
        q = selected**2
        se = float(q.std(ddof=1)) / math.sqrt(q.size) * sigma**2
        return est, se
    return est


def selection_critical_value(
    mu2_cond: float,
    window: SelectionWindow,
    w_eb: float,
    sigma: float,
    alpha: float,
    theta_grid: np.ndarray,
) -> float:
    """chi making the worst-case selection-conditional non-coverage alpha."""
    mu2_cond = max(mu2_cond, 1e-8)
    grid = np.asarray(theta_grid, dtype=float)

    def family(chi):
        reward = np.clip(
            selection_noncoverage(grid, chi, window, w_eb, sigma), 0.0, 1.0
        )
        return mlp.MomentProblem(grid, reward, grid[None, :] ** 2, [mu2_cond])

    z = float(ndtri(1.0 - alpha / 2.0))
    return mlp.calibrate_chi(family, alpha, lo=0.0, hi=max(2.0 * z, 4.0))
