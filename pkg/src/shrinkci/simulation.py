"""Monte Carlo harness: panel designs, effect distributions, coverage reports.

Works in normalized units where the conditional variance of the unshrunk
estimate is 1, so the effect variance equals the signal-to-noise ratio.  Six
effect distributions are provided, including the least favorable ones for
the robust and parametric intervals, plus a heteroskedastic design that
resamples a user-supplied table of estimates and standard errors.

Replication r of design d draws from a dedicated generator seeded by
(master_seed, d, r), so reports are bit-identical for any worker count.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from shrinkci import worstcase as wc

__all__ = [
    "ThetaDistribution",
    "PanelDesign",
    "HeteroskedasticDesign",
    "CoverageReport",
    "ReportRow",
    "THETA_KINDS",
    "SIM_METHODS",
    "draw_theta",
    "simulate_panel",
    "run_study",
    "load_calibration_csv",
]

THETA_KINDS = (
    "normal",
    "scaled_chi2_1",
    "two_point",
    "three_point",
    "lf_robust",
    "lf_parametric",
)

SIM_METHODS = (
    "robust_mu2_kappa",
    "robust_mu2",
    "parametric",
    "unshrunk",
    "oracle_robust_mu2_kappa",
    "oracle_robust_mu2",
    "oracle_parametric",
)

_ORACLE_BASELINE = "oracle_robust_mu2_kappa"


@dataclass(frozen=True)
class ThetaDistribution:
    """Effect distribution with variance ``mu2`` (exactly, by construction).

    The least favorable kinds place mass 1-p at zero and p/2 at each of
    +-sqrt(mu2/p), with p chosen from the majorant kink at the critical
    value they are least favorable for; ``alpha`` enters only through that
    critical value.
    """

    kind: str
    mu2: float
    alpha: float = 0.05

    def __post_init__(self):
        if self.kind not in THETA_KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; expected one of {THETA_KINDS}")
        if not self.mu2 > 0:
            raise ValueError("mu2 must be > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")

    def _lf_mass(self) -> float:
        """Mass p of the displaced support points for the lf_* kinds."""
        m2 = 1.0 / self.mu2
        if self.kind == "lf_robust":
            chi = wc._cva_scalar(m2, None, self.alpha)
        else:
            z = float(ndtri(1.0 - self.alpha / 2.0))
            chi = z / math.sqrt(self.mu2 / (1.0 + self.mu2))
        t0 = wc.majorant_kink(chi)
        if t0 <= 0:
            return 1.0
        return min(m2 / t0, 1.0)

    def moments(self) -> tuple[float, float]:
        """(variance, kurtosis) of the distribution."""
        if self.kind == "normal":
            return self.mu2, 3.0
        if self.kind == "scaled_chi2_1":
            return self.mu2, 15.0
        if self.kind == "two_point":
            p = 0.1
            return self.mu2, 1.0 / (p * (1.0 - p)) - 3.0
        if self.kind == "three_point":
            return self.mu2, 2.0
        return self.mu2, 1.0 / self._lf_mass()


def draw_theta(dist: ThetaDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. effects from the given distribution."""
    mu2 = dist.mu2
    if dist.kind == "normal":
        return rng.normal(0.0, math.sqrt(mu2), n)
    if dist.kind == "scaled_chi2_1":
        return math.sqrt(mu2 / 2.0) * rng.chisquare(1, n)
    if dist.kind == "two_point":
        # mass 0.1 displaced so the variance is exactly mu2
        v = math.sqrt(mu2 / (0.9 * 0.1))
        return np.where(rng.random(n) < 0.1, v, 0.0)
    if dist.kind == "three_point":
        v = math.sqrt(mu2 / 0.5)
        u = rng.random(n)
        return np.where(u < 0.25, -v, np.where(u < 0.5, v, 0.0))
    p = dist._lf_mass()
    v = math.sqrt(mu2 / p)
    u = rng.random(n)
    return np.where(u < p / 2.0, -v, np.where(u < p, v, 0.0))


@dataclass(frozen=True)
class PanelDesign:
    """Balanced panel with unit effects and i.i.d. errors.

    ``t = math.inf`` is the exact-normal mode: the unshrunk estimate is
    theta + N(0, 1) and its standard error is known to be 1.  Finite ``t``
    draws t observations per unit with error variance t, so the conditional
    variance of the unit mean is 1 in all modes and ``snr`` equals the
    effect variance.
    """

    n: int
    t: float
    err: str
    snr: float
    theta: ThetaDistribution
    seed: int | None = None

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not (self.t == math.inf or (float(self.t).is_integer() and self.t >= 2)):
            raise ValueError("t must be an integer >= 2 or math.inf")
        if self.err not in ("normal", "chi2"):
            raise ValueError("err must be 'normal' or 'chi2'")
        if abs(self.theta.mu2 - self.snr) > 1e-12:
            raise ValueError("theta distribution variance must equal snr")

    @property
    def label(self) -> str:
        t_lab = "inf" if self.t == math.inf else str(int(self.t))
        return f"{self.theta.kind}/snr={self.snr:g}/T={t_lab}/{self.err}/n={self.n}"

    def simulate(self, rng: np.random.Generator):
        theta = draw_theta(self.theta, self.n, rng)
        y, sigma = simulate_panel_errors(theta, self.t, self.err, rng)
        return y, sigma, theta, None


def simulate_panel_errors(theta: np.ndarray, t: float, err: str, rng: np.random.Generator):
    """Unit means and estimated standard errors for given effects."""
    n = theta.size
    if t == math.inf:
        return theta + rng.standard_normal(n), np.ones(n)
    t = int(t)
    if err == "normal":
        u = rng.standard_normal((n, t)) * math.sqrt(t)
    else:
        # chi-squared(3) shifted to mean zero, scaled to variance t
        u = (rng.chisquare(3, (n, t)) - 3.0) * math.sqrt(t / 6.0)
    w = theta[:, None] + u
    y = w.mean(axis=1)
    sigma2 = np.sum((w - y[:, None]) ** 2, axis=1) / (t * (t - 1))
    return y, np.sqrt(sigma2)


def simulate_panel(design: PanelDesign, rng: np.random.Generator):
    """(y, sigma_hat, theta) for one draw of the design."""
    y, sigma, theta, _ = design.simulate(rng)
    return y, sigma, theta


@dataclass(frozen=True)
class HeteroskedasticDesign:
    """Design calibrated to a table of (estimate, standard error) pairs.

    Effects and noise scales are resampled with replacement from the table;
    effects are recentered and rescaled so the average squared effect-to-
    noise ratio matches ``snr``, using the moment-matching constant computed
    from the table itself.  Moment estimation downstream uses precision
    weights for this design.
    """

    theta_hat: tuple[float, ...]
    se: tuple[float, ...]
    snr: float
    n: int | None = None

    def __post_init__(self):
        th = tuple(float(v) for v in self.theta_hat)
        se = tuple(float(v) for v in self.se)
        if len(th) != len(se) or len(th) < 2:
            raise ValueError("need at least two (theta_hat, se) pairs")
        if any(s <= 0 for s in se):
            raise ValueError("standard errors must be positive")
        object.__setattr__(self, "theta_hat", th)
        object.__setattr__(self, "se", se)
        object.__setattr__(self, "n", self.n or len(th))

    @property
    def label(self) -> str:
        return f"heteroskedastic/snr={self.snr:g}/n={self.n}"

    @property
    def matching_constant(self) -> float:
        th = np.asarray(self.theta_hat)
        se = np.asarray(self.se)
        return float(np.mean((th - th.mean()) ** 2) * np.mean(se**-2.0))

    def simulate(self, rng: np.random.Generator):
        th = np.asarray(self.theta_hat)
        se = np.asarray(self.se)
        bar = th.mean()
        tilde = rng.choice(th, self.n, replace=True)
        sigma = rng.choice(se, self.n, replace=True)
        theta = bar + math.sqrt(self.snr / self.matching_constant) * (tilde - bar)
        y = theta + sigma * rng.standard_normal(self.n)
        return y, sigma, theta, sigma**-2.0


def load_calibration_csv(path: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Read the (theta_hat, se) columns for the heteroskedastic design."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or not {"theta_hat", "se"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: need columns theta_hat, se")
        th, se = [], []
        for line, row in enumerate(reader, start=2):
            try:
                th.append(float(row["theta_hat"]))
                se.append(float(row["se"]))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad number on line {line}") from exc
    return tuple(th), tuple(se)


# ---------------------------------------------------------------------------
# study runner


@dataclass(frozen=True)
class ReportRow:
    design: str
    design_index: int
    method: str
    coverage: float
    coverage_se: float
    avg_length: float
    rel_length: float
    reps: int
    n: int


@dataclass(frozen=True)
class CoverageReport:
    rows: tuple[ReportRow, ...]
    master_seed: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# master_seed={self.master_seed}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            [
                "design",
                "design_index",
                "method",
                "coverage",
                "coverage_se",
                "avg_length",
                "rel_length",
                "reps",
                "n",
            ]
        )
        for r in self.rows:
            writer.writerow(
                [
                    r.design,
                    r.design_index,
                    r.method,
                    repr(r.coverage),
                    repr(r.coverage_se),
                    repr(r.avg_length),
                    repr(r.rel_length),
                    r.reps,
                    r.n,
                ]
            )
        return buf.getvalue()

    def row(self, design_index: int, method: str) -> ReportRow:
        for r in self.rows:
            if r.design_index == design_index and r.method == method:
                return r
        raise KeyError((design_index, method))


def _rep_rng(master_seed: int, design_index: int, rep: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(master_seed, spawn_key=(design_index, rep)))
    )


def _simulate_rep(args):
    design, design_index, rep, master_seed = args
    rng = _rep_rng(master_seed, design_index, rep)
    y, sigma, theta, omega = design.simulate(rng)
    n = y.size
    if omega is None:
        omega = np.full(n, 1.0 / n)
    omega = omega / omega.sum()
    delta = float(omega @ y)
    resid = y - delta
    mu2_uc = float(omega @ (resid**2 - sigma**2))
    mu4_uc = float(omega @ (resid**4 - 6.0 * sigma**2 * resid**2 + 3.0 * sigma**4))
    mu2_floor = 2.0 * float(np.sum(omega**2 * sigma**4)) / float(omega @ sigma**2)
    mu2_hat = max(mu2_uc, mu2_floor)
    kappa_floor = 1.0 + 32.0 * float(np.sum(omega**2 * sigma**8)) / (
        mu2_hat**2 * float(omega @ sigma**4)
    )
    kappa_hat = max(mu4_uc / mu2_hat**2, kappa_floor)
    return rep, y, sigma, theta, delta, mu2_hat, kappa_hat


def _batch_critical_values(m2: np.ndarray, kappa: np.ndarray | None, alpha: float) -> np.ndarray:
    """Critical values for a flat array of units, deduplicated on rounded keys."""
    key2 = np.round(m2, 6)
    if kappa is None:
        uniq, inv = np.unique(key2, return_inverse=True)
        chi = wc.critical_values(uniq, kappa=None, alpha=alpha)
    else:
        pairs = np.column_stack([key2, np.round(kappa, 6)])
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        chi = wc.critical_values(uniq[:, 0], kappa=uniq[:, 1], alpha=alpha)
    return chi[inv.reshape(-1)]


def _method_coverage(results, method, oracle, alpha, reps):
    """Per-rep average coverage and length arrays for one method."""
    z = float(ndtri(1.0 - alpha / 2.0))
    base = method[len("oracle_"):] if method.startswith("oracle_") else method
    use_oracle = method.startswith("oracle_")
    cov = np.empty(reps)
    length = np.empty(reps)

    chi_flat = None
    if base in ("robust_mu2_kappa", "robust_mu2"):
        m2_parts, kap_parts = [], []
        for _, y, sigma, theta, delta, mu2_hat, kappa_hat in results:
            mu2, kappa = oracle if use_oracle else (mu2_hat, kappa_hat)
            sig = np.ones_like(sigma) if use_oracle else sigma
            m2_parts.append(sig**2 / mu2)
            kap_parts.append(np.full(y.size, kappa))
        m2_flat = np.concatenate(m2_parts)
        kap_flat = np.concatenate(kap_parts) if base == "robust_mu2_kappa" else None
        chi_flat = _batch_critical_values(m2_flat, kap_flat, alpha)

    offset = 0
    for rep, y, sigma, theta, delta, mu2_hat, kappa_hat in results:
        mu2, _ = oracle if use_oracle else (mu2_hat, kappa_hat)
        sig = np.ones_like(sigma) if use_oracle else sigma
        if base == "unshrunk":
            center, half = y, z * sig
        else:
            w = mu2 / (mu2 + sig**2)
            center = delta + w * (y - delta)
            if base == "parametric":
                half = z * np.sqrt(w) * sig
            else:
                chi = chi_flat[offset : offset + y.size]
                half = chi * w * sig
        offset += y.size
        cov[rep] = np.mean(np.abs(theta - center) <= half)
        length[rep] = np.mean(2.0 * half)
    return cov, length


def run_study(
    designs: Sequence,
    methods: Sequence[str] = SIM_METHODS,
    reps: int = 1000,
    workers: int = 1,
    master_seed: int = 0,
    alpha: float = 0.05,
) -> CoverageReport:
    """Coverage and length of each method on each design.

    Average coverage and average length are means over units and
    replications; relative length is against the oracle robust interval
    using both moment constraints.  The replication streams are keyed by
    (master_seed, design index, rep), so the report does not depend on
    ``workers``.
    """
    for m in methods:
        if m not in SIM_METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {SIM_METHODS}")
    rows = []
    for d_idx, design in enumerate(designs):
        tasks = [(design, d_idx, r, master_seed) for r in range(reps)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_simulate_rep, tasks, chunksize=max(1, reps // (4 * workers))))
        else:
            results = [_simulate_rep(t) for t in tasks]
        results.sort(key=lambda r: r[0])
        oracle = design.theta.moments() if isinstance(design, PanelDesign) else None
        per_method: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        wanted = [m for m in dict.fromkeys([*methods, _ORACLE_BASELINE]) if oracle or not m.startswith("oracle_")]
        for method in wanted:
            per_method[method] = _method_coverage(results, method, oracle, alpha, reps)
        base_len = (
            float(np.mean(per_method[_ORACLE_BASELINE][1]))
            if _ORACLE_BASELINE in per_method
            else math.nan
        )
        for method in methods:
            if method not in per_method:
                continue
            cov, length = per_method[method]
            cov_se = (
                float(np.std(cov, ddof=1) / math.sqrt(reps)) if reps > 1 else math.nan
            )
            rows.append(
                ReportRow(
                    design=design.label,
                    design_index=d_idx,
                    method=method,
                    coverage=float(np.mean(cov)),
                    coverage_se=cov_se,
                    avg_length=float(np.mean(length)),
                    rel_length=float(np.mean(length) / base_len) if base_len else math.nan,
                    reps=reps,
                    n=design.n,
                )
            )
    return CoverageReport(rows=tuple(rows), master_seed=master_seed)
