import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq, minimize_scalar
from scipy.stats import gamma as gamma_dist
from scipy.stats import poisson as poisson_dist

from shrinkci import momentlp as mlp
from shrinkci import nonlinear as nl
from shrinkci import worstcase as wc


class TestSoftThreshold:
    def test_dead_zone(self):
        assert nl.soft_threshold(0.9, 2.0) == 0.0  # threshold = 1
        assert nl.soft_threshold(-1.0, 2.0) == 0.0

    def test_unit_excess(self):
        thr = math.sqrt(2.0 / 0.5)
        assert nl.soft_threshold(thr + 1.0, 0.5) == pytest.approx(1.0, rel=1e-14)
        assert nl.soft_threshold(-(thr + 1.0), 0.5) == pytest.approx(-1.0, rel=1e-14)

    @pytest.mark.parametrize("y", [-3.0, -1.2, 0.4, 1.7, 4.0])
    def test_equals_posterior_mode(self, y):
        # numeric maximization of the log posterior under the Laplace prior
        mu2, sigma = 0.8, 1.0
        lam = math.sqrt(2.0 / mu2)
        neg_log_post = lambda t: 0.5 * ((y - t) / sigma) ** 2 + lam * abs(t)
        res = minimize_scalar(neg_log_post, bounds=(-10, 10), method="bounded",
                              options={"xatol": 1e-10})
        assert nl.soft_threshold(y, mu2) == pytest.approx(res.x, abs=1e-6)


class TestHpdInterval:
    def test_closed_form_matches_level_set_bisection(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 10:
            mu2 = rng.uniform(0.1, 2.0)
            sigma = rng.uniform(0.5, 1.5)
            y = rng.uniform(-4.0, 4.0)
            chi = rng.uniform(0.5, 3.0)
            cfg = nl.SoftThresholdConfig(mu2=mu2, sigma=sigma)
            if nl._hpd_or_none(y, cfg, chi) is None:
                continue  # the level set can be empty; draw another case
            checked += 1
            lo, hi = nl.hpd_interval(y, cfg, chi)
            lam = math.sqrt(2.0 / mu2)
            c = float(nl._posterior_log_const(y, cfg))
            level = (
                lambda t: c - t * t / (2 * sigma**2) + y * t / sigma**2 - lam * abs(t) + chi
            )
            # posterior mode: soft threshold at lambda * sigma^2
            mode = math.copysign(max(abs(y) - lam * sigma**2, 0.0), y)
            assert level(mode) > 0
            lo_ref = brentq(level, mode - 40 * sigma, mode, xtol=1e-12)
            hi_ref = brentq(level, mode, mode + 40 * sigma, xtol=1e-12)
            assert lo == pytest.approx(lo_ref, abs=1e-6)
            assert hi == pytest.approx(hi_ref, abs=1e-6)
            assert lo <= mode <= hi

    def test_contains_estimate_at_chi_zero_when_nonempty(self):
        # tight prior keeps the posterior-mode density above the chi = 0
        # level for these observations
        cfg = nl.SoftThresholdConfig(mu2=0.05, sigma=1.0)
        for y in (-2.0, 0.0, 1.5, 4.0):
            lo, hi = nl.hpd_interval(y, cfg, 0.0)
            assert lo <= nl.soft_threshold(y, cfg.mu2) <= hi

    def test_empty_set_raises(self):
        # diffuse prior, observation at zero: the posterior density never
        # reaches 1, so the level set at chi = 0 is empty
        cfg = nl.SoftThresholdConfig(mu2=1.0, sigma=1.0)
        with pytest.raises(nl.EmptyHpdError):
            nl.hpd_interval(0.0, cfg, 0.0)

    def test_widens_in_chi(self):
        cfg = nl.SoftThresholdConfig(mu2=0.5, sigma=1.0)
        prev = None
        for chi in (0.5, 1.0, 2.0, 4.0):
            lo, hi = nl.hpd_interval(1.2, cfg, chi)
            if prev is not None:
                assert lo <= prev[0] + 1e-12 and hi >= prev[1] - 1e-12
            prev = (lo, hi)


class TestSoftThresholdNoncoverage:
    def test_default_grids_and_truncation(self):
        cfg = nl.SoftThresholdConfig(mu2=0.2)
        assert len(cfg.theta_grid) == 500
        assert cfg.theta_grid[0] == -10.0 and cfg.theta_grid[-1] == 10.0
        assert cfg.y_truncation == (-10.0, 10.0)

    def test_values_are_probabilities_and_monotone_in_chi(self):
        cfg = nl.SoftThresholdConfig(mu2=0.2)
        grid = np.asarray(cfg.theta_grid)[::25]
        r1 = nl.soft_threshold_noncoverage(grid, cfg, 1.0)
        r2 = nl.soft_threshold_noncoverage(grid, cfg, 2.5)
        assert np.all((0 <= r1) & (r1 <= 1))
        assert np.all(r2 <= r1 + 1e-12)

    def test_step_halving_stability(self):
        # the y-scan segment integration is insensitive to grid refinement
        cfg = nl.SoftThresholdConfig(mu2=0.3)
        theta = np.array([-2.0, -0.3, 0.0, 0.7, 2.5])
        base = nl.soft_threshold_noncoverage(theta, cfg, 1.5)
        fine = _noncoverage_refined(theta, cfg, 1.5, points=8001)
        np.testing.assert_allclose(base, fine, atol=1e-6)

    def test_laplace_calibration_and_lengths(self):
        cfg = nl.SoftThresholdConfig(mu2=0.2, sigma=1.0, alpha=0.05)
        chi_r, chi_p = nl.soft_threshold_ebci(cfg)
        assert chi_r > chi_p  # worst case dominates the baseline
        avg = nl._laplace_average_noncoverage(cfg, chi_p)
        assert avg == pytest.approx(0.05, abs=2e-4)
        unshrunk = 2 * 1.959963984540054
        assert nl.soft_threshold_expected_length(cfg, chi_p) <= 0.51 * unshrunk
        # robust chi makes the grid worst case exactly alpha (within grid tol)
        worst = nl.soft_threshold_worst_noncoverage(cfg, chi_r)
        assert worst == pytest.approx(0.05, abs=2e-3)


def _noncoverage_refined(theta, cfg, chi, points):
    out = np.empty(len(theta))
    y_lo, y_hi = cfg.y_truncation
    ys = np.linspace(y_lo, y_hi, points)
    margin = nl._covered_margin(np.asarray(theta)[:, None], ys[None, :], cfg, chi)
    for i, th in enumerate(theta):
        out[i] = 1.0 - nl._covered_mass(float(th), ys, margin[i], cfg, chi)
    return out


class TestPoissonInterval:
    def test_chi_zero_is_credible_interval(self):
        cfg = nl.PoissonConfig(shape=2.0, scale=0.7)
        for y in (0, 1, 4, 9):
            lo, hi = nl.poisson_interval(y, cfg, 0.0)
            post = gamma_dist(a=cfg.shape + y, scale=cfg.scale / (1 + cfg.scale))
            assert lo == pytest.approx(post.ppf(0.025), abs=1e-10)
            assert hi == pytest.approx(post.ppf(0.975), abs=1e-10)

    def test_large_chi_is_garwood(self):
        cfg = nl.PoissonConfig(shape=1.0, scale=1.0)
        for y in (0, 3, 12):
            lo, hi = nl.poisson_interval(y, cfg, 50.0)
            glo, ghi = nl.garwood_interval(y, 0.05)
            assert lo == pytest.approx(glo, abs=1e-6)
            assert hi == pytest.approx(ghi, abs=1e-6)

    def test_width_nondecreasing_in_chi(self):
        cfg = nl.PoissonConfig(shape=1.0, scale=0.5)
        for y in (0, 2, 7):
            widths = []
            for chi in (0.0, 0.5, 1.0, 2.0, 5.0):
                lo, hi = nl.poisson_interval(y, cfg, chi)
                widths.append(hi - lo)
            assert np.all(np.diff(widths) >= -1e-12)


class TestGarwood:
    def test_lower_endpoint_zero_at_zero_count(self):
        lo, hi = nl.garwood_interval(0, 0.05)
        assert lo == 0.0 and hi > 0

    @pytest.mark.parametrize("theta", [0.1, 0.5, 1.0, 5.0])
    def test_pointwise_coverage_by_exact_summation(self, theta):
        ys = np.arange(0, 201)
        pmf = poisson_dist.pmf(ys, theta)
        cover = 0.0
        for y, p in zip(ys, pmf):
            lo, hi = nl.garwood_interval(int(y), 0.05)
            if lo <= theta <= hi:
                cover += p
        assert cover >= 0.95

    def test_upper_endpoint_increasing(self):
        his = [nl.garwood_interval(y, 0.05)[1] for y in range(30)]
        assert np.all(np.diff(his) > 0)


class TestPoissonEbci:
    def test_baseline_moment_identities(self):
        # exponential baseline: E[theta] = scale, E[theta^2] = 2 scale^2
        cfg = nl.PoissonConfig(shape=1.0, scale=0.4)
        assert cfg.shape * cfg.scale == pytest.approx(0.4)
        assert cfg.shape * (cfg.shape + 1) * cfg.scale**2 == pytest.approx(2 * 0.4**2)

    def test_length_gain_and_coverage_under_exponential_baseline(self):
        cfg = nl.PoissonConfig(shape=1.0, scale=0.3, alpha=0.05)
        chi = nl.poisson_ebci(cfg)
        ys = np.arange(0, 200)
        lam = cfg.scale
        marginal = (1 / (1 + lam)) * (lam / (1 + lam)) ** ys  # geometric
        robust = np.array([np.diff(nl.poisson_interval(int(y), cfg, chi)) for y in ys]).ravel()
        garwood = np.array([np.diff(nl.garwood_interval(int(y), 0.05)) for y in ys]).ravel()
        assert marginal @ robust <= 0.55 * (marginal @ garwood)
        # coverage under the baseline by exact summation over theta grid
        grid = np.asarray(cfg.theta_grid)
        noncov = nl.poisson_noncoverage(grid, cfg, chi)
        weights = gamma_dist(a=1.0, scale=lam).pdf(grid)
        weights /= weights.sum()
        assert weights @ noncov <= 0.05 + 1e-3

    def test_infeasible_moments_rejected(self):
        cfg = nl.PoissonConfig(shape=1.0, scale=0.3)
        with pytest.raises(mlp.InfeasibleMomentsError):
            nl.poisson_ebci(cfg, mean=1.0, second_moment=0.5)


class TestSelectionNoncoverage:
    def test_infinite_window_reduces_to_unconditional(self):
        for theta in (-2.0, 0.0, 1.0, 3.0):
            for w in (0.3, 0.5, 0.8):
                val = nl.selection_noncoverage(theta, 2.0, nl.SelectionWindow(), w)
                b = (1 - 1 / w) * theta
                assert val == pytest.approx(float(wc.noncoverage(b, 2.0)), abs=1e-12)

    @given(
        theta=st.floats(-6, 6),
        chi=st.floats(0, 8),
        lo=st.floats(-4, 1),
        width=st.floats(0.5, 8),
        w=st.floats(0.05, 0.95),
    )
    @settings(max_examples=300, deadline=None)
    def test_fuzz_values_in_unit_interval(self, theta, chi, lo, width, w):
        win = nl.SelectionWindow(lo, lo + width)
        val = nl.selection_noncoverage(theta, chi, win, w)
        assert 0.0 <= val <= 1.0

    def test_degenerate_selection_probability(self):
        win = nl.SelectionWindow(40.0, 41.0)
        assert nl.selection_noncoverage(0.0, 2.0, win, 0.5) == 1.0

    def test_against_monte_carlo_truncated_normal(self):
        theta, w, sigma = 1.0, 0.5, 1.0
        chi = 2.0
        win = nl.SelectionWindow(0.0, math.inf)
        rng = np.random.default_rng(7)
        n = 1_000_000
        y = theta + sigma * rng.standard_normal(n)
        sel = y > 0
        covered = np.abs(w * y[sel] - theta) <= chi * w * sigma
        mc = 1.0 - covered.mean()
        se = covered.std() / math.sqrt(sel.sum())
        val = nl.selection_noncoverage(theta, chi, win, w, sigma)
        assert val == pytest.approx(mc, abs=3 * se)


class TestSelectionSecondMoment:
    def test_recovers_gaussian_truth(self):
        mu2 = 1.0
        rng = np.random.default_rng(3)
        ys = rng.normal(0, math.sqrt(1 + mu2), 100_000)
        est, se = nl.selection_second_moment(ys, return_se=True)
        assert abs(est - mu2) <= 3 * se

    def test_degenerate_effects_shrink_to_zero(self):
        ys = np.random.default_rng(5).normal(0, 1, 50_000)
        est = nl.selection_second_moment(ys)
        assert 1e-8 <= est <= 0.06

    def test_windowed_matches_quadrature_oracle(self):
        # E[theta^2 | Y > 0] for theta ~ N(0,1), sigma = 1, by quadrature
        num = quad(
            lambda t: t * t * math.exp(-t * t / 2) / math.sqrt(2 * math.pi)
            * (1 - 0.5 * math.erfc(t / math.sqrt(2))),
            -12, 12,
        )[0]
        den = quad(
            lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi)
            * (1 - 0.5 * math.erfc(t / math.sqrt(2))),
            -12, 12,
        )[0]
        oracle = num / den
        rng = np.random.default_rng(11)
        theta = rng.normal(0, 1, 200_000)
        ys = theta + rng.standard_normal(200_000)
        est, se = nl.selection_second_moment(
            ys, nl.SelectionWindow(0.0, math.inf), return_se=True
        )
        assert est == pytest.approx(oracle, abs=max(3 * se, 0.02))

    def test_too_few_selected_rejected(self):
        with pytest.raises(ValueError):
            nl.selection_second_moment(np.zeros(10) + 1.0)


class TestSelectionCriticalValue:
    def test_infinite_window_reproduces_baseline(self):
        w, sigma, mu2, alpha = 0.5, 1.0, 1.0, 0.05
        base = wc._cva_scalar(sigma**2 / mu2, None, alpha)
        t0 = wc.majorant_kink(base)
        scale = abs(1 - 1 / w) / sigma
        anchor = math.sqrt(t0) / scale
        grid = np.unique(np.concatenate([np.linspace(-8, 8, 3001), [-anchor, 0.0, anchor]]))
        chi = nl.selection_critical_value(mu2, nl.SelectionWindow(), w, sigma, alpha, grid)
        assert chi == pytest.approx(base, abs=1e-4)

    def test_widening_window_approaches_baseline_monotonically(self):
        w, sigma, mu2, alpha = 0.5, 1.0, 1.0, 0.05
        base = wc._cva_scalar(sigma**2 / mu2, None, alpha)
        grid = np.linspace(-8, 8, 2001)
        gaps = []
        for c in (0.5, 1.0, 2.0, 4.0, 6.0, 100.0):
            chi = nl.selection_critical_value(
                mu2, nl.SelectionWindow(-c, c), w, sigma, alpha, grid
            )
            gaps.append(abs(chi - base))
        assert np.all(np.diff(gaps) <= 1e-6)
        assert gaps[-1] <= 1e-3

    def test_narrow_one_sided_window_closed_form(self):
        # with selection to Y > 0 the binding effects sit at -sqrt(mu2/alpha):
        # chi must reach them, so chi ~ sqrt(mu2/alpha) / w
        w, mu2, alpha = 0.5, 1.0, 0.05
        grid = np.linspace(-8, 8, 4001)
        chi = nl.selection_critical_value(
            mu2, nl.SelectionWindow(0.0, math.inf), w, 1.0, alpha, grid
        )
        assert chi == pytest.approx(math.sqrt(mu2 / alpha) / w, abs=0.02)

    def test_simulated_conditional_coverage_two_point_design(self):
        # theta = +-1 with equal probability, select Y > 0
        a, w, sigma, alpha = 1.0, None, 1.0, 0.05
        mu2 = a * a
        w = mu2 / (mu2 + sigma**2)
        win = nl.SelectionWindow(0.0, math.inf)
        grid = np.linspace(-8, 8, 2001)
        chi = nl.selection_critical_value(mu2, win, w, sigma, alpha, grid)
        rng = np.random.default_rng(13)
        reps, n = 2000, 100
        hits = []
        for _ in range(reps):
            theta = rng.choice([-a, a], n)
            y = theta + sigma * rng.standard_normal(n)
            sel = y > 0
            if not sel.any():
                continue
            covered = np.abs(w * y[sel] - theta[sel]) <= chi * w * sigma
            hits.append(covered.mean())
        assert np.mean(hits) >= 0.94
