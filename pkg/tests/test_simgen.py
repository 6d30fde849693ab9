import numpy as np
import pytest
from numpy.testing import assert_allclose

from jensen_effect.errors import InvalidArgumentError
from jensen_effect.fsim import fit_fsim, functional_design
from jensen_effect.schemas import CurvatureReport, LambdaGridSpec, LinkSpec, PowerPoint, StudyConfig
from jensen_effect.simgen import (
    LINKS,
    curvature_demo,
    fsim_bases,
    gen_appendixA_data,
    gen_fsim_data,
    gen_sim_data,
    get_link,
    power_frame,
    power_trend_slope,
    rase_k,
    resolve_grids,
    rse,
    run_power_curve,
    run_rejection_study,
    sigma_profiles,
)

SMALL_T1_GRID = LambdaGridSpec(log10_min=-6, log10_max=2, n_points=5)


class TestLinks:
    @pytest.mark.parametrize("name", sorted(LINKS))
    def test_derivatives_match_finite_differences(self, name):
        link = get_link(LinkSpec(name=name, eta=0.7))
        s = np.linspace(-1.0, 1.0, 9)
        h = 1e-5
        for k in (1, 2):
            fd = (link.derivative(s + h, k - 1) - link.derivative(s - h, k - 1)) / (2 * h)
            assert_allclose(link.derivative(s, k), fd, atol=1e-6)

    def test_power_family_at_zero_eta_is_linear(self):
        link = get_link(LinkSpec(name="power_family", eta=0.0))
        s = np.array([-0.5, 0.0, 1.5])
        assert_allclose(link.value(s), s)


class TestGenerators:
    def test_sim_design_is_deterministic(self):
        a = gen_sim_data(50, LinkSpec(name="exp_pos"), 0.1, seed=4)
        b = gen_sim_data(50, LinkSpec(name="exp_pos"), 0.1, seed=4)
        assert_allclose(a.Y, b.Y)
        assert a.X.shape == (50, 5)
        assert_allclose(a.E, a.X @ a.beta)
        assert np.abs(a.E).max() <= np.sqrt(5) / 2

    def test_noiseless_sim_design(self):
        data = gen_sim_data(30, LinkSpec(name="neg_square"), 0.0, seed=1)
        assert_allclose(data.Y, -data.E ** 2)

    def test_fsim_index_uses_the_functional_design(self):
        gen = gen_fsim_data(40, LinkSpec(name="linear"), 0.0, seed=2)
        assert_allclose(gen.true_index, functional_design(gen.dataset, gen.beta_basis) @ gen.c_true, atol=1e-12)
        assert_allclose(gen.dataset.Y, gen.true_index, atol=1e-12)
        assert np.linalg.norm(gen.c_true) == pytest.approx(1.0)

    def test_small_fsim_sample_has_no_dataset(self):
        gen = gen_fsim_data(5, LinkSpec(name="linear"), 0.1, seed=0)
        assert gen.dataset is None
        assert gen.true_index.shape == (5,)

    def test_appendix_noise_is_a_tenth_of_signal_variance(self):
        gen = gen_appendixA_data(60, LinkSpec(name="exp_neg"), seed=3)
        assert gen.noise_sd ** 2 == pytest.approx(0.1 * np.var(np.exp(-gen.true_index)))
        assert np.linalg.norm(gen.c_true) == pytest.approx(1.0)
        assert gen.dataset.X.shape == (60, 201)

    @pytest.mark.parametrize("i", [1, 13, 25])
    def test_fsim_score_variances_decay(self, i):
        gen = gen_fsim_data(10_000, LinkSpec(name="linear"), 0.0, seed=0)
        expected = np.exp(-(i - 1) / 12.0)
        assert abs(np.var(gen.scores[:, i - 1]) - expected) < 0.1 * expected

    def test_appendix_curves_average_to_the_identity(self):
        gen = gen_appendixA_data(10_000, LinkSpec(name="linear"), seed=0)
        assert np.abs(gen.dataset.X.mean(axis=0) - gen.dataset.t_grid).max() < 0.05


class TestStudies:
    def test_default_grids(self):
        t1, none = resolve_grids(StudyConfig(design="sim", link=LinkSpec(name="linear")))
        assert none is None
        assert len(t1) == 41
        assert t1[0] == pytest.approx(1e-8) and t1[-1] == pytest.approx(1e4)
        lg, lb = resolve_grids(StudyConfig(design="fsim", link=LinkSpec(name="linear")))
        assert len(lg) == 5 and len(lb) == 5
        assert lg[0] == pytest.approx(1e-6) and lb[-1] == pytest.approx(1e6)

    def test_rejection_study_is_reproducible(self):
        cfg = StudyConfig(design="sim", n=50, link=LinkSpec(name="exp_pos"), n_reps=3,
                          n_null_draws=1000, lambda_grid=SMALL_T1_GRID, base_seed=10)
        first = run_rejection_study(cfg)
        second = run_rejection_study(cfg)
        assert [o.seed for o in first.per_seed] == [10, 11, 12]
        assert first.model_dump() == second.model_dump()
        assert first.rate == first.n_rejected / 3

    def test_power_curve_grid_checks(self):
        with pytest.raises(InvalidArgumentError):
            run_power_curve("sim", [], 50, 0.1, 2, 0)
        with pytest.raises(InvalidArgumentError):
            run_power_curve("sim", [0.6, 0.3], 50, 0.1, 2, 0)

    def test_power_curve_uses_common_seeds(self):
        points = run_power_curve("sim", [0.0, 3.0], 60, 0.1, 2, 0, n_null_draws=1000,
                                 lambda_grid=SMALL_T1_GRID)
        frame = power_frame(points)
        assert list(frame.columns) == ["eta", "rate", "n_reps", "n", "sigma"]
        assert list(frame["eta"]) == [0.0, 3.0]

    def test_trend_slope_sign(self):
        rising = [PowerPoint(eta=e, rate=r, n_reps=100, n=100, sigma=0.1)
                  for e, r in [(0.0, 0.05), (0.5, 0.3), (1.0, 0.8)]]
        assert power_trend_slope(rising) > 0

    def test_sigma_profiles(self):
        profiles = sigma_profiles(50, LinkSpec(name="exp_pos"), 0.1, base_seed=0, n_profiles=2,
                                  lambda_grid=SMALL_T1_GRID)
        assert [p["seed"] for p in profiles] == [0, 1]
        assert len(profiles[0]["sigma"]) == 5

    def test_noiseless_line_is_never_rejected(self):
        cfg = StudyConfig(design="sim", n=50, sigma=0.0, link=LinkSpec(name="linear"), n_reps=3,
                          n_null_draws=1000, lambda_grid=LambdaGridSpec(log10_min=6, log10_max=8, n_points=3))
        result = run_rejection_study(cfg)
        assert result.n_failed == 0
        assert result.rate == 0.0

    def test_sim_profiles_name_their_design(self):
        profiles = sigma_profiles(50, LinkSpec(name="exp_pos"), 0.1, base_seed=0, n_profiles=1,
                                  lambda_grid=SMALL_T1_GRID)
        assert profiles[0]["design"] == "sim"

    def test_curvature_report_survives_serialization(self):
        report = curvature_demo(seed=1, n=100, lambda_g=[1e-4], lambda_beta=[1e-4])
        assert CurvatureReport.model_validate_json(report.model_dump_json()) == report
        assert [f.init for f in report.fits] == ["truth", "equal"]
        for fit in report.fits:
            assert fit.c_norm == pytest.approx(1.0, abs=1e-12)


class TestMetrics:
    def test_rse_ignores_sign(self):
        t = np.linspace(0.0, 1.0, 101)
        beta = np.sin(2 * np.pi * t)
        assert rse(-beta, beta, t) == 0.0
        assert rse(beta + 0.1, beta, t) == pytest.approx(0.1)

    def test_rase_orders(self, linear_fsim, small_bases):
        fit = fit_fsim(linear_fsim.dataset, small_bases, 1e-4, 1e-6)
        link = get_link(LinkSpec(name="linear"))
        assert rase_k(fit, link, linear_fsim.true_index, 0) < 0.2
        with pytest.raises(InvalidArgumentError):
            rase_k(fit, link, linear_fsim.true_index, 3)

    def test_fsim_bases_by_design(self):
        assert fsim_bases("fsim").beta.n_basis == 25
        assert fsim_bases("appendixA").beta.n_basis == 9


@pytest.mark.slow
class TestAcceptance:
    @pytest.mark.parametrize("link", ["exp_pos", "neg_square"])
    def test_known_index_power(self, link):
        cfg = StudyConfig(design="sim", link=LinkSpec(name=link), n_reps=200)
        assert run_rejection_study(cfg).rate >= 0.95

    def test_known_index_size(self):
        cfg = StudyConfig(design="sim", link=LinkSpec(name="linear"), n_reps=200)
        assert 0.01 <= run_rejection_study(cfg).rate <= 0.12

    @pytest.mark.parametrize("link", ["exp_pos", "neg_square"])
    def test_functional_power(self, link):
        cfg = StudyConfig(design="fsim", link=LinkSpec(name=link), n_reps=100, jobs=4)
        assert run_rejection_study(cfg).rate >= 0.95

    def test_functional_size(self):
        cfg = StudyConfig(design="fsim", link=LinkSpec(name="linear"), n_reps=100, jobs=4)
        assert 0.01 <= run_rejection_study(cfg).rate <= 0.16

    def test_power_curve(self):
        etas = [0.0, 0.3, 0.6, 0.9, 1.2]
        low = [p.rate for p in run_power_curve("sim", etas, 100, 0.1, 200, 0, jobs=4)]
        high = [p.rate for p in run_power_curve("sim", etas, 100, 0.2, 200, 0, jobs=4)]
        drops = [a - b for a, b in zip(low, low[1:]) if b < a]
        assert len(drops) <= 1 and all(d <= 0.05 for d in drops)
        assert low[-1] - low[0] >= 0.5
        assert high[3] <= low[3] + 0.05

    def test_curvature_instability(self):
        report = curvature_demo(seed=0)
        truth = report.fits[0]
        assert truth.rase[2] > 10 * truth.rase[1]
        assert report.sup_g2_rel_diff > 0.5
        assert report.rase0_rel_diff < 0.2
