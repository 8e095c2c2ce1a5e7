import numpy as np
import pytest

from uatprecode import adiff, channels as ch, problems as pr

LN2 = np.log(2.0)


def make_cfg(n_t=4, n_rf=3, k=2, gamma=None):
    gamma = gamma or tuple([1.0] * k)
    return pr.PrecodingConfig(n_t=n_t, n_rf=n_rf, k=k, gamma=gamma)


def random_pair(cfg, rng, project=True):
    pair = pr.PrecoderPair(
        phases=rng.uniform(-np.pi, np.pi, (cfg.n_t, cfg.n_rf)),
        w_bb=rng.standard_normal((cfg.n_rf, cfg.k))
        + 1j * rng.standard_normal((cfg.n_rf, cfg.k)),
    )
    return pr.project_power(cfg, pair) if project else pair


class TestRates:
    def test_single_user_siso(self):
        cfg = pr.PrecodingConfig(n_t=1, n_rf=1, k=1, gamma=(1.0,))
        sample = ch.ChannelSample(h_norm=np.array([[1.0 + 0j]]), snr=1.0)
        pair = pr.PrecoderPair(phases=np.zeros((1, 1)),
                               w_bb=np.array([[1.0 + 0j]]))
        np.testing.assert_allclose(pr.rates(cfg, sample, pair), [1.0], atol=1e-12)

    def test_noise_dominated_limit(self):
        cfg = make_cfg()
        rng = np.random.default_rng(0)
        h = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
        sample = ch.ChannelSample(h_norm=h / np.linalg.norm(h), snr=1e-12)
        pair = random_pair(cfg, rng)
        assert np.all(pr.rates(cfg, sample, pair) < 1e-9)

    def test_orthogonal_users_interference_free(self):
        # users on disjoint antennas, effective beams aligned per user
        cfg = pr.PrecodingConfig(n_t=2, n_rf=2, k=2, gamma=(0.1, 0.1))
        h = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=complex) / np.sqrt(2.0)
        sample = ch.ChannelSample(h_norm=h, snr=5.0)
        # Hadamard analog stage; baseband inverts it so v = I (disjoint beams)
        pair = pr.project_power(cfg, pr.PrecoderPair(
            phases=np.array([[0.0, 0.0], [0.0, np.pi]]),
            w_bb=np.array([[0.5, 0.5], [0.5, -0.5]], dtype=complex)))
        v = pair.effective()
        got = pr.rates(cfg, sample, pair)
        expect = [np.log2(1 + 5.0 * np.abs(np.conj(h[k]) @ v[:, k]) ** 2)
                  for k in range(2)]
        np.testing.assert_allclose(got, expect, atol=1e-10)

    def test_canonical_form_equivalence(self):
        rng = np.random.default_rng(42)
        cfg = make_cfg(n_t=5, n_rf=4, k=3, gamma=(1, 1, 1))
        for _ in range(25):
            h = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
            p_tot = rng.uniform(0.5, 4.0)
            sigma2 = rng.uniform(0.05, 2.0)
            pair = random_pair(cfg, rng, project=False)
            v_raw = pair.effective()
            v_raw *= np.sqrt(p_tot) / np.linalg.norm(v_raw)
            raw = pr.digital_rates(h, v_raw, sigma2)

            sample = ch.normalize_and_attach_snr(h, 10 * np.log10(p_tot / sigma2))
            canon = pr.digital_rates(sample.h_norm, v_raw / np.sqrt(p_tot),
                                     1.0 / sample.snr)
            np.testing.assert_allclose(raw, canon, atol=1e-10, rtol=1e-10)

    def test_tape_rates_match_numpy(self):
        rng = np.random.default_rng(7)
        cfg = make_cfg(n_t=6, n_rf=4, k=3, gamma=(1, 1, 1))
        problem = pr.PrecodingProblem(cfg)
        h = rng.standard_normal((5, 3, 6)) + 1j * rng.standard_normal((5, 3, 6))
        h /= np.linalg.norm(h, axis=(1, 2), keepdims=True)
        snr = rng.uniform(1.0, 10.0, 5)
        phases = rng.uniform(-np.pi, np.pi, (5, 6, 4))
        wbb = rng.standard_normal((5, 4, 3)) + 1j * rng.standard_normal((5, 4, 3))

        rec = adiff.ComputationRecord()
        inp = problem.make_inputs(rec, problem.batch_from_arrays(h, snr))
        y = problem.decode_policy(rec, inp, rec.constant(phases),
                                  rec.constant(wbb.real), rec.constant(wbb.imag))
        got = problem.rates_tensor(rec, inp, y).values

        for i in range(5):
            pair = pr.project_power(cfg, pr.PrecoderPair(phases[i], wbb[i]))
            sample = ch.ChannelSample(h_norm=h[i], snr=snr[i])
            np.testing.assert_allclose(got[i], pr.rates(cfg, sample, pair),
                                       atol=1e-12)


class TestObjectiveConstraints:
    def test_single_user_objective(self):
        cfg = pr.PrecodingConfig(n_t=1, n_rf=1, k=1, gamma=(1.0,))
        sample = ch.ChannelSample(h_norm=np.array([[1.0 + 0j]]), snr=1.0)
        pair = pr.PrecoderPair(phases=np.zeros((1, 1)), w_bb=np.array([[1.0 + 0j]]))
        assert pr.objective_F(cfg, sample, pair) == pytest.approx(-1.0, abs=1e-12)
        np.testing.assert_allclose(pr.constraints_G(cfg, sample, pair), [0.0],
                                   atol=1e-12)

    def test_gap_plus_rate_is_gamma(self):
        rng = np.random.default_rng(1)
        cfg = make_cfg(k=2, gamma=(1.0, 1.5))
        for _ in range(50):
            h = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
            sample = ch.normalize_and_attach_snr(h, rng.uniform(0, 20))
            pair = random_pair(cfg, rng)
            r = pr.rates(cfg, sample, pair)
            g = pr.constraints_G(cfg, sample, pair)
            np.testing.assert_array_equal(g + r, cfg.gamma_array)

    def test_objective_monotone_in_rates(self):
        # adding a user's rate strictly decreases F
        cfg = make_cfg()
        rng = np.random.default_rng(2)
        h = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
        sample = ch.normalize_and_attach_snr(h, 10.0)
        a = random_pair(cfg, rng)
        b = random_pair(cfg, rng)
        fa, fb = pr.objective_F(cfg, sample, a), pr.objective_F(cfg, sample, b)
        ra, rb = pr.rates(cfg, sample, a), pr.rates(cfg, sample, b)
        assert (fa < fb) == (ra.sum() > rb.sum())


class TestProjection:
    def test_scale_factor(self):
        cfg = make_cfg()
        rng = np.random.default_rng(3)
        pair = random_pair(cfg, rng, project=False)
        v = pair.effective()
        pair.w_bb *= 2.0 / np.linalg.norm(v)  # force ||V||_F = 2
        out = pr.project_power(cfg, pair)
        np.testing.assert_allclose(out.w_bb, pair.w_bb / 2.0, rtol=1e-12)

    def test_idempotent(self):
        cfg = make_cfg()
        rng = np.random.default_rng(4)
        once = pr.project_power(cfg, random_pair(cfg, rng, project=False))
        twice = pr.project_power(cfg, once)
        np.testing.assert_allclose(twice.w_bb, once.w_bb, atol=1e-12)
        assert np.linalg.norm(once.effective()) ** 2 == pytest.approx(1.0, abs=1e-9)

    def test_zero_product_rejected(self):
        cfg = make_cfg()
        pair = pr.PrecoderPair(phases=np.zeros((4, 3)),
                               w_bb=np.zeros((3, 2), dtype=complex))
        with pytest.raises(ValueError):
            pr.project_power(cfg, pair)

    def test_unit_modulus_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            phases = rng.uniform(-10, 10, (6, 4))
            assert np.max(np.abs(np.abs(np.exp(1j * phases)) - 1.0)) < 1e-12


class TestToyOracle:
    def test_symmetric_split(self):
        p, lam = pr.toy_optimal(pr.ToyPowerProblem(gains=np.array([1.0, 1.0]),
                                                   budget=2.0))
        np.testing.assert_allclose(p, [1.0, 1.0], atol=1e-12)
        assert lam == pytest.approx(1.0 / (2.0 * LN2))

    def test_dominant_gain_low_budget(self):
        p, _ = pr.toy_optimal(pr.ToyPowerProblem(gains=np.array([10.0, 0.01]),
                                                 budget=0.1))
        np.testing.assert_allclose(p, [0.1, 0.0], atol=1e-12)

    def test_budget_always_exhausted(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            k = int(rng.integers(2, 9))
            prob = pr.ToyPowerProblem(gains=rng.uniform(0.1, 5.0, k),
                                      budget=rng.uniform(0.5, 3.0))
            p, lam = pr.toy_optimal(prob)
            assert p.sum() == pytest.approx(prob.budget, rel=1e-12)
            assert np.all(p >= 0.0) and lam > 0.0

    def test_matches_dense_grid_k3(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            prob = pr.ToyPowerProblem(gains=rng.uniform(0.2, 4.0, 3), budget=1.0)
            p_wf, _ = pr.toy_optimal(prob)
            _, obj_grid = pr.toy_dense_grid(prob, resolution=1e-3)
            assert abs(pr.toy_objective(p_wf, prob.gains) - obj_grid) < 1e-3

    def test_lattice_dp_equals_dense_grid(self):
        # the DP enumerates the same lattice as the dense mesh
        rng = np.random.default_rng(8)
        for k in (2, 3):
            prob = pr.ToyPowerProblem(gains=rng.uniform(0.2, 4.0, k), budget=1.0)
            _, obj_dp = pr.toy_grid_search(prob, resolution=1e-2)
            _, obj_dense = pr.toy_dense_grid(prob, resolution=1e-2)
            assert obj_dp == pytest.approx(obj_dense, abs=1e-12)

    def test_matches_lattice_search_all_k(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            k = int(rng.integers(2, 9))
            prob = pr.ToyPowerProblem(gains=rng.uniform(0.2, 4.0, k), budget=1.0)
            p_wf, _ = pr.toy_optimal(prob)
            _, obj_grid = pr.toy_grid_search(prob, resolution=1e-3)
            assert abs(pr.toy_objective(p_wf, prob.gains) - obj_grid) < 1e-3

    def test_rejects_bad_instances(self):
        with pytest.raises(ValueError):
            pr.ToyPowerProblem(gains=np.array([1.0, -1.0]), budget=1.0)
        with pytest.raises(ValueError):
            pr.ToyPowerProblem(gains=np.array([1.0]), budget=0.0)


class TestEnvelopeGradient:
    def test_symmetric_analytic(self):
        prob = pr.ToyPowerProblem(gains=np.array([1.0, 1.0]), budget=2.0)
        np.testing.assert_allclose(pr.toy_envelope_gradient(prob),
                                   [1.0 / (2 * LN2)] * 2, atol=1e-12)

    def test_inactive_channel_zero_sensitivity(self):
        prob = pr.ToyPowerProblem(gains=np.array([10.0, 0.01]), budget=0.1)
        grad = pr.toy_envelope_gradient(prob)
        assert grad[1] == 0.0 and grad[0] > 0.0

    def test_matches_finite_difference_of_resolved_optimum(self):
        rng = np.random.default_rng(10)
        step = 1e-5
        worst = 0.0
        for _ in range(100):
            k = int(rng.integers(2, 9))
            gains = rng.uniform(0.2, 4.0, k)
            budget = rng.uniform(0.5, 2.0)
            grad = pr.toy_envelope_gradient(pr.ToyPowerProblem(gains, budget))
            for j in range(k):
                up = gains.copy()
                up[j] += step
                down = gains.copy()
                down[j] -= step
                f_up = pr.toy_objective(
                    pr.toy_optimal(pr.ToyPowerProblem(up, budget))[0], up)
                f_down = pr.toy_objective(
                    pr.toy_optimal(pr.ToyPowerProblem(down, budget))[0], down)
                fd = (f_up - f_down) / (2 * step)
                rel = abs(grad[j] - fd) / (abs(fd) + 1e-12)
                worst = max(worst, rel)
        assert worst < 1e-3


class TestToyTapeProblem:
    def test_projection_mode_feasible_by_construction(self):
        rng = np.random.default_rng(11)
        toy = pr.ToyAllocationProblem(k=3, budget=1.0, mode="project")
        rec = adiff.ComputationRecord()
        inp = toy.make_inputs(rec, {"gains": rng.uniform(0.5, 2.0, (6, 3))})
        y = toy.decode_policy(rec, inp, rec.constant(rng.standard_normal((6, 3))))
        np.testing.assert_allclose(y.values.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(y.values >= 0.0)

    def test_multiplier_mode_constraint_sign(self):
        toy = pr.ToyAllocationProblem(k=2, budget=1.0, mode="multiplier")
        rec = adiff.ComputationRecord()
        inp = toy.make_inputs(rec, {"gains": np.ones((1, 2))})
        y = rec.constant([[0.2, 0.3]])
        g = toy.constraints(rec, inp, y)
        np.testing.assert_allclose(g.values, [[-0.5]], atol=1e-12)

    def test_objective_matches_oracle_form(self):
        rng = np.random.default_rng(12)
        toy = pr.ToyAllocationProblem(k=4, budget=1.0, mode="project")
        gains = rng.uniform(0.5, 2.0, (3, 4))
        powers = rng.uniform(0.0, 0.5, (3, 4))
        rec = adiff.ComputationRecord()
        inp = toy.make_inputs(rec, {"gains": gains})
        f = toy.objective(rec, inp, rec.constant(powers))
        expect = [-pr.toy_objective(powers[i], gains[i]) for i in range(3)]
        np.testing.assert_allclose(f.values, expect, atol=1e-12)
