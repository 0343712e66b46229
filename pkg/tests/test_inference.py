import math

import numpy as np
import pytest

from delaytomo.delay_model import LOSS, DelayDistribution, DelaySupport, LinkParams
from delaytomo.inference import (
    EMTrace,
    ZeroLikelihoodError,
    bin_observations,
    brute_force_em_step,
    brute_force_joint,
    brute_force_likelihood,
    doubling_schedule,
    downward_pass,
    em_step,
    joint_marginal,
    log_likelihood,
    observation_likelihood,
    run_em,
    successive_ml,
    upward_pass,
)
from delaytomo.simulator import (
    LOST,
    ObservationSet,
    RawDelays,
    observations_to_raw,
    random_link_params,
    simulate_batch,
    simulate_experiment,
)
from delaytomo.topology import TreeTopology, random_branching_tree, star_tree

from conftest import random_params


def random_instance(rng, max_links=8, max_bins=5, max_loss=0.3):
    tree = random_branching_tree(rng, max_links=max_links)
    bins = int(rng.integers(2, max_bins + 1))
    support = DelaySupport(bins)
    params = random_params(tree, support, rng, max_loss=max_loss)
    return tree, support, params


def random_observation(tree, support, params, rng):
    """Half simulated (always possible), half arbitrary (possibly impossible)."""
    if rng.random() < 0.5:
        return simulate_batch(tree, params, rng)
    obs = {}
    for leaf in tree.leaves:
        if rng.random() < 0.2:
            obs[leaf] = LOSS
        else:
            top = tree.depths[leaf] * (support.bin_count - 1) + 2
            obs[leaf] = int(rng.integers(0, top))
    return obs


class TestUpwardPass:
    def test_single_link_messages(self, single_link_tree):
        sup = DelaySupport(4)
        params = LinkParams(sup, {1: DelayDistribution(sup, [0.4, 0.3, 0.2, 0.05], 0.05)})
        up = upward_pass(single_link_tree, params, {1: 2})
        np.testing.assert_array_equal(up.finite[1], [0, 0, 1, 0])
        assert up.loss[1] == 0.0
        # root's child contribution at R = 0 is theta(y)
        assert up.to_father[1][0] == pytest.approx(0.2)
        assert observation_likelihood(up) == pytest.approx(0.2)

    def test_two_link_chain_convolution(self, two_link_chain):
        sup = DelaySupport(2)
        half = DelayDistribution(sup, [0.5, 0.5])
        params = LinkParams(sup, {1: half, 2: half})
        up = upward_pass(two_link_chain, params, {2: 1})
        assert observation_likelihood(up) == pytest.approx(0.5)

    def test_lost_leaf_indicator(self, single_link_tree):
        sup = DelaySupport(2)
        params = LinkParams(sup, {1: DelayDistribution(sup, [0.6, 0.3], 0.1)})
        up = upward_pass(single_link_tree, params, {1: LOSS})
        assert up.loss[1] == 1.0
        assert np.all(up.finite[1] == 0)
        assert observation_likelihood(up) == pytest.approx(0.1)

    def test_missing_leaf_rejected(self, four_leaf_tree, rng):
        params = random_params(four_leaf_tree, DelaySupport(3), rng)
        with pytest.raises(ValueError, match="missing leaf"):
            upward_pass(four_leaf_tree, params, {4: 0, 5: 0, 6: 0})

    def test_matches_brute_force(self, rng):
        for _ in range(40):
            tree, sup, params = random_instance(rng)
            obs = random_observation(tree, sup, params, rng)
            p = observation_likelihood(upward_pass(tree, params, obs))
            p_bf = brute_force_likelihood(tree, params, obs)
            np.testing.assert_allclose(p, p_bf, rtol=1e-12, atol=1e-300)


class TestObservationLikelihood:
    def test_all_lost_single_link(self, single_link_tree):
        sup = DelaySupport(2)
        params = LinkParams(sup, {1: DelayDistribution(sup, [0.55, 0.15], 0.3)})
        up = upward_pass(single_link_tree, params, {1: LOSS})
        assert observation_likelihood(up) == pytest.approx(0.3)

    def test_impossible_observation_is_zero(self, single_link_tree):
        sup = DelaySupport(2)
        params = LinkParams(sup, {1: DelayDistribution(sup, [0.5, 0.5])})
        up = upward_pass(single_link_tree, params, {1: 7})
        assert observation_likelihood(up) == 0.0


class TestDownwardPass:
    def test_single_link_joint_equals_theta(self, single_link_tree):
        sup = DelaySupport(3)
        params = LinkParams(sup, {1: DelayDistribution(sup, [0.5, 0.3, 0.1], 0.1)})
        down = downward_pass(single_link_tree, params, {1: 1})
        np.testing.assert_allclose(down.joint[1], params[1].mass)
        assert down.joint_loss[1] == pytest.approx(0.1)
        # root entry is the indicator at cumulative delay zero
        np.testing.assert_array_equal(down.joint[0], [1.0])

    def test_marginalization_every_node(self, rng):
        for _ in range(25):
            tree, sup, params = random_instance(rng)
            obs = simulate_batch(tree, params, rng)
            up = upward_pass(tree, params, obs)
            p = observation_likelihood(up)
            down = downward_pass(tree, params, obs, up)
            for i in tree.link_ids:
                finite, loss = joint_marginal(tree, params, obs, i, downward=down)
                assert finite.sum() + loss == pytest.approx(p, rel=1e-12)

    def test_joint_matches_brute_force(self, rng):
        for _ in range(25):
            tree, sup, params = random_instance(rng)
            obs = random_observation(tree, sup, params, rng)
            down = downward_pass(tree, params, obs)
            for i in tree.link_ids:
                finite, loss = joint_marginal(tree, params, obs, i, downward=down)
                bf_finite, bf_loss = brute_force_joint(tree, params, obs, i)
                np.testing.assert_allclose(finite, bf_finite, rtol=1e-12, atol=1e-300)
                np.testing.assert_allclose(loss, bf_loss, rtol=1e-12, atol=1e-300)

    def test_joint_marginal_rejects_non_link(self, four_leaf_tree, rng):
        params = random_params(four_leaf_tree, DelaySupport(2), rng)
        obs = {leaf: 0 for leaf in four_leaf_tree.leaves}
        with pytest.raises(ValueError):
            joint_marginal(four_leaf_tree, params, obs, 0)


class TestEmStep:
    def test_single_link_reduces_to_histogram(self, single_link_tree, rng):
        sup = DelaySupport(3)
        truth = LinkParams(sup, {1: DelayDistribution(sup, [0.5, 0.2, 0.1], 0.2)})
        obs = simulate_experiment(single_link_tree, truth, 500, seed=2)
        for start_loss in (0.01, 0.4):
            start = LinkParams.uniform((1,), sup, start_loss)
            est = em_step(single_link_tree, start, obs)
            counts = np.bincount(
                np.where(obs.delays[:, 0] == LOST, 3, obs.delays[:, 0]), minlength=4
            )
            np.testing.assert_allclose(
                np.append(est[1].mass, est[1].loss_mass), counts / 500, atol=1e-10
            )

    def test_empty_observation_set_rejected(self, single_link_tree):
        sup = DelaySupport(2)
        params = LinkParams.uniform((1,), sup, 0.01)
        with pytest.raises(ValueError):
            ObservationSet(leaves=(1,), delays=np.empty((0, 1), dtype=np.int64))
        bad = ObservationSet(leaves=(1,), delays=np.array([[1]]))
        bad.delays = np.empty((0, 1), dtype=np.int64)  # bypass validation
        with pytest.raises(ValueError):
            em_step(single_link_tree, params, bad)

    def test_matches_brute_force(self, rng):
        worst = 0.0
        for _ in range(6):
            tree, sup, params = random_instance(rng, max_links=6, max_bins=4, max_loss=0.1)
            truth = random_params(tree, sup, rng, max_loss=0.1)
            obs = simulate_experiment(tree, truth, 50, seed=int(rng.integers(10**6)))
            a = em_step(tree, params, obs)
            b = brute_force_em_step(tree, params, obs)
            for i in tree.link_ids:
                worst = max(
                    worst,
                    float(np.abs(a[i].mass - b[i].mass).max()),
                    abs(a[i].loss_mass - b[i].loss_mass),
                )
        assert worst < 1e-10

    def test_zero_likelihood_names_batch(self, single_link_tree):
        sup = DelaySupport(2)
        params = LinkParams(sup, {1: DelayDistribution(sup, [0.5, 0.5])})
        obs = ObservationSet(leaves=(1,), delays=np.array([[0], [1], [9]]))
        with pytest.raises(ZeroLikelihoodError) as err:
            em_step(single_link_tree, params, obs)
        assert err.value.batch == 2

    def test_outputs_normalized_with_floor(self, rng):
        tree, sup, params = random_instance(rng, max_links=5, max_bins=4)
        obs = simulate_experiment(tree, params, 30, seed=1)
        est = em_step(tree, params, obs)
        for i in tree.link_ids:
            assert abs(est[i].total_mass - 1.0) <= 1e-12
            assert est[i].mass.min() >= 1e-12
            assert est[i].loss_mass >= 1e-12

    def test_lost_subtree_update_preserves_prior(self):
        # loss certainly upstream: the father link can lose, the leaf link
        # cannot, so an all-lost observation says nothing about the leaf link
        chain = TreeTopology(
            labels=("S", "a", "L"), fathers=(None, 0, 1), hop_counts=(None, 1, 1)
        )
        sup = DelaySupport(3)
        params = LinkParams(
            sup,
            {
                1: DelayDistribution(sup, [0.4, 0.3, 0.1], 0.2),
                2: DelayDistribution(sup, [0.5, 0.3, 0.2], 0.0),
            },
        )
        finite, loss = joint_marginal(chain, params, {2: LOSS}, 2)
        p = finite.sum() + loss
        np.testing.assert_allclose(finite / p, params[2].mass, rtol=1e-12)
        assert loss == 0.0


class TestLogLikelihood:
    def test_point_mass_matching_data_is_zero(self, single_link_tree):
        sup = DelaySupport(3)
        params = LinkParams(sup, {1: DelayDistribution.point_mass(sup, 1)})
        obs = ObservationSet(leaves=(1,), delays=np.array([[1], [1], [1]]))
        assert log_likelihood(single_link_tree, params, obs) == 0.0

    def test_factorizes_over_batches(self, four_leaf_tree, rng):
        params = random_params(four_leaf_tree, DelaySupport(3), rng)
        single = simulate_experiment(four_leaf_tree, params, 1, seed=3)
        double = ObservationSet(
            leaves=single.leaves, delays=np.vstack([single.delays, single.delays])
        )
        one = log_likelihood(four_leaf_tree, params, single)
        two = log_likelihood(four_leaf_tree, params, double)
        assert two == pytest.approx(2 * one, rel=1e-12)

    def test_matches_summed_oracle(self, rng):
        for _ in range(5):
            tree, sup, params = random_instance(rng, max_links=6, max_bins=4)
            obs = simulate_experiment(tree, params, 20, seed=int(rng.integers(10**6)))
            expected = sum(
                math.log(brute_force_likelihood(tree, params, o)) for o in obs
            )
            got = log_likelihood(tree, params, obs)
            assert got == pytest.approx(expected, rel=1e-12)

    def test_impossible_batch_gives_minus_inf(self, single_link_tree, caplog):
        sup = DelaySupport(2)
        params = LinkParams(sup, {1: DelayDistribution(sup, [0.5, 0.5])})
        obs = ObservationSet(leaves=(1,), delays=np.array([[0], [5]]))
        with caplog.at_level("WARNING"):
            assert log_likelihood(single_link_tree, params, obs) == -math.inf
        assert "batch 1" in caplog.text


class TestRunEm:
    def test_fixed_point_stops_after_one_iteration(self, single_link_tree):
        sup = DelaySupport(2)
        truth = LinkParams(sup, {1: DelayDistribution(sup, [0.7, 0.2], 0.1)})
        obs = simulate_experiment(single_link_tree, truth, 400, seed=6)
        hist = em_step(single_link_tree, LinkParams.uniform((1,), sup, 0.1), obs)
        est, trace = run_em(single_link_tree, hist, obs, tol=1e-6)
        assert len(trace) == 1
        assert trace.records[0].max_delta < 1e-9

    def test_single_link_converges_in_one_step(self, single_link_tree):
        sup = DelaySupport(3)
        truth = LinkParams(sup, {1: DelayDistribution(sup, [0.6, 0.3, 0.05], 0.05)})
        obs = simulate_experiment(single_link_tree, truth, 300, seed=8)
        start = LinkParams.uniform((1,), sup, 0.01)
        est, trace = run_em(single_link_tree, start, obs, tol=1e-6)
        assert len(trace) <= 2
        counts = np.bincount(
            np.where(obs.delays[:, 0] == LOST, 3, obs.delays[:, 0]), minlength=4
        )
        np.testing.assert_allclose(
            np.append(est[1].mass, est[1].loss_mass), counts / 300, atol=1e-9
        )

    def test_requires_canonical_start(self, single_link_tree):
        sup = DelaySupport(2)
        start = LinkParams(sup, {1: DelayDistribution(sup, [0.0, 1.0])})
        obs = ObservationSet(leaves=(1,), delays=np.array([[1]]))
        with pytest.raises(ValueError, match="mass\\[0\\]"):
            run_em(single_link_tree, start, obs)

    def test_loglik_nondecreasing_and_improves(self, rng):
        tree = star_tree(3)
        sup = DelaySupport(5)
        truth = random_link_params(tree, sup, rng, max_loss=0.05)
        obs = simulate_experiment(tree, truth, 400, seed=17)
        start = LinkParams.uniform(tree.link_ids, sup, 0.01)
        est, trace = run_em(tree, start, obs, tol=1e-7, max_iter=120)
        ll = trace.log_likelihoods
        assert np.all(np.diff(ll) >= -1e-9)
        final = log_likelihood(tree, est, obs)
        assert final >= ll[0]

    def test_trace_csv(self, tmp_path, single_link_tree):
        sup = DelaySupport(2)
        truth = LinkParams(sup, {1: DelayDistribution(sup, [0.6, 0.4])})
        obs = simulate_experiment(single_link_tree, truth, 50, seed=1)
        _, trace = run_em(single_link_tree, LinkParams.uniform((1,), sup, 0.01), obs)
        out = tmp_path / "trace.csv"
        trace.to_csv(out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "iter,level,loglik,max_delta"
        assert len(lines) == len(trace) + 1


class TestBinning:
    def test_floor_binning(self, single_link_tree):
        raw = RawDelays((1,), np.array([[0.0], [0.49], [0.5], [1.49]]))
        obs = bin_observations(raw, DelaySupport(4, 0.5), single_link_tree)
        np.testing.assert_array_equal(obs.delays[:, 0], [0, 0, 1, 2])

    def test_unrepresentable_becomes_loss(self, single_link_tree):
        raw = RawDelays((1,), np.array([[10.0], [np.inf]]))
        obs = bin_observations(raw, DelaySupport(3, 1.0), single_link_tree)
        np.testing.assert_array_equal(obs.delays[:, 0], [LOST, LOST])

    def test_cutoff_forces_loss(self, single_link_tree):
        raw = RawDelays((1,), np.array([[1.2], [0.4]]))
        obs = bin_observations(
            raw, DelaySupport(4, 0.5), single_link_tree, loss_cutoff_s=1.0
        )
        np.testing.assert_array_equal(obs.delays[:, 0], [LOST, 0])

    def test_baseline_subtraction(self, single_link_tree):
        raw = RawDelays((1,), np.array([[5.0], [5.9], [7.2]]))
        obs = bin_observations(
            raw, DelaySupport(4, 1.0), single_link_tree, subtract_baseline=True
        )
        np.testing.assert_array_equal(obs.delays[:, 0], [0, 0, 2])

    def test_respects_leaf_depths(self, two_link_chain):
        # leaf at depth 2 with 3 bins represents sums up to 4
        raw = RawDelays((2,), np.array([[4.0], [4.9], [5.0]]))
        obs = bin_observations(raw, DelaySupport(3, 1.0), two_link_chain)
        np.testing.assert_array_equal(obs.delays[:, 0], [4, 4, LOST])


class TestSchedules:
    def test_doubling_schedule(self):
        sched = doubling_schedule(DelaySupport(64, 1.0))
        assert [s.bin_count for s in sched] == [8, 16, 32, 64]
        assert all(s.bin_count * s.bin_width == pytest.approx(64.0) for s in sched)

    def test_doubling_schedule_odd_factor(self):
        sched = doubling_schedule(DelaySupport(200, 0.05))
        assert [s.bin_count for s in sched] == [25, 50, 100, 200]

    def test_no_refinement_possible(self):
        sched = doubling_schedule(DelaySupport(9, 1.0))
        assert [s.bin_count for s in sched] == [9]


class TestSuccessiveMl:
    def test_one_level_equals_run_em(self, four_leaf_tree, rng):
        sup = DelaySupport(4, 1.0)
        truth = random_link_params(four_leaf_tree, sup, rng)
        obs = simulate_experiment(four_leaf_tree, truth, 300, seed=9)
        raw = observations_to_raw(obs, sup)
        est_a, _ = successive_ml(four_leaf_tree, raw, [sup], tol=1e-7, max_iter=200)
        start = LinkParams.uniform(four_leaf_tree.link_ids, sup, 0.01)
        est_b, _ = run_em(four_leaf_tree, start, obs, tol=1e-7, max_iter=200)
        for i in four_leaf_tree.link_ids:
            np.testing.assert_allclose(est_a[i].mass, est_b[i].mass, atol=1e-12)

    def test_two_level_single_link_matches_direct(self, single_link_tree, rng):
        fine = DelaySupport(8, 0.5)
        truth = random_link_params(single_link_tree, fine, rng)
        obs = simulate_experiment(single_link_tree, truth, 400, seed=10)
        raw = observations_to_raw(obs, fine)
        sched = [DelaySupport(4, 1.0), fine]
        est, trace = successive_ml(single_link_tree, raw, sched, tol=1e-9, max_iter=300)
        counts = np.bincount(
            np.where(obs.delays[:, 0] == LOST, 8, obs.delays[:, 0]), minlength=9
        )
        np.testing.assert_allclose(
            np.append(est[1].mass, est[1].loss_mass), counts / 400, atol=1e-7
        )
        assert {r.level for r in trace.records} == {4, 8}

    def test_rejects_non_refining_schedule(self, single_link_tree, rng):
        raw = RawDelays((1,), np.array([[0.2]]))
        with pytest.raises(ValueError):
            successive_ml(
                single_link_tree, raw, [DelaySupport(4, 1.0), DelaySupport(6, 2 / 3)]
            )
        with pytest.raises(ValueError):
            successive_ml(single_link_tree, raw, [])

    def test_level_callback_receives_checkpoints(self, single_link_tree, rng):
        sup = DelaySupport(8, 1.0)
        truth = random_link_params(single_link_tree, sup, rng)
        obs = simulate_experiment(single_link_tree, truth, 100, seed=12)
        raw = observations_to_raw(obs, sup)
        seen = []
        successive_ml(
            single_link_tree,
            raw,
            doubling_schedule(sup),
            on_level=lambda s, p: seen.append(s.bin_count),
        )
        assert seen == [8]  # 8 cannot halve below min_bins

    def test_statistical_consistency_more_data_helps(self, rng):
        tree = star_tree(3)
        sup = DelaySupport(4)
        truth = random_link_params(tree, sup, rng, max_loss=0.05)
        tv = {}
        for T in (200, 5000):
            obs = simulate_experiment(tree, truth, T, seed=40)
            start = LinkParams.uniform(tree.link_ids, sup, 0.01)
            est, _ = run_em(tree, start, obs, tol=1e-8, max_iter=300)
            tv[T] = np.mean(list(est.tv_table(truth).values()))
        assert tv[5000] < tv[200]


class TestBruteForceGuards:
    def test_size_guard(self, rng):
        tree = random_branching_tree(rng, max_links=12)
        while tree.n_links <= 8:
            tree = random_branching_tree(rng, max_links=12)
        params = random_params(tree, DelaySupport(2), rng)
        obs = {leaf: 0 for leaf in tree.leaves}
        with pytest.raises(ValueError, match="brute force"):
            brute_force_likelihood(tree, params, obs)

    def test_bin_guard(self, single_link_tree, rng):
        params = random_params(single_link_tree, DelaySupport(6), rng)
        with pytest.raises(ValueError, match="brute force"):
            brute_force_likelihood(single_link_tree, params, {1: 0})
