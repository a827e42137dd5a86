import numpy as np
import pytest

import oracles
from bpsm.errors import EmptyMatchSet, ReplicateFailed
from bpsm.estimator import (
    AttPosterior,
    PipelineConfig,
    att_point,
    att_posterior,
    bootstrap_se,
    drop_keep_export,
    run_bpsm,
    run_psm,
)
from bpsm.matcher import MatchSet
from bpsm.propensity import Dataset, McmcConfig, PropensityScores
from bpsm.simulation import SimConfig, simulate_dataset


def ms(pairs, dropped_treated=(), dropped_controls=()):
    return MatchSet(np.array(pairs, dtype=np.intp).reshape(-1, 2), frozenset(dropped_treated),
                    frozenset(dropped_controls))


def toy(Y, Z, outcome_type="binary"):
    n = len(Z)
    return Dataset(np.arange(n), np.ones((n, 1)), np.array(Z), np.array(Y, float), outcome_type)


@pytest.fixture(scope="module")
def synthetic():
    data, _ = simulate_dataset(SimConfig(n=300), np.random.default_rng(42))
    return data


class TestAttPoint:
    def test_hand_arithmetic(self):
        # treated units 0..2 with Y=(1,1,0); controls 3, 4 with Y=(0,1); control 3 used twice
        data = toy([1, 1, 0, 0, 1], [1, 1, 1, 0, 0])
        pt = att_point(ms([[0, 3], [1, 4], [2, 3]]), data)
        assert pt.p1 == pytest.approx(2 / 3)
        assert pt.p0 == pytest.approx(1 / 3)
        assert pt.att == pytest.approx(1 / 3)
        assert pt.att == pt.p1 - pt.p0
        assert pt.n_matched_controls == 3

    def test_unique_count_mode(self):
        data = toy([1, 1, 0, 0, 1], [1, 1, 1, 0, 0])
        pt = att_point(ms([[0, 3], [1, 4], [2, 3]]), data, multiplicity=False)
        assert pt.p0 == pytest.approx(0.5)
        assert pt.n_matched_controls == 2

    def test_null_effect(self):
        data = toy([1, 1, 1, 1], [1, 1, 0, 0])
        assert att_point(ms([[0, 2], [1, 2]]), data).att == 0.0

    def test_empty(self):
        with pytest.raises(EmptyMatchSet):
            att_point(ms([]), toy([0, 1], [1, 0]))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_pairwise_recomputation(self, synthetic, seed):
        res = run_psm(synthetic, PipelineConfig(), np.random.default_rng(seed))
        expected = oracles.att_by_pairs(res.matchset.pairs.tolist(), synthetic.Y.tolist(), synthetic.Z.tolist())
        assert res.att.att == pytest.approx(expected, abs=1e-14)
        assert -1 <= res.att.att <= 1

    def test_continuous_path_agrees_on_binary_data(self, synthetic):
        cont = Dataset(synthetic.ids, synthetic.X, synthetic.Z, synthetic.Y, "continuous")
        m = run_psm(synthetic, PipelineConfig(), np.random.default_rng(0)).matchset
        assert att_point(m, synthetic) == att_point(m, cont)

    def test_caliper_matchset_uses_matched_treated(self):
        data = toy([1, 0, 0, 1], [1, 1, 0, 0])
        pt = att_point(ms([[0, 3]], dropped_treated=[1], dropped_controls=[2]), data)
        assert (pt.p1, pt.p0, pt.n_treated) == (1.0, 1.0, 1)


class TestAttPosterior:
    def test_identical_matchsets(self):
        data = toy([1, 0, 0, 1], [1, 1, 0, 0])
        post = att_posterior([ms([[0, 2], [1, 3]])] * 5, data)
        assert post.sd == 0
        assert post.ci_lo == post.ci_hi == post.mean

    def test_two_draws_mean(self):
        post = AttPosterior.from_sample([0.10, 0.20])
        assert post.mean == pytest.approx(0.15)

    def test_empty_draw_index(self):
        data = toy([1, 0, 0, 1], [1, 1, 0, 0])
        with pytest.raises(EmptyMatchSet) as err:
            att_posterior([ms([[0, 2], [1, 3]]), ms([])], data)
        assert err.value.draw == 1

    def test_needs_two(self):
        with pytest.raises(ValueError):
            att_posterior([ms([[0, 1]])], toy([1, 0], [1, 0]))

    def test_bpsm_properties(self, synthetic):
        res = run_bpsm(synthetic, PipelineConfig(), McmcConfig(K=200, burn_in=500, seed=1), seed=5)
        post = res.posterior
        assert np.all(post.p1 == post.p1[0])
        assert np.all((-1 <= post.sample) & (post.sample <= 1))
        assert post.ci_lo <= post.ci_hi
        assert post.mean == float(np.mean(post.sample))
        assert post.sd == float(np.std(post.sample, ddof=1))
        lo, hi = np.percentile(post.sample, [2.5, 97.5])
        assert (post.ci_lo, post.ci_hi) == (lo, hi)
        assert post.ci_lo == pytest.approx(oracles.percentile_linear(post.sample.tolist(), 2.5), abs=1e-15)
        assert res.pct_matched_at_least_once >= 100.0 * np.mean(res.match_fraction == 1.0)

    def test_bpsm_deterministic(self, synthetic):
        cfg = McmcConfig(K=50, burn_in=100, seed=2)
        a = run_bpsm(synthetic, PipelineConfig(), cfg, seed=9)
        b = run_bpsm(synthetic, PipelineConfig(), cfg, seed=9)
        assert np.array_equal(a.posterior.sample, b.posterior.sample)

    def test_fixed_support_option(self, synthetic):
        res = run_bpsm(synthetic, PipelineConfig(retrim_per_draw=False), McmcConfig(K=20, burn_in=100), seed=1)
        for m in res.matchsets:
            assert sorted(m.pairs[:, 0]) == list(np.flatnonzero(synthetic.Z == 1))
            assert not (set(m.pairs[:, 1]) & m.dropped_controls)


class TestBootstrap:
    def test_deterministic(self, synthetic):
        a = bootstrap_se(synthetic, PipelineConfig(), 500, seed=3)
        b = bootstrap_se(synthetic, PipelineConfig(), 500, seed=3)
        assert a.se == b.se
        assert a.se == float(np.std(a.replicates, ddof=1))

    def test_degenerate_zero_se(self):
        # every unit has the same outcome, so every replicate ATT is exactly 0
        rng = np.random.default_rng(0)
        x = rng.normal(size=60)
        z = np.tile([0, 1], 30)
        data = Dataset(np.arange(60), np.column_stack([np.ones(60), x]), z, np.ones(60))
        assert bootstrap_se(data, PipelineConfig(), 50, seed=1).se == 0.0

    def test_stability(self, synthetic):
        se2 = bootstrap_se(synthetic, PipelineConfig(), 2000, seed=10).se
        se4 = bootstrap_se(synthetic, PipelineConfig(), 4000, seed=11).se
        assert abs(se2 - se4) / se4 < 0.15

    def test_too_many_failures(self):
        # a single treated unit out of 40: over a third of resamples contain none
        z = np.zeros(40, dtype=int)
        z[:1] = 1
        data = Dataset(np.arange(40), np.column_stack([np.ones(40), np.arange(40.0)]), z, np.zeros(40))
        with pytest.raises(ReplicateFailed):
            bootstrap_se(data, PipelineConfig(), 50, seed=0)

    def test_parallel_equals_sequential(self, synthetic):
        a = bootstrap_se(synthetic, PipelineConfig(), 40, seed=7, workers=1)
        b = bootstrap_se(synthetic, PipelineConfig(), 40, seed=7, workers=2)
        assert np.array_equal(a.replicates, b.replicates)


class TestDropKeep:
    def test_rows(self):
        ps = PropensityScores(np.array([0.3, 0.6, 0.1, 0.4]), np.zeros(4))
        out = drop_keep_export(ps, ms([[0, 3], [1, 3]], dropped_controls=[2]), [1, 1, 0, 0])
        assert out["kept"].tolist() == [True, True, False, True]
        assert len(out["ps"]) == len(out["z"]) == 4
