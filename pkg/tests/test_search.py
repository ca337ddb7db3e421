import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from smashnas import dynnet as dn
from smashnas.arch import sample_architecture
from smashnas.data import split_dataset, synth_dataset
from smashnas.hypernet import build_hypernet
from smashnas.search import (
    CorrelationUndefinedError,
    ProbeRow,
    ProbeTable,
    RetrainSettings,
    ScoreRecord,
    SearchReport,
    SmashSettings,
    SmashTrainer,
    corruption_probe,
    mcmc_refine,
    rank_candidates,
    retrain,
    smash_score,
    spearman,
)


@pytest.fixture(scope="module")
def setup():
    from smashnas.arch import SearchSpaceConfig

    cfg = SearchSpaceConfig.desk()
    data = split_dataset(synth_dataset("gaussian_blobs", 120, size=8, seed=0), 0.5, 0)
    rng = np.random.default_rng(0)
    H = build_hypernet(cfg, rng, dense_block_layers=(1,), growth_rate=2)
    shared = dn.init_shared(cfg, rng)
    return cfg, data, H, shared


def brute_spearman(a, b):
    ra = stats.rankdata(a)
    rb = stats.rankdata(b)
    n = len(a)
    da, db = ra - ra.mean(), rb - rb.mean()
    return float((da * db).sum() / math.sqrt((da * da).sum() * (db * db).sum())), n


class TestSpearman:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=4, max_size=30))
    def test_rho_matches_rank_pearson(self, pairs):
        a, b = map(np.array, zip(*pairs))
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            return
        rho, p = spearman(a, b)
        want, n = brute_spearman(a, b)
        assert rho == pytest.approx(want, abs=1e-12)
        assert 0.0 <= p <= 1.0

    def test_one_sided_p_by_t_approximation(self):
        a = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
        b = np.array([0.15, 0.1, 0.35, 0.3, 0.6, 0.5, 0.9, 0.7])
        rho, p = spearman(a, b)
        n = len(a)
        t = rho * math.sqrt((n - 2) / (1 - rho * rho))
        assert p == pytest.approx(stats.t.sf(t, n - 2), rel=1e-9)

    def test_direction(self):
        assert spearman([1, 2, 3, 4, 5], [1, 2, 3, 5, 4])[1] < 0.05
        assert spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1])[1] > 0.95


class TestRanking:
    def test_sorted_with_tie_breaks(self, setup):
        cfg, data, H, shared = setup
        ranked = rank_candidates(H, shared, cfg, 8, data, np.random.default_rng(1))
        keys = [r.sort_key() for r in ranked]
        assert keys == sorted(keys)
        assert sorted(r.arch_id for r in ranked) == list(range(8))

    def test_tie_break_order(self, desk):
        arch = sample_architecture(desk, np.random.default_rng(0))
        recs = [ScoreRecord(2, arch, 0.5, 10), ScoreRecord(1, arch, 0.5, 10), ScoreRecord(0, arch, 0.5, 20),
                ScoreRecord(3, arch, 0.4, 99)]
        assert [r.arch_id for r in sorted(recs, key=ScoreRecord.sort_key)] == [3, 1, 2, 0]

    def test_error_range(self, desk):
        with pytest.raises(ValueError):
            ScoreRecord(0, sample_architecture(desk, np.random.default_rng(0)), 1.5, 1)

    def test_score_is_deterministic(self, setup):
        cfg, data, H, shared = setup
        arch = sample_architecture(cfg, np.random.default_rng(3))
        assert smash_score(H, shared, arch, data) == smash_score(H, shared, arch, data)


class TestMcmc:
    def test_incumbent_never_worsens(self, setup):
        cfg, data, H, shared = setup
        base = sample_architecture(cfg, np.random.default_rng(4))
        history = []
        best = mcmc_refine(H, shared, base, data, n_warm=5, n_chain=15, rng=np.random.default_rng(5), history=history)
        assert len(history) == 1 + 1 + 15
        assert all(b <= a for a, b in zip(history, history[1:]))
        assert smash_score(H, shared, best, data) == history[-1]

    def test_rejects_invalid_base(self, setup, desk):
        from smashnas.arch import ArchitectureSpec

        cfg, data, H, shared = setup
        with pytest.raises(ValueError):
            mcmc_refine(H, shared, ArchitectureSpec((), cfg), data, 1, 1)


class TestReport:
    def _report(self, desk, n=6):
        rng = np.random.default_rng(0)
        recs = [
            ScoreRecord(i, sample_architecture(desk, rng), i / 10, 100 + i, (i / 10 + 0.05) if i % 2 == 0 else None)
            for i in range(n)
        ]
        return SearchReport(recs)

    def test_csv_round_trip(self, desk):
        rep = self._report(desk)
        back = SearchReport.from_csv(rep.to_csv(), desk)
        assert [(r.arch_id, r.smash_error, r.true_error, r.param_count, r.arch) for r in back.records] == [
            (r.arch_id, r.smash_error, r.true_error, r.param_count, r.arch) for r in rep.records
        ]

    def test_statistics(self, desk):
        rep = self._report(desk)
        rep.compute_statistics()
        assert rep.spearman_rho == pytest.approx(1.0)
        assert rep.fit_slope == pytest.approx(1.0) and rep.fit_intercept == pytest.approx(0.05)

    def test_too_few_pairs(self, desk):
        with pytest.raises(CorrelationUndefinedError):
            self._report(desk, n=4).compute_statistics()

    def test_bad_header(self, desk):
        with pytest.raises(ValueError, match="header"):
            SearchReport.from_csv("a,b\n", desk)


class TestProbe:
    def test_fraction(self):
        table = ProbeTable([ProbeRow(0, "m", 0.1, 0.2), ProbeRow(1, "m", 0.3, 0.3), ProbeRow(2, "k", 0.5, 0.1)])
        assert table.fraction_clean_better("m") == 0.5
        assert table.fraction_clean_better() == pytest.approx(1 / 3)
        assert table.to_csv().splitlines()[0] == "arch_index,mode,clean,corrupted,delta"

    def test_runs_on_real_scores(self, setup):
        cfg, data, H, shared = setup
        archs = [sample_architecture(cfg, np.random.default_rng(k)) for k in range(3)]
        table = corruption_probe(H, shared, archs, ["shuffle_dilations", "swap_layers"], data, np.random.default_rng(0))
        assert len(table.rows) == 6
        assert all(0 <= r.clean <= 1 and 0 <= r.corrupted <= 1 for r in table.rows)


class TestTrainer:
    def test_seeded_runs_identical_and_resume_exact(self, setup):
        cfg, data, _, _ = setup
        s = SmashSettings(epochs=2, batch_size=10, hypernet_layers=(1,), growth_rate=2)
        a = SmashTrainer(cfg, data, s, seed=3)
        a.run()
        b = SmashTrainer(cfg, data, s, seed=3)
        b.run(until=5)
        state = {k: v.copy() for k, v in b.state_arrays().items()}
        c = SmashTrainer(cfg, data, s, seed=3)
        c.load_state_arrays(state, 5)
        c.run()
        for k, v in a.state_arrays().items():
            assert np.array_equal(v, c.state_arrays()[k]), k
        assert a.history == c.history

    def test_finished_schedule(self, setup):
        cfg, data, _, _ = setup
        t = SmashTrainer(cfg, data, SmashSettings(epochs=1, batch_size=60, hypernet_layers=(1,), growth_rate=2), 0)
        t.run()
        with pytest.raises(RuntimeError):
            t.train_step()


def test_retrain_reports_error_fraction(setup):
    cfg, data, _, _ = setup
    arch = sample_architecture(cfg, np.random.default_rng(6))
    params, err = retrain(arch, data, RetrainSettings(epochs=1, batch_size=20, eval_split="val"), 0)
    assert 0.0 <= err <= 1.0
    assert params.num_params() == arch.param_count


def test_brute_force_rank_agreement_small():
    # exhaustive check of the sign convention on every ordering of 4 items
    base = [0.1, 0.2, 0.3, 0.4]
    for perm in itertools.permutations(base):
        rho, _ = spearman(base, perm)
        assert rho == pytest.approx(brute_spearman(base, perm)[0])


def test_constant_input_is_undefined():
    rho, p = spearman([0.1, 0.1, 0.1], [0.2, 0.3, 0.4])
    assert math.isnan(rho) and math.isnan(p)
