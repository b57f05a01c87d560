import math

import numpy as np
import pytest

from ctbnlearn import (
    Cim,
    CtbnModel,
    EmConfig,
    Evidence,
    FlatFamilyProvider,
    SemConfig,
    Subsystem,
    Variable,
    ZeroProbabilityEvidenceError,
    aggregate_statistics,
    amalgamate,
    bic_score,
    e_step,
    em,
    family_log_likelihood,
    m_step,
    random_parameters,
    sample_trajectory,
    score_dataset,
    sem,
    structure_search,
)
from ctbnlearn.inference import FlatStatistics
from ctbnlearn.learning import _flat_e_step
from ctbnlearn.model import FamilyStatistics
from helpers import binary_chain_model, chain_oracle, independent_binary_model


def fully_observed_dataset(model, count, horizon, seed):
    q, space, p0 = amalgamate(model)
    dataset = []
    trajs = []
    for s in np.random.SeedSequence(seed).spawn(count):
        traj = sample_trajectory(p0, q, horizon, np.random.default_rng(s))
        trajs.append(traj)
        dataset.append(Evidence.fully_observed(traj, space.n_joint))
    return dataset, trajs, space


def exact_family_stats(model, trajs, space):
    t = sum((tr.dwell_times(space.n_joint) for tr in trajs), np.zeros(space.n_joint))
    m = sum((tr.transition_counts(space.n_joint) for tr in trajs), np.zeros((space.n_joint,) * 2))
    return aggregate_statistics(FlatStatistics(t, m), space, model)


class TestEStep:
    def test_empty_dataset(self):
        model = binary_chain_model()
        stats, ll = e_step(model, [])
        assert ll == 0.0
        for name in model.names:
            assert not stats.time[name].any()

    def test_fully_observed_statistics_are_exact(self):
        model = binary_chain_model()
        dataset, trajs, space = fully_observed_dataset(model, 12, 3.0, seed=0)
        stats, ll = e_step(model, dataset)
        exact = exact_family_stats(model, trajs, space)
        for name in model.names:
            assert np.abs(stats.time[name] - exact.time[name]).max() < 1e-10
            assert np.abs(stats.trans[name] - exact.trans[name]).max() < 1e-10

    def test_likelihood_matches_score_dataset(self):
        model = binary_chain_model()
        dataset, _, _ = fully_observed_dataset(model, 6, 2.0, seed=1)
        _, ll = e_step(model, dataset)
        assert ll == pytest.approx(math.fsum(score_dataset(model, dataset)), abs=1e-12)

    def test_order_independent(self):
        model = binary_chain_model()
        dataset, _, _ = fully_observed_dataset(model, 10, 2.0, seed=2)
        stats1, ll1 = e_step(model, dataset)
        stats2, ll2 = e_step(model, dataset[::-1])
        assert ll1 == pytest.approx(ll2, abs=1e-12)
        for name in model.names:
            assert np.abs(stats1.time[name] - stats2.time[name]).max() < 1e-12

    def test_occluded_statistics_match_oracle_sums(self):
        from ctbnlearn import OcclusionPolicy, occlude

        model = independent_binary_model()
        q, space, p0 = amalgamate(model)
        h = 1e-4
        dataset = []
        oracle_t = np.zeros(4)
        oracle_m = np.zeros((4, 4))
        for i, s in enumerate(np.random.SeedSequence(3).spawn(6)):
            rng = np.random.default_rng(s)
            traj = sample_trajectory(p0, q, 1.0, rng)
            pervar = [space.project(traj, v) for v in range(2)]
            ev = occlude(pervar, space, OcclusionPolicy(0.3, 0.25), rng)
            # Snap breakpoints onto the oracle grid.
            segs = tuple(
                (sub, round(a / h) * h, round(b / h) * h) for sub, a, b in ev.segments
            )
            segs = tuple((s_, a, b if j < len(segs) - 1 else 1.0) for j, (s_, a, b) in enumerate(segs))
            ev = Evidence(segs, 1.0)
            dataset.append(ev)
            _, d, m, _ = chain_oracle(q.entries, p0, ev, h)
            oracle_t += d
            oracle_m += m
        space2, tbar, mbar, _, _ = _flat_e_step(model, dataset, 1e-8, 4096)
        assert np.abs(tbar - oracle_t).max() / oracle_t.max() < 1e-3
        assert np.abs(mbar - oracle_m).max() / oracle_m.max() < 1e-3

    def test_zero_probability_names_the_trajectory(self):
        model = independent_binary_model()
        q, space, p0 = amalgamate(model)
        good = Evidence.vacuous(4, 1.0)
        bad = Evidence(
            ((Subsystem.single(4, 0), 0.0, 0.5), (Subsystem.single(4, 3), 0.5, 1.0)), 1.0
        )
        with pytest.raises(ZeroProbabilityEvidenceError) as err:
            e_step(model, [good, bad])
        assert err.value.trajectory_index == 1


class TestMStep:
    def test_rate_quotient(self):
        model = independent_binary_model(names=("x",), rates=((1.0, 1.0),))
        stats = FamilyStatistics(
            time={"x": np.array([[6.0, 1.0]])},
            trans={"x": np.array([[[0.0, 3.0], [1.0, 0.0]]])},
        )
        new = m_step(stats, model)
        assert new.cims["x"].matrices[0, 0, 0] == pytest.approx(-0.5, abs=1e-15)
        assert new.cims["x"].matrices[0, 0, 1] == pytest.approx(0.5, abs=1e-15)

    def test_split_proportions(self):
        v = Variable("x", ("a", "b", "c"))
        cim = Cim((), (), np.array([[[-1.0, 0.5, 0.5], [1.0, -1.0, 0.0], [1.0, 0.0, -1.0]]]))
        model = CtbnModel((v,), {"x": cim}, {"x": [1.0, 0.0, 0.0]})
        stats = FamilyStatistics(
            time={"x": np.array([[4.0, 1.0, 1.0]])},
            trans={"x": np.array([[[0.0, 2.0, 6.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]])},
        )
        new = m_step(stats, model)
        q = -new.cims["x"].matrices[0, 0, 0]
        theta = new.cims["x"].matrices[0, 0, 1:] / q
        assert q == pytest.approx(2.0, abs=1e-12)
        assert np.allclose(theta, [0.25, 0.75], atol=1e-12)

    def test_unvisited_rows_keep_previous_rates(self):
        model = binary_chain_model()
        stats = FamilyStatistics(
            time={n: np.zeros_like(model.cims[n].matrices[:, :, 0]) for n in model.names},
            trans={n: np.zeros_like(model.cims[n].matrices) for n in model.names},
        )
        new = m_step(stats, model)
        for name in model.names:
            assert np.array_equal(new.cims[name].matrices, model.cims[name].matrices)

    def test_dwell_without_exits_gives_uniform_split(self):
        v = Variable("x", ("a", "b", "c"))
        cim = Cim((), (), np.array([[[-1.0, 0.5, 0.5], [1.0, -1.0, 0.0], [1.0, 0.0, -1.0]]]))
        model = CtbnModel((v,), {"x": cim}, {"x": [1.0, 0.0, 0.0]})
        time = np.array([[5.0, 1.0, 1.0]])
        trans = np.zeros((1, 3, 3))
        trans[0, 1, 0] = trans[0, 2, 0] = 1.0
        new = m_step(FamilyStatistics(time={"x": time}, trans={"x": trans}), model)
        row = new.cims["x"].matrices[0, 0]
        assert row[1] == row[2]
        assert row[0] == pytest.approx(-(row[1] + row[2]), abs=1e-15)

    def test_monte_carlo_consistency(self):
        # Exact statistics of a long complete trajectory recover the rates
        # within three standard errors (se of a rate estimate is q/sqrt(M)).
        model = independent_binary_model(names=("x",), rates=((1.3, 0.6),))
        dataset, trajs, space = fully_observed_dataset(model, 1, 4000.0, seed=4)
        stats = exact_family_stats(model, trajs, space)
        new = m_step(stats, model)
        for x, true_q in enumerate((1.3, 0.6)):
            est = -new.cims["x"].matrices[0, x, x]
            se = true_q / math.sqrt(stats.exits("x")[0, x])
            assert abs(est - true_q) < 3 * se

    def test_mstep_is_the_maximizer(self):
        # Perturbing any rate or any exit split away from the M-step value
        # cannot increase the expected log-likelihood.
        model = binary_chain_model()
        dataset, trajs, space = fully_observed_dataset(model, 20, 3.0, seed=5)
        stats = exact_family_stats(model, trajs, space)
        best = m_step(stats, model)
        base = family_log_likelihood(best, stats)
        rng = np.random.default_rng(6)
        for _ in range(30):
            name = rng.choice(model.names)
            cim = best.cims[name]
            mats = cim.matrices.copy()
            u = rng.integers(cim.n_instantiations)
            x = rng.integers(cim.dim)
            row = mats[u, x].copy()
            q = -row[x]
            if q <= 0:
                continue
            theta = np.delete(row, x) / q
            if rng.uniform() < 0.5:
                q *= 1.0 + rng.choice((-1e-4, 1e-4))
            else:
                bump = rng.dirichlet(np.ones(theta.size))
                theta = (1 - 1e-4) * theta + 1e-4 * bump
                theta /= theta.sum()
            new_row = np.insert(q * theta, x, -q)
            mats[u, x] = new_row
            other = best.with_cims({name: Cim(cim.parents, cim.parent_cards, mats, cim.support)})
            assert family_log_likelihood(other, stats) <= base + 1e-12

    def test_matches_grid_search_on_one_parameter(self):
        stats = FamilyStatistics(
            time={"x": np.array([[6.0, 1.0]])},
            trans={"x": np.array([[[0.0, 3.0], [2.0, 0.0]]])},
        )
        grid = np.linspace(0.3, 0.7, 4001)
        values = [3.0 * math.log(q) - q * 6.0 for q in grid]
        best_grid = grid[int(np.argmax(values))]
        model = independent_binary_model(names=("x",), rates=((1.0, 2.0),))
        new = m_step(stats, model)
        assert abs(-new.cims["x"].matrices[0, 0, 0] - best_grid) < 1e-4


class TestEm:
    def test_fully_observed_converges_in_one_step(self):
        model = binary_chain_model()
        dataset, trajs, space = fully_observed_dataset(model, 15, 3.0, seed=7)
        start = random_parameters(model, np.random.default_rng(0))
        fit = em(start, dataset, EmConfig(init="given", tol=1e-9, freeze_initial=True))
        stats = exact_family_stats(model, trajs, space)
        ml = m_step(stats, start)
        for name in model.names:
            assert np.abs(fit.model.cims[name].matrices - ml.cims[name].matrices).max() < 1e-12
        assert fit.converged and fit.n_iter <= 2

    def test_fixed_point_is_stable(self):
        model = binary_chain_model()
        dataset, trajs, space = fully_observed_dataset(model, 10, 3.0, seed=8)
        stats = exact_family_stats(model, trajs, space)
        ml = m_step(stats, model)
        stats2, _ = e_step(ml, dataset)
        again = m_step(stats2, ml, freeze_initial=True)
        for name in model.names:
            assert np.abs(again.cims[name].matrices - ml.cims[name].matrices).max() < 1e-12

    def test_trace_is_monotone_under_occlusion(self):
        from ctbnlearn import OcclusionPolicy, occlude

        model = binary_chain_model()
        q, space, p0 = amalgamate(model)
        dataset = []
        for s in np.random.SeedSequence(9).spawn(20):
            rng = np.random.default_rng(s)
            traj = sample_trajectory(p0, q, 3.0, rng)
            pervar = [space.project(traj, v) for v in range(space.k)]
            dataset.append(occlude(pervar, space, OcclusionPolicy(0.3, 0.25), rng))
        fit = em(model, dataset, EmConfig(max_iter=15, init="random", restarts=1, seed=10))
        diffs = np.diff(np.array(fit.trace))
        assert (diffs >= -1e-9).all()

    def test_seeded_runs_are_identical(self):
        model = binary_chain_model()
        dataset, _, _ = fully_observed_dataset(model, 8, 2.0, seed=11)
        cfg = EmConfig(max_iter=5, init="random", restarts=2, seed=123)
        a = em(model, dataset, cfg)
        b = em(model, dataset, cfg)
        assert a.trace == b.trace
        for name in model.names:
            assert np.array_equal(a.model.cims[name].matrices, b.model.cims[name].matrices)


class TestBic:
    def test_unit_sample_size_has_no_penalty(self):
        model = binary_chain_model()
        dataset, trajs, space = fully_observed_dataset(model, 4, 2.0, seed=12)
        stats = exact_family_stats(model, trajs, space)
        total, per_family = bic_score(stats, model, 1)
        ml = m_step(stats, model)
        assert total == pytest.approx(family_log_likelihood(ml, stats), abs=1e-9)
        assert total == pytest.approx(math.fsum(per_family.values()), abs=1e-12)

    def test_single_cell_with_penalty(self):
        # ln(0.5) - 1 - (ln e^2)/2 * 1 free parameter = -2.6931471806.
        v = Variable("x", ("a", "b"))
        support = np.array([[False, True], [False, False]])
        cim = Cim((), (), np.array([[[-0.5, 0.5], [0.0, 0.0]]]), support)
        model = CtbnModel((v,), {"x": cim}, {"x": [1.0, 0.0]})
        stats = FamilyStatistics(
            time={"x": np.array([[2.0, 0.0]])},
            trans={"x": np.array([[[0.0, 1.0], [0.0, 0.0]]])},
        )
        total, _ = bic_score(stats, model, int(round(math.e**2)))
        w = int(round(math.e**2))
        expected = math.log(0.5) - 1.0 - 0.5 * math.log(w) * 1
        assert total == pytest.approx(expected, abs=1e-12)

    def test_spurious_parent_rejected_at_large_w(self):
        model = independent_binary_model(names=("x", "y"), rates=((1.0, 2.0), (0.6, 1.4)))
        rejected = 0
        for seed in range(20):
            dataset, trajs, space = fully_observed_dataset(model, 1000, 2.0, seed=100 + seed)
            t = sum((tr.dwell_times(4) for tr in trajs), np.zeros(4))
            m = sum((tr.transition_counts(4) for tr in trajs), np.zeros((4, 4)))
            provider = FlatFamilyProvider(space, t, m)
            graph = structure_search(provider, model, 1, 1000)
            if graph["x"] == ():
                rejected += 1
        assert rejected >= 18


class TestStructureSearch:
    def strong_dependency_model(self):
        # c's rates depend on b with a 10x ratio; a and b are independent.
        va, vb, vc = (Variable(n, (f"{n}0", f"{n}1")) for n in "abc")
        cims = {
            "a": Cim((), (), np.array([[[-1.0, 1.0], [1.2, -1.2]]])),
            "b": Cim((), (), np.array([[[-0.9, 0.9], [1.1, -1.1]]])),
            "c": Cim(
                ("b",),
                (2,),
                np.array([[[-0.3, 0.3], [0.3, -0.3]], [[-3.0, 3.0], [3.0, -3.0]]]),
            ),
        }
        initial = {n: [0.5, 0.5] for n in "abc"}
        return CtbnModel((va, vb, vc), cims, initial)

    def test_zero_max_parents_gives_empty_graph(self):
        model = self.strong_dependency_model()
        dataset, trajs, space = fully_observed_dataset(model, 50, 2.0, seed=13)
        t = sum((tr.dwell_times(8) for tr in trajs), np.zeros(8))
        m = sum((tr.transition_counts(8) for tr in trajs), np.zeros((8, 8)))
        graph = structure_search(FlatFamilyProvider(space, t, m), model, 0, 50)
        assert graph == {"a": (), "b": (), "c": ()}

    def test_single_variable_has_no_candidates(self):
        model = independent_binary_model(names=("x",), rates=((1.0, 2.0),))
        dataset, trajs, space = fully_observed_dataset(model, 5, 2.0, seed=14)
        t = trajs[0].dwell_times(2)
        m = trajs[0].transition_counts(2)
        graph = structure_search(FlatFamilyProvider(space, t, m), model, 2, 5)
        assert graph == {"x": ()}

    def test_strong_dependency_recovered(self):
        model = self.strong_dependency_model()
        hits = 0
        for seed in range(20):
            dataset, trajs, space = fully_observed_dataset(model, 1000, 2.0, seed=200 + seed)
            t = sum((tr.dwell_times(8) for tr in trajs), np.zeros(8))
            m = sum((tr.transition_counts(8) for tr in trajs), np.zeros((8, 8)))
            graph = structure_search(FlatFamilyProvider(space, t, m), model, 2, 1000)
            if graph["c"] == ("b",):
                hits += 1
        assert hits >= 18

    def test_per_variable_choices_are_independent(self):
        model = self.strong_dependency_model()
        dataset, trajs, space = fully_observed_dataset(model, 300, 2.0, seed=15)
        t = sum((tr.dwell_times(8) for tr in trajs), np.zeros(8))
        m = sum((tr.transition_counts(8) for tr in trajs), np.zeros((8, 8)))
        provider = FlatFamilyProvider(space, t, m)
        full = structure_search(provider, model, 2, 300)
        narrowed = structure_search(
            provider, model, 2, 300, candidates={"a": (), "b": (), "c": ("a", "b")}
        )
        assert narrowed["c"] == full["c"]


class TestSem:
    def test_empty_graph_recovered(self):
        model = independent_binary_model(
            names=("x", "y", "z"), rates=((1.0, 2.0), (0.6, 1.4), (0.8, 0.9))
        )
        cfg = SemConfig(
            em=EmConfig(max_iter=3, tol=1e-4, init="given", restarts=1),
            max_parents=2,
            em_iters=1,
            max_rounds=3,
        )
        hits = 0
        for seed in range(20):
            dataset, _, _ = fully_observed_dataset(model, 1000, 1.0, seed=300 + seed)
            fit = sem(model, dataset, cfg)
            if all(fit.model.parents(n) == () for n in model.names):
                hits += 1
        assert hits >= 18

    def test_true_structure_start_matches_plain_em(self):
        model = binary_chain_model()
        dataset, _, _ = fully_observed_dataset(model, 100, 2.0, seed=16)
        em_cfg = EmConfig(max_iter=10, tol=1e-9, init="given", restarts=1)
        plain = em(model, dataset, em_cfg)
        fit = sem(model, dataset, SemConfig(em=em_cfg, max_parents=2, em_iters=2, max_rounds=4))
        assert fit.model.graph() == model.graph()
        assert fit.log_likelihood == pytest.approx(plain.log_likelihood, abs=1e-9)

    def test_bic_trace_never_decreases(self):
        model = self_model = TestStructureSearch().strong_dependency_model()
        dataset, _, _ = fully_observed_dataset(model, 200, 2.0, seed=17)
        fit = sem(
            model,
            dataset,
            SemConfig(em=EmConfig(max_iter=3, tol=1e-6, init="random", restarts=1, seed=5),
                      max_parents=2, em_iters=1, max_rounds=6),
        )
        trace = np.array(fit.bic_trace)
        assert (np.diff(trace) >= 0).all()
