import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from doge.autodiff import FlatGradient
from doge.core import (DogeHyperparams, ProxyStepError, Stage, StepRecord, WeightTrajectory, average_weights,
                       check_simplex, cumulative_average, generalization_scores, influence_decomposition,
                       mirror_objective, per_domain_gradients, read_weights, reweighted_step, run_proxy_ood,
                       run_proxy_universal, stage_average, stage_bounds, target_gradient_universal,
                       update_domain_weights, write_weights)
from doge.data import DomainCorpus, derive_rng, uniform_domain_batch
from doge.errors import ConfigError, ContractError
from doge.model import Transformer, TransformerConfig, gradient
from doge.synthetic import DomainSpec, SyntheticSpec, generate_synthetic
from oracles import naive_inner

PROXY = TransformerConfig(n_layers=1, n_heads=2, d_model=16, d_hidden=32, context_length=15, seed=0)
SLIMPAJAMA = {"Arxiv": 0.088, "Book": 0.045, "C4": 0.269, "CommonCrawl": 0.214, "Github": 0.070,
              "Stackexchange": 0.166, "Wikipedia": 0.148}


def flat(values):
    v = np.asarray(values, dtype=np.float64)
    return FlatGradient(v, (0,), (0,), (v.size,), v.size, (0,), (v.size,))


@pytest.fixture(scope="module")
def corpus():
    spec = SyntheticSpec([DomainSpec("a"), DomainSpec("b", like="a", overlap=0.5), DomainSpec("c")],
                         seq_len=16, sequences_per_domain=40, ood={"a": 1.0}, seed=1)
    return generate_synthetic(spec)


@pytest.fixture(scope="module")
def real_grads(corpus):
    model = Transformer(PROXY)
    batches = [uniform_domain_batch(corpus, i, 4, derive_rng(0, "t", i)) for i in range(corpus.k)]
    return model, per_domain_gradients(model, batches)


def _hp(**kw):
    base = dict(steps=6, batch_size=4, lr_max=0.3, lr_min=0.03, weight_lr_scale=0.2, seed=0)
    base.update(kw)
    return DogeHyperparams(**base)


# --------------------------------------------------------------- W scores


def test_scores_hand_example():
    W = generalization_scores([flat([1, 0]), flat([1, 1])], flat([2, 1]))
    assert W.values.tolist() == [2.0, 3.0]


def test_scores_identical_and_orthogonal_gradients():
    g = flat([1.5, -2.0, 0.5])
    assert generalization_scores([g, g], flat(2 * g.values)).values.tolist() == [13.0, 13.0]
    g1, g2 = flat([3.0, 0.0]), flat([0.0, -2.0])
    assert generalization_scores([g1, g2], flat([3.0, -2.0])).values.tolist() == [9.0, 4.0]


def test_scores_normalization():
    W = generalization_scores([flat([1, 0]), flat([-4, 0])], flat([1, 0]), normalize=True)
    assert W.values.tolist() == [0.25, -1.0] and W.normalized


def test_scores_length_mismatch():
    with pytest.raises(ContractError):
        generalization_scores([flat([1, 0, 0])], flat([1, 0]))


def test_decomposition_hand_example():
    g = [flat([1, 0]), flat([1, 1])]
    assert influence_decomposition(g, 1) == (1.0, 2.0)
    assert sum(influence_decomposition(g, 1)) == generalization_scores(g, flat([2, 1])).values[1]


def test_decomposition_degenerate_cases():
    g = flat([1.0, 2.0])
    assert influence_decomposition([g, g, g], 0) == (10.0, 5.0)
    assert influence_decomposition([g], 0) == (0.0, 5.0)
    with pytest.raises(ContractError):
        influence_decomposition([g], 1)


def test_decomposition_is_bitwise_exact_in_exact_arithmetic():
    # dyadic entries with bounded magnitude: every product and partial sum is representable
    rng = np.random.default_rng(0)
    grads = [flat(rng.integers(-1000, 1001, 20_000) / 256.0) for _ in range(5)]
    target = target_gradient_universal(None, None, 0, None, domain_grads=grads)
    W = generalization_scores(grads, target).values
    for j in range(5):
        a, b = influence_decomposition(grads, j)
        assert a + b == W[j]


def test_decomposition_on_transformer_gradients(real_grads):
    _, grads = real_grads
    target = target_gradient_universal(None, None, 0, None, domain_grads=grads)
    W = generalization_scores(grads, target).values
    for j in range(len(grads)):
        assert sum(influence_decomposition(grads, j)) == pytest.approx(W[j], rel=1e-12)


def test_inner_product_matches_double_loop(real_grads):
    model, grads = real_grads
    target = target_gradient_universal(None, None, 0, None, domain_grads=grads)
    W = generalization_scores(grads, target).values
    t_segs = [target.segment(g.id) for g in model.groups]
    for j, g in enumerate(grads):
        naive = naive_inner([g.segment(grp.id) for grp in model.groups], t_segs)
        assert abs(W[j] - naive) <= 1e-10 * abs(naive)


def test_total_mask_scores_are_bitwise_equal(real_grads):
    model, grads = real_grads
    everything = [g.id for g in model.groups]
    target = target_gradient_universal(None, None, 0, None, domain_grads=grads)
    full = generalization_scores(grads, target).values
    masked = generalization_scores([g.restrict(everything) for g in grads], target.restrict(everything)).values
    assert full.tobytes() == masked.tobytes()


# -------------------------------------------------------- per-domain grads


def test_per_domain_gradients_examples(corpus):
    model = Transformer(PROXY)
    batch = uniform_domain_batch(corpus, 0, 4, derive_rng(1, "x"))
    (only,) = per_domain_gradients(model, [batch])
    _, direct = gradient(model, batch.tokens)
    assert np.array_equal(only.values, direct.values)
    g1, g2 = per_domain_gradients(model, [batch, batch])
    assert np.array_equal(g1.values, g2.values)
    masked, = per_domain_gradients(model, [batch], mask=[1, 3])
    assert np.array_equal(masked.values, direct.restrict([1, 3]).values)
    assert np.array_equal(masked.expand()[:model.groups[0].size], np.zeros(model.groups[0].size))


def test_worker_count_does_not_change_gradients(corpus):
    model = Transformer(PROXY)
    batches = [uniform_domain_batch(corpus, i, 4, derive_rng(2, "x", i)) for i in range(3)]
    one = per_domain_gradients(model, batches, workers=1)
    many = per_domain_gradients(model, batches, workers=3)
    assert all(a.values.tobytes() == b.values.tobytes() for a, b in zip(one, many))


def test_universal_target_modes(corpus):
    model = Transformer(PROXY)
    g1, g2 = flat([1.0, 2.0]), flat([0.5, -1.0])
    assert target_gradient_universal(model, corpus, 4, None, domain_grads=[g1, g2]).values.tolist() == [1.5, 1.0]
    a = target_gradient_universal(model, corpus, 4, derive_rng(0, "t"))
    b = target_gradient_universal(model, corpus, 4, derive_rng(0, "t"))
    assert a.values.tobytes() == b.values.tobytes()
    one = DomainCorpus(("a",), (corpus.domains[0],))
    fresh = target_gradient_universal(model, one, 4, derive_rng(0, "u"))
    batch = uniform_domain_batch(one, 0, 4, derive_rng(0, "u"))
    assert np.array_equal(fresh.values, gradient(model, batch.tokens)[1].values)


# --------------------------------------------------------------- update


def test_update_hand_example():
    out = update_domain_weights([0.5, 0.5], [1.0, 0.0], 1.0, 1.0)
    assert out[0] == pytest.approx(math.e / (1 + math.e), abs=1e-15)
    assert out.round(6).tolist() == [0.731059, 0.268941]


def test_zero_scores_leave_weights_unchanged():
    a = np.array([0.2, 0.3, 0.5])
    assert np.allclose(update_domain_weights(a, np.zeros(3), 0.7, 2.0), a, rtol=0, atol=1e-16)


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.floats(-1e3, 1e3), st.floats(0.01, 2.0))
def test_shift_invariance(W, c, eta):
    a = np.array([0.2, 0.3, 0.5])
    assert np.allclose(update_domain_weights(a, np.add(W, c), eta, 1.0), update_domain_weights(a, W, eta, 1.0),
                       rtol=1e-9, atol=1e-12)


def test_update_errors():
    with pytest.raises(ContractError):
        update_domain_weights([0.5, 0.5], [np.nan, 0.0], 1.0, 1.0)
    with pytest.raises(ContractError):
        update_domain_weights([0.0, 0.0], [1.0, 0.0], 1.0, 1.0)
    with pytest.raises(ContractError):
        update_domain_weights([0.5, 0.5], [1.0, 0.0], 1.0, 0.0)


def test_huge_scores_do_not_overflow():
    out = update_domain_weights([0.5, 0.5], [1e300, 0.0], 1.0, 1e-5)
    assert out.tolist() == [1.0, 0.0]


def test_zero_entries_stay_zero():
    out = update_domain_weights([0.0, 0.4, 0.6], [100.0, 0.0, 0.0], 1.0, 1.0)
    assert out[0] == 0.0 and out.sum() == pytest.approx(1.0)


def test_simplex_preserved_over_many_updates():
    rng = np.random.default_rng(0)
    a = np.full(5, 0.2)
    for _ in range(10_000):
        a = update_domain_weights(a, rng.normal(0, 3, 5), rng.uniform(0.01, 1.0), rng.uniform(0.1, 5.0))
        assert abs(a.sum() - 1.0) < 1e-9 and np.all(a >= 0)


def _random_instances(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        k = int(rng.integers(2, 8))
        yield (rng.dirichlet(np.ones(k)) * 0.98 + 0.02 / k, rng.normal(0, 2, k),
               float(rng.uniform(0.01, 1.0)), float(rng.uniform(0.1, 5.0)), rng)


def test_stationarity_condition():
    for a, W, eta, mu, _ in _random_instances(1000):
        new = update_domain_weights(a, W, eta, mu)
        resid = np.log(new) - np.log(a) - eta * W / mu
        assert np.ptp(resid) < 1e-9


def test_update_minimizes_mirror_objective():
    for a, W, eta, mu, rng in _random_instances(200, seed=1):
        new = update_domain_weights(a, W, eta, mu)
        best = mirror_objective(new, a, W, eta, mu)
        others = rng.dirichlet(np.ones(a.size), size=1000)
        vals = -eta * others @ W + mu * np.sum(others * (np.log(others) - np.log(a)), axis=1)
        assert best <= vals.min()


@settings(max_examples=200)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.integers(0, 3), st.floats(0, 20))
def test_monotone_response(W, j, bump):
    a = np.array([0.1, 0.2, 0.3, 0.4])
    W2 = list(W)
    W2[j] += bump
    assert update_domain_weights(a, W2, 0.5, 1.0)[j] >= update_domain_weights(a, W, 0.5, 1.0)[j]


def test_check_simplex():
    check_simplex([0.25, 0.75], 2)
    for bad in ([0.5, 0.6], [-0.1, 1.1], [np.nan, 1.0]):
        with pytest.raises(ContractError):
            check_simplex(bad)


# ------------------------------------------------------ reweighted step


def test_reweighted_step_direction():
    class Recorder:
        def apply_update(self, d, eta):
            self.d, self.eta = d, eta

    m = Recorder()
    reweighted_step(m, [flat([4.0, 0.0]), flat([0.0, 4.0])], [0.25, 0.75], 0.1)
    assert m.d.values.tolist() == [1.0, 3.0] and m.eta == 0.1
    g = [flat([1.0, -2.0]), flat([3.0, 5.0]), flat([7.0, 0.5])]
    reweighted_step(m, g, [0, 1.0, 0], 0.1)
    assert np.array_equal(m.d.values, g[1].values)
    same = flat([0.3, -0.7])
    reweighted_step(m, [same] * 4, np.full(4, 0.25), 0.1)
    assert np.array_equal(m.d.values, same.values)


def test_first_order_prediction_ranks_realized_decrease(corpus):
    model = Transformer(PROXY, clip_norm=None)
    batches = [uniform_domain_batch(corpus, i, 8, derive_rng(3, "fo", i)) for i in range(corpus.k)]
    grads = per_domain_gradients(model, batches)
    target = target_gradient_universal(None, None, 0, None, domain_grads=grads)
    W = generalization_scores(grads, target).values
    base = sum(gradient(model, b.tokens)[0] for b in batches)
    eta = 1e-3
    rng = np.random.default_rng(0)
    predicted, realized = [], []
    for _ in range(50):
        alpha = rng.dirichlet(np.ones(corpus.k))
        m = model.clone()
        reweighted_step(m, grads, alpha, eta)
        realized.append(base - sum(gradient(m, b.tokens)[0] for b in batches))
        predicted.append(eta * alpha @ W)
    assert stats.spearmanr(predicted, realized).statistic > 0


# ------------------------------------------------------------ proxy loops


def test_single_step_average_is_that_step(corpus):
    res = run_proxy_universal(corpus, PROXY, _hp(steps=1))
    assert np.array_equal(res.weights, res.trajectory.records[0].alpha)
    assert len(res.trajectory) == 1


def test_proxy_is_deterministic(corpus):
    a = run_proxy_universal(corpus, PROXY, _hp())
    b = run_proxy_universal(corpus, PROXY, _hp())
    assert a.trajectory.alphas.tobytes() == b.trajectory.alphas.tobytes()
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.model.params, b.model.params))


def test_proxy_workers_match_single_thread(corpus):
    a = run_proxy_universal(corpus, PROXY, _hp(steps=3))
    b = run_proxy_universal(corpus, PROXY, _hp(steps=3, workers=3))
    assert a.trajectory.alphas.tobytes() == b.trajectory.alphas.tobytes()


def test_proxy_trajectory_contents(corpus):
    res = run_proxy_ood(corpus, PROXY, _hp(normalize_scores=True))
    traj = res.trajectory
    assert traj.ood and traj.normalized
    assert traj.steps.tolist() == list(range(1, 7))
    for rec in traj.records:
        check_simplex(rec.alpha, 3)
        assert np.max(np.abs(rec.scores)) == pytest.approx(1.0)
        assert np.all(rec.losses > 0)
    assert np.allclose(res.weights, traj.alphas.mean(axis=0))


def test_sum_target_mode_runs(corpus):
    res = run_proxy_universal(corpus, PROXY, _hp(steps=2, target="sum"))
    assert len(res.trajectory) == 2


def test_single_domain_ood_run(corpus):
    one = DomainCorpus(("a",), (corpus.domains[0],), corpus.ood)
    assert run_proxy_ood(one, PROXY, _hp(steps=3)).weights.tolist() == [1.0]


def test_ood_mode_needs_target(corpus):
    plain = DomainCorpus(corpus.names, corpus.domains)
    with pytest.raises(ConfigError):
        run_proxy_ood(plain, PROXY, _hp())


def test_step_failure_reports_step(corpus):
    bad = DomainCorpus(corpus.names, corpus.domains, corpus.ood)
    cfg = TransformerConfig(n_layers=1, n_heads=2, d_model=16, d_hidden=32, context_length=4)
    with pytest.raises(ProxyStepError) as err:
        run_proxy_universal(bad, cfg, _hp())
    assert err.value.step == 1


def test_masked_proxy_records_fraction(corpus):
    model = Transformer(PROXY)
    mask = (0, 2)
    res = run_proxy_universal(corpus, PROXY, _hp(steps=2, mask=mask))
    expected = sum(model.groups[i].size for i in mask) / model.num_parameters
    assert res.trajectory.mask_fraction == pytest.approx(expected)


def test_hyperparam_validation():
    for bad in (dict(mu=0.0), dict(steps=0), dict(target="odd")):
        with pytest.raises(ConfigError):
            DogeHyperparams(**bad).validate()


# ------------------------------------------------------ averaging/stages


def _traj(alphas):
    t = WeightTrajectory(tuple(f"d{i}" for i in range(len(alphas[0]))))
    for s, a in enumerate(alphas, 1):
        t.append(StepRecord(s, np.asarray(a, float), np.zeros(len(a)), np.zeros(len(a))))
    return t


def test_stage_average_examples():
    assert average_weights(_traj([[1, 0], [0, 1]])).tolist() == [0.5, 0.5]
    (only,) = stage_average(_traj([[1, 0], [0, 1]]), 1)
    assert only.weights.tolist() == [0.5, 0.5]
    s1, s2 = stage_average(_traj([[1, 0], [1, 0], [0, 1], [0, 1]]), 2)
    assert (s1.start_step, s1.end_step, s1.weights.tolist()) == (1, 2, [1.0, 0.0])
    assert (s2.start_step, s2.end_step, s2.weights.tolist()) == (3, 4, [0.0, 1.0])
    const = stage_average(_traj([[0.3, 0.7]] * 9), 3)
    assert all(np.allclose(s.weights, [0.3, 0.7], rtol=1e-15, atol=0) for s in const)


def test_stage_bounds_remainder_goes_last():
    assert stage_bounds(10, 3) == [(0, 2), (3, 5), (6, 9)]
    with pytest.raises(ContractError):
        stage_bounds(3, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**16))
def test_stages_preserve_expected_tokens(T, K, seed):
    assume(K <= T)
    alphas = np.random.default_rng(seed).dirichlet(np.ones(3), size=T)
    traj = _traj(alphas)
    stages = stage_average(traj, K)
    assert sum(s.length for s in stages) == T
    total = sum(s.length * s.weights for s in stages)
    assert np.allclose(total, T * average_weights(traj), rtol=1e-12, atol=0)


def test_constant_trajectory_has_constant_running_average():
    avg = cumulative_average(np.tile([0.25, 0.75], (20, 1)))
    assert np.allclose(avg, [0.25, 0.75], rtol=0, atol=1e-16)


def test_trajectory_steps_must_increase():
    t = _traj([[0.5, 0.5]])
    with pytest.raises(ContractError):
        t.append(StepRecord(1, np.array([0.5, 0.5]), np.zeros(2), np.zeros(2)))


def test_trajectory_csv_round_trip(tmp_path, corpus):
    res = run_proxy_universal(corpus, PROXY, _hp())
    res.trajectory.to_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "step,domain,alpha,score,loss"
    back = WeightTrajectory.from_csv(tmp_path / "t.csv")
    assert back.names == res.trajectory.names
    assert back.alphas.tobytes() == res.trajectory.alphas.tobytes()
    res.trajectory.to_csv(tmp_path / "s.csv", stride=4)
    assert WeightTrajectory.from_csv(tmp_path / "s.csv").steps.tolist() == [4, 6]


# ------------------------------------------------------------- weights file


def test_weights_fixture_round_trip(tmp_path):
    names, w = tuple(SLIMPAJAMA), np.array(list(SLIMPAJAMA.values()))
    write_weights(tmp_path / "w.json", names, w)
    back_names, back, stages = read_weights(tmp_path / "w.json")
    assert back_names == names and stages is None
    assert dict(zip(back_names, back.tolist())) == SLIMPAJAMA
    assert json.loads((tmp_path / "w.json").read_text())["weights"] == SLIMPAJAMA


def test_weights_file_with_schedule(tmp_path):
    stages = [Stage(1, 2, np.array([0.25, 0.75])), Stage(3, 5, np.array([0.5, 0.5]))]
    write_weights(tmp_path / "w.json", ("x", "y"), [0.4, 0.6], stages)
    doc = json.loads((tmp_path / "w.json").read_text())
    assert doc["schedule"][1] == {"start_step": 3, "end_step": 5, "weights": {"x": 0.5, "y": 0.5}}
    _, _, back = read_weights(tmp_path / "w.json")
    assert [(s.start_step, s.end_step, s.weights.tolist()) for s in back] == [(1, 2, [0.25, 0.75]),
                                                                             (3, 5, [0.5, 0.5])]


def test_bare_mapping_is_accepted(tmp_path):
    (tmp_path / "w.json").write_text(json.dumps(SLIMPAJAMA))
    names, w, _ = read_weights(tmp_path / "w.json")
    assert names == tuple(SLIMPAJAMA) and w.tolist() == list(SLIMPAJAMA.values())
