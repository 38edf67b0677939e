import math

import numpy as np
import pytest
from scipy import integrate, stats

from risknet import model as mdl
from risknet.errors import ParameterError
from risknet.features import (
    FeatureSet,
    MetaGraph,
    apply_normalizer,
    build_metagraph,
    extract_features,
    fit_normalizer,
    permute_components,
    permute_slas,
    union,
)
from risknet.provisioning import make_scenario
from risknet.rng import stream

MODE_LOGPDF = -0.9686195890547241  # lnG(3) - lnG(5/2) - ln(5 pi)/2


def toy_graph(rng=None):
    rng = rng or np.random.default_rng(0)
    g = MetaGraph(
        5, 3,
        np.array([[0, 0], [0, 1], [1, 2], [2, 3]]),
        np.array([[0, 2], [0, 3], [1, 0], [1, 1], [2, 4]]),
    )
    f = FeatureSet(rng.normal(size=(5, 4)), rng.normal(size=(3, 1)))
    return g, f, rng.normal(size=3)


def scenario_inputs(n_routers, seed):
    scen = make_scenario(n_routers, seed)
    f = extract_features(scen)
    stats = fit_normalizer([f], [np.ones(2)])
    return build_metagraph(scen), apply_normalizer(stats, f)


def inverse_softplus(y):
    return math.log(math.expm1(y))


def test_init_deterministic_and_bounded():
    hyper = mdl.Hyper()
    a, b = mdl.init_params(hyper, 3), mdl.init_params(hyper, 3)
    assert a.keys() == b.keys()
    for name, value in a.items():
        np.testing.assert_array_equal(value, b[name])
        assert value.shape == mdl.param_shapes(hyper)[name]
        if value.ndim == 2:
            assert np.abs(value).max() <= mdl.glorot_limit(value.shape)
            assert np.abs(value).max() > 0
        else:
            assert not value.any()
    c = mdl.init_params(hyper, 4)
    assert not np.array_equal(a["msg_p_sc_W"], c["msg_p_sc_W"])


def test_hyper_validation():
    with pytest.raises(ParameterError):
        mdl.Hyper(T=0)
    with pytest.raises(ParameterError):
        mdl.Hyper(hidden_dim=2)
    assert mdl.Hyper.from_dict(mdl.Hyper(T=2).to_dict()) == mdl.Hyper(T=2)


def test_softplus_head_at_zero():
    hyper = mdl.Hyper(T=1)
    params = mdl.zeros_like(mdl.init_params(hyper))
    g, f, _ = toy_graph()
    pred = mdl.forward(params, hyper, g, f)
    np.testing.assert_allclose(pred.sigma, math.log(2) + 1e-6, rtol=1e-15)
    assert not pred.mu.any()


def test_zero_edge_graph_finite():
    hyper = mdl.Hyper()
    g = MetaGraph(4, 3, np.zeros((0, 2), int), np.zeros((0, 2), int))
    f = FeatureSet(np.ones((4, 4)), np.array([[0.5], [-1.0], [2.0]]))
    pred = mdl.forward(mdl.init_params(hyper, 1), hyper, g, f)
    assert np.all(np.isfinite(pred.mu)) and np.all(pred.sigma > 0)


def test_dimension_mismatch():
    g, f, _ = toy_graph()
    bad = FeatureSet(f.component[:, :3], f.sla)
    with pytest.raises(ParameterError):
        mdl.forward(mdl.init_params(mdl.Hyper()), mdl.Hyper(), g, bad)


def test_logpdf_mode_value_and_oracles():
    assert mdl.student_t_logpdf(0.0, 0.0, 1.0, 5) == pytest.approx(MODE_LOGPDF, abs=1e-15)
    assert mdl.student_t_logpdf(0.0, 0.0, 1.0, 5) == pytest.approx(stats.t.logpdf(0, 5), abs=1e-14)
    mass, _ = integrate.quad(lambda y: math.exp(mdl.student_t_logpdf(y, 0.3, 1.7, 5)), -np.inf, np.inf)
    assert mass == pytest.approx(1.0, abs=1e-9)


def test_logpdf_scale_and_symmetry():
    y, mu, s = 1.3, 0.2, 0.8
    lhs = mdl.student_t_logpdf(y, mu, 2 * s, 5)
    rhs = mdl.student_t_logpdf(mu + (y - mu) / 2, mu, s, 5) - math.log(2)
    assert lhs == pytest.approx(rhs, abs=1e-15)
    assert mdl.student_t_logpdf(mu + 0.7, mu, s) == mdl.student_t_logpdf(mu - 0.7, mu, s)


def _params_predicting(hyper, mu, sigma):
    params = mdl.zeros_like(mdl.init_params(hyper))
    out = f"readout_{len(hyper.readout_sizes)}_b"
    params[out][0] = mu
    params[out][1] = inverse_softplus(sigma - mdl.SCALE_FLOOR)
    return params


def test_loss_exact_prediction_zero_weights():
    hyper = mdl.Hyper(T=2)
    g = MetaGraph(2, 1, np.array([[0, 0]]), np.array([[0, 1]]))
    f = FeatureSet(np.zeros((2, 4)), np.zeros((1, 1)))
    params = _params_predicting(hyper, 0.7, 1.0)
    value = mdl.loss(params, hyper, g, f, np.array([0.7]))
    assert value == pytest.approx(-MODE_LOGPDF, abs=1e-12)


def test_regularizer_linear_in_coefficient():
    g, f, y = toy_graph()
    p = mdl.init_params(mdl.Hyper(), 2)
    base = mdl.loss(p, mdl.Hyper(l2_coeff=0.0), g, f, y)
    one = mdl.loss(p, mdl.Hyper(l2_coeff=0.01), g, f, y) - base
    two = mdl.loss(p, mdl.Hyper(l2_coeff=0.02), g, f, y) - base
    assert two == pytest.approx(2 * one, rel=1e-12)
    expected = 0.01 * sum(np.sum(p[n] ** 2) for n in mdl.regularized_names())
    assert one == pytest.approx(expected, rel=1e-10)


def test_loss_decreases_toward_label():
    hyper = mdl.Hyper(T=1)
    g = MetaGraph(1, 1, np.array([[0, 0]]), np.zeros((0, 2), int))
    f = FeatureSet(np.zeros((1, 4)), np.zeros((1, 1)))
    y = np.array([1.0])
    values = [mdl.loss(_params_predicting(hyper, m, 0.5), hyper, g, f, y) for m in (-2, -1, 0, 0.5, 1)]
    assert all(a > b for a, b in zip(values, values[1:]))


def _fd_block(params, hyper, g, f, y, masks, name, rng, h=1e-4):
    v = rng.normal(size=params[name].shape)
    v /= np.linalg.norm(v)
    plus = dict(params)
    minus = dict(params)
    plus[name] = params[name] + h * v
    minus[name] = params[name] - h * v
    fd = (mdl.loss(plus, hyper, g, f, y, masks=masks) - mdl.loss(minus, hyper, g, f, y, masks=masks)) / (2 * h)
    return v, fd


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    g, f, y = toy_graph(rng)
    hyper = mdl.Hyper()
    params = mdl.init_params(hyper, 5)
    for name in params:
        if name.endswith("_b"):
            params[name] = 0.1 * rng.normal(size=params[name].shape)
    masks = mdl.dropout_masks(hyper, g.n_slas, stream(3))
    _, grads = mdl.gradients(params, hyper, g, f, y, masks=masks)
    for name in params:
        v, fd = _fd_block(params, hyper, g, f, y, masks, name, rng)
        an = float(np.sum(grads[name] * v))
        assert abs(an - fd) / max(abs(an), abs(fd), 1e-12) < 1e-4, name


def test_zero_edge_message_gradients_are_pure_regularization():
    hyper = mdl.Hyper(T=3)
    g = MetaGraph(4, 2, np.zeros((0, 2), int), np.zeros((0, 2), int))
    f = FeatureSet(np.ones((4, 4)), np.array([[0.5], [-1.0]]))
    params = mdl.init_params(hyper, 2)
    _, grads = mdl.gradients(params, hyper, g, f, np.array([0.1, 0.2]))
    for name in mdl.MESSAGE_MAPS:
        np.testing.assert_array_equal(
            grads[f"msg_{name}_W"], 2 * hyper.l2_coeff * params[f"msg_{name}_W"]
        )
        assert not grads[f"msg_{name}_b"].any()


def test_bias_gradients_have_no_l2():
    g, f, y = toy_graph()
    params = mdl.init_params(mdl.Hyper(), 1)
    _, g0 = mdl.gradients(params, mdl.Hyper(l2_coeff=0.0), g, f, y)
    _, g1 = mdl.gradients(params, mdl.Hyper(l2_coeff=0.5), g, f, y)
    for name in params:
        if name in mdl.regularized_names():
            np.testing.assert_allclose(g1[name] - g0[name], 2 * 0.5 * params[name], atol=1e-12)
        else:
            np.testing.assert_array_equal(g1[name], g0[name])


def test_sla_permutation_equivariance():
    hyper = mdl.Hyper()
    params = mdl.init_params(hyper, 7)
    g, f = scenario_inputs(11, 3)
    perm = np.random.default_rng(1).permutation(g.n_slas)
    pg, pf = permute_slas(g, f, perm)
    a = mdl.predict(params, hyper, g, f)
    b = mdl.predict(params, hyper, pg, pf)
    np.testing.assert_allclose(b.mu[perm], a.mu, atol=1e-10, rtol=0)
    np.testing.assert_allclose(b.sigma[perm], a.sigma, atol=1e-10, rtol=0)


def test_component_permutation_invariance():
    hyper = mdl.Hyper()
    params = mdl.init_params(hyper, 7)
    g, f = scenario_inputs(11, 4)
    perm = np.random.default_rng(2).permutation(g.n_components)
    pg, pf = permute_components(g, f, perm)
    a = mdl.predict(params, hyper, g, f)
    b = mdl.predict(params, hyper, pg, pf)
    np.testing.assert_allclose(b.mu, a.mu, atol=1e-10, rtol=0)
    np.testing.assert_allclose(b.sigma, a.sigma, atol=1e-10, rtol=0)


def _non_incident(g, sla):
    used = set(g.edges_working[g.edges_working[:, 0] == sla, 1]) | set(
        g.edges_backup[g.edges_backup[:, 0] == sla, 1]
    )
    return [c for c in range(g.n_components) if c not in used]


def test_single_round_is_local():
    g, f = scenario_inputs(12, 2)
    for T, local in ((1, True), (6, False)):
        hyper = mdl.Hyper(T=T)
        params = mdl.init_params(hyper, 1)
        base = mdl.predict(params, hyper, g, f)
        c = _non_incident(g, 0)[0]
        comp = f.component.copy()
        comp[c] += 3.0
        moved = mdl.predict(params, hyper, g, FeatureSet(comp, f.sla))
        if local:
            assert moved.mu[0] == base.mu[0] and moved.sigma[0] == base.sigma[0]
        else:
            assert moved.mu[0] != base.mu[0]


def test_batch_union_matches_individual():
    hyper = mdl.Hyper()
    params = mdl.init_params(hyper, 3)
    parts = [scenario_inputs(n, s) for n, s in ((8, 1), (10, 2), (9, 3))]
    g, f, offsets = union([p[0] for p in parts], [p[1] for p in parts])
    merged = mdl.predict(params, hyper, g, f)
    single = np.concatenate([mdl.predict(params, hyper, *p).mu for p in parts])
    np.testing.assert_allclose(merged.mu, single, atol=1e-10, rtol=0)


def test_batch_loss_is_mean_of_sample_means():
    hyper = mdl.Hyper(T=2)
    params = mdl.init_params(hyper, 3)
    parts = [scenario_inputs(n, s) for n, s in ((8, 1), (10, 2))]
    rng = np.random.default_rng(0)
    ys = [rng.normal(size=p[0].n_slas) for p in parts]
    g, f, offsets = union([p[0] for p in parts], [p[1] for p in parts])
    batched = mdl.loss(params, hyper, g, f, np.concatenate(ys), offsets)
    reg = mdl.regularization(params, hyper)
    each = [mdl.loss(params, hyper, p[0], p[1], y) - reg for p, y in zip(parts, ys)]
    assert batched == pytest.approx(np.mean(each) + reg, abs=1e-12)


def test_mc_dropout_single_pass_and_no_dropout():
    g, f = scenario_inputs(9, 1)
    hyper = mdl.Hyper()
    params = mdl.init_params(hyper, 4)
    one = mdl.predict_mc_dropout(params, hyper, g, f, 1, seed=5)
    ref = mdl.forward(params, hyper, g, f, rng=stream(5, 0))
    np.testing.assert_array_equal(one.mu, ref.mu)
    eval_pred = mdl.predict(params, hyper, g, f)
    assert not np.allclose(one.mu, eval_pred.mu)
    plain = mdl.Hyper(dropout_rates=(0.0, 0.0))
    many = mdl.predict_mc_dropout(params, plain, g, f, 4, seed=5)
    np.testing.assert_allclose(many.mu, mdl.predict(params, plain, g, f).mu, atol=1e-14, rtol=0)


def test_mc_dropout_variance_shrinks():
    g, f = scenario_inputs(8, 2)
    hyper = mdl.Hyper(T=2)
    params = mdl.init_params(hyper, 4)
    spread = {}
    for n in (1, 16):
        means = np.array([mdl.predict_mc_dropout(params, hyper, g, f, n, seed=s).mu for s in range(60)])
        spread[n] = means.var(axis=0).mean()
    ratio = spread[1] / spread[16]
    assert 8 < ratio < 32


def test_checkpoint_round_trip(tmp_path):
    hyper = mdl.Hyper(T=3)
    params = mdl.init_params(hyper, 9)
    stats = fit_normalizer([FeatureSet(np.ones((2, 4)), np.ones((1, 1)))], [np.arange(4.0)])
    path = tmp_path / "ckpt.json"
    mdl.save_checkpoint(path, params, hyper, stats)
    p2, h2, s2 = mdl.load_checkpoint(path)
    assert h2 == hyper
    assert s2.label_mean == stats.label_mean
    for name in params:
        np.testing.assert_array_equal(p2[name], params[name])
