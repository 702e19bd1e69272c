import numpy as np
import pytest

from hessalign.autodiff import NUMPY_OPS, Tape, grad
from hessalign.estimators import RademacherStream
from hessalign.model import Batch, ClassifierHead, FeatureExtractorParams, bind, init_params, one_hot, tape_forward
from hessalign.objectives import (
    METHODS, PenaltyConfig, env_hessians, exact_hessian_variance, hessian_distance, irm_grad_sq, objective, spread,
    tape_head_hessian,
)
from hessalign import head_calculus as hc
from hessalign.verify import rel_err


def _data(seed, n=10, d_in=3, c=2):
    r = np.random.default_rng(seed)
    return Batch(r.uniform(-2, 2, (n, d_in)), one_hot(r.integers(0, c, n), c))


def _model(seed=0, sizes=(3, 5, 4, 2), act="tanh"):
    params, head = init_params(list(sizes), seed, act)
    r = np.random.default_rng(seed + 100)
    return params, ClassifierHead(r.uniform(-1, 1, head.W.shape), r.uniform(-0.5, 0.5, head.b.shape))


def build(params, head, batches, cfg, step=None, stream_seed=0):
    tape = Tape()
    mv = bind(tape, params, head)
    envs = [tape_forward(mv, b, name) for name, b in batches]
    streams = {name: RademacherStream([stream_seed, k]) for k, (name, _) in enumerate(sorted(batches, key=lambda t: t[0]))}
    bd = objective(envs, mv.head, cfg, step, streams)
    return tape, mv, bd


BATCHES = [("a", _data(1)), ("b", _data(2))]


def _cfg(method, alpha=0.7, beta=1.3, **kw):
    return PenaltyConfig(method=method, alpha=alpha, beta=beta, num_samples=kw.pop("num_samples", 4), **kw)


@pytest.mark.parametrize("method", METHODS)
def test_breakdown_total_decomposes(method):
    params, head = _model()
    _, _, bd = build(params, head, BATCHES, _cfg(method))
    assert abs(bd.total - (bd.erm_term + bd.alpha * bd.hessian_term + bd.beta * bd.gradient_term)) < 1e-10
    assert bd.hessian_term >= 0 and bd.gradient_term >= 0


@pytest.mark.parametrize("method", METHODS)
def test_zero_weights_reduce_to_erm_bitwise(method):
    params, head = _model()
    tape_e, mv_e, erm = build(params, head, BATCHES, PenaltyConfig("erm"))
    tape_m, mv_m, bd = build(params, head, BATCHES, _cfg(method, alpha=0.0, beta=0.0, anneal_step=3), step=5)
    assert bd.objective.value == erm.objective.value
    g1 = grad(erm.objective, mv_e.all)
    g2 = grad(bd.objective, mv_m.all)
    assert all(np.array_equal(x, y) for x, y in zip(g1, g2))


@pytest.mark.parametrize("method", METHODS)
def test_identical_environments_have_zero_penalty(method):
    params, head = _model()
    same = [("a", BATCHES[0][1]), ("b", BATCHES[0][1])]
    tape = Tape()
    mv = bind(tape, params, head)
    envs = [tape_forward(mv, b, n) for n, b in same]
    # a shared probe stream seed for both environments
    streams = {"a": RademacherStream(4), "b": RademacherStream(4)}
    bd = objective(envs, mv.head, _cfg(method), None, streams)
    if method == "irm":
        assert bd.hessian_term > 0  # IRM penalises each environment on its own
    else:
        assert bd.hessian_term == 0.0 and bd.gradient_term == 0.0


@pytest.mark.parametrize("method", METHODS)
def test_environment_order_does_not_matter(method):
    params, head = _model()
    _, _, fwd = build(params, head, BATCHES, _cfg(method))
    _, _, rev = build(params, head, BATCHES[::-1], _cfg(method))
    assert fwd.objective.value == rev.objective.value


def test_duplicate_environment_names_rejected():
    params, head = _model()
    with pytest.raises(ValueError):
        build(params, head, [("a", _data(1)), ("a", _data(2))], _cfg("vrex"))


def _flat_params(params, head):
    return np.concatenate([x.ravel() for W, b in params.layers for x in (W, b)] + [head.W.ravel(), head.b])


def _unflat(params, head, v):
    out, k = [], 0
    for W, b in params.layers:
        W2 = v[k : k + W.size].reshape(W.shape)
        k += W.size
        b2 = v[k : k + b.size]
        k += b.size
        out.append((W2, b2))
    Wh = v[k : k + head.W.size].reshape(head.W.shape)
    k += head.W.size
    return FeatureExtractorParams(out, list(params.activations)), ClassifierHead(Wh, v[k:])


@pytest.mark.parametrize("method", METHODS)
def test_objective_gradient_matches_finite_differences(method):
    params, head = _model(sizes=(3, 4, 3, 2))
    batches = [("a", _data(3, n=6)), ("b", _data(4, n=6))]
    cfg = _cfg(method)
    tape, mv, bd = build(params, head, batches, cfg, stream_seed=7)
    auto = np.concatenate([g.ravel() for g in grad(bd.objective, mv.all)])
    v0 = _flat_params(params, head)

    def f(v):
        p, h = _unflat(params, head, v)
        return float(build(p, h, batches, cfg, stream_seed=7)[2].objective.value)

    h = 1e-6
    fd = np.array([(f(v0 + h * e) - f(v0 - h * e)) / (2 * h) for e in np.eye(len(v0))])
    assert rel_err(auto, fd) < 1e-5


def test_hgp_penalty_terms_match_closed_forms():
    from hessalign.estimators import hgp_closed_form

    params, head = _model()
    tape, mv, bd = build(params, head, BATCHES, _cfg("hgp"))
    envs = [tape_forward(mv, b, n) for n, b in BATCHES]
    hgs = [hgp_closed_form(e.features.value, e.probs, e.batch.labels) for e in envs]
    gs = [hc.head_grad(e.features.value, e.probs, e.batch.labels).flat() for e in envs]
    assert rel_err(bd.hessian_term, spread(NUMPY_OPS, hgs)) < 1e-8
    assert rel_err(bd.gradient_term, spread(NUMPY_OPS, gs)) < 1e-12


def test_gradvar_equals_beta_term_of_hgp():
    params, head = _model()
    _, _, a = build(params, head, BATCHES, _cfg("gradvar"))
    _, _, b = build(params, head, BATCHES, _cfg("hgp"))
    assert a.gradient_term == b.gradient_term


def test_exact_hessian_objective_matches_numpy_variance():
    params, head = _model()
    tape, mv, bd = build(params, head, BATCHES, _cfg("exact_hessian"))
    envs = [tape_forward(mv, b, n) for n, b in BATCHES]
    hs = env_hessians([(e.features.value, e.probs) for e in envs])
    assert rel_err(bd.hessian_term, exact_hessian_variance(hs)) < 1e-12


def test_taped_exact_hessian_is_a_permutation_of_the_closed_form():
    params, head = _model()
    tape = Tape()
    env = tape_forward(bind(tape, params, head), BATCHES[0][1])
    Ht = tape_head_hessian(env).value
    H = hc.head_hessian(env.features.value, env.probs)
    c, d = head.W.shape
    order = [k * (d + 1) + q for k in range(c) for q in range(d)] + [k * (d + 1) + d for k in range(c)]
    assert rel_err(Ht[np.ix_(order, order)], H) < 1e-13


def test_hutchinson_with_many_probes_approaches_exact_diagonal_penalty():
    params, head = _model()
    cfg = _cfg("hutchinson", beta=0.0, num_samples=4000)
    _, mv, bd = build(params, head, BATCHES, cfg)
    tape = Tape()
    mv2 = bind(tape, params, head)
    diags = [hc.head_hessian_diag(e.features.value, e.probs) for e in (tape_forward(mv2, b, n) for n, b in BATCHES)]
    exact = spread(NUMPY_OPS, diags)
    assert abs(bd.hessian_term - exact) < 0.25 * exact


def test_erm_is_mean_of_env_losses():
    from hessalign.model import forward

    params, head = _model()
    _, _, bd = build(params, head, BATCHES, PenaltyConfig("erm"))
    ref = np.mean([forward(params, head, b)[2] for _, b in BATCHES])
    assert abs(bd.erm_term - ref) < 1e-12
    _, _, same = build(params, head, [("a", BATCHES[0][1]), ("b", BATCHES[0][1])], PenaltyConfig("erm"))
    assert abs(same.erm_term - forward(params, head, BATCHES[0][1])[2]) < 1e-12


def test_reductions_on_hand_set_values():
    F = NUMPY_OPS
    from hessalign.objectives import mean_over_envs

    assert mean_over_envs(F, [np.array(0.2), np.array(0.4)]) == pytest.approx(0.3)
    # population variance of the two losses
    assert spread(F, [np.array(0.2), np.array(0.4)]) == pytest.approx(0.01, abs=1e-15)
    # (1/n) sum ||g_e - g_bar||^2 with n = 2: the plain sum would be 1
    assert spread(F, [np.array([1.0, 0.0]), np.array([0.0, 1.0])]) == pytest.approx(0.5)


def test_exact_hessian_variance_examples():
    H1, H2 = np.diag([1.0, 1.0]), np.diag([3.0, 1.0])
    assert exact_hessian_variance([H1]) == 0.0
    assert exact_hessian_variance([H1, H1]) == 0.0
    assert hessian_distance(H1, H2) == 2.0
    # (1/n) sum_e ||H_e - H_bar||^2 = (1 + 1) / 2
    assert exact_hessian_variance([H1, H2]) == 1.0


def test_irm_penalty_single_sample_by_hand():
    params = FeatureExtractorParams()
    head = ClassifierHead([[0.4, -0.2], [0.1, 0.3]], [0.05, -0.1])
    x = np.array([[1.5, -0.5]])
    y = one_hot([1], 2)
    tape = Tape()
    env = tape_forward(bind(tape, params, head), Batch(x, y))
    a = env.logits.value[0]
    p = env.probs[0]
    assert irm_grad_sq(env).value == pytest.approx(float(np.sum((p - y[0]) * a)) ** 2, rel=1e-13)


def test_irm_penalty_zero_at_zero_gradient():
    # zero logits and balanced labels: dL/ds = mean (p - y) . a = 0
    params = FeatureExtractorParams()
    head = ClassifierHead(np.zeros((2, 2)), np.zeros(2))
    tape = Tape()
    env = tape_forward(bind(tape, params, head), Batch(np.ones((2, 2)), one_hot([0, 1], 2)))
    assert irm_grad_sq(env).value == 0.0


class TestSchedule:
    def test_weights_follow_anneal(self):
        cfg = PenaltyConfig("hgp", alpha=2.0, beta=3.0, anneal_step=190, pre_anneal_value=1.0, post_anneal_value=91257.18)
        assert cfg.weights(189) == (2.0, 3.0)
        assert cfg.weights(190) == (2.0 * 91257.18, 3.0 * 91257.18)

    def test_rescale_after_anneal(self):
        cfg = PenaltyConfig("hgp", alpha=1.0, beta=2.0, anneal_step=10, post_anneal_value=100.0)
        assert cfg.loss_scale(9) == 1.0
        assert cfg.loss_scale(10) == 1.0 / 201.0
        assert PenaltyConfig("vrex", alpha=1.0, beta=5.0, anneal_step=0, post_anneal_value=10.0).loss_scale(0) == 1.0 / 11.0
        assert PenaltyConfig("hgp", alpha=1.0, anneal_step=0, post_anneal_value=10.0, rescale=False).loss_scale(3) == 1.0
        assert PenaltyConfig("erm", anneal_step=0, post_anneal_value=10.0).loss_scale(3) == 1.0

    @pytest.mark.parametrize("bad", [dict(method="sam"), dict(alpha=-1.0), dict(anneal_step=-1), dict(num_samples=0),
                                     dict(post_anneal_value=float("nan"))])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            PenaltyConfig(**bad)
