import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imposterid.core import l2_normalize
from imposterid.errors import DimensionMismatchError, ShapeMismatchError, StaleTapeError
from imposterid.nnet import (
    AdamState,
    Assembly,
    Layer,
    MlpModel,
    RelationScorer,
    SymmetricRelationScorer,
    adam_step,
    episode_objective,
    gradient_check,
    idn_forward,
    idn_input,
    idn_inputs,
    idn_pair_indices,
    imposter_loss,
    init_assembly,
    make_adapter,
    make_idn,
    make_relnet,
    mlp_backward,
    mlp_forward,
    relation_forward,
    relation_input,
    relation_loss,
    relation_matrix,
    total_loss,
    zero_grads,
)

from gradcheck_inputs import gradcheck_case

seeds = st.integers(0, 2**32 - 1)


def _net(rng, sizes=(5, 7, 3), acts=("relu", "identity"), dropout=0.0):
    return MlpModel.init(list(sizes), list(acts), rng, dropout=dropout)


# --- forward ---------------------------------------------------------------------

def test_forward_identity_and_zero():
    ident = MlpModel([Layer(np.eye(4), np.zeros(4), "identity")])
    x = np.array([0.5, -1.0, 2.0, 0.0])
    np.testing.assert_array_equal(mlp_forward(ident, x)[0], x)
    zero = MlpModel([Layer(np.zeros((3, 4)), np.zeros(3), "relu")])
    np.testing.assert_array_equal(mlp_forward(zero, x)[0], np.zeros(3))


def test_forward_matches_hand_unrolled(rng):
    w1, b1 = rng.normal(size=(6, 4)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(2, 6)), rng.normal(size=2)
    net = MlpModel([Layer(w1, b1, "relu"), Layer(w2, b2, "sigmoid")])
    x = rng.normal(size=4)
    h = np.maximum(w1 @ x + b1, 0)
    expect = 1 / (1 + np.exp(-(w2 @ h + b2)))
    np.testing.assert_allclose(mlp_forward(net, x)[0], expect, rtol=1e-8, atol=1e-15)


def test_forward_rejects_wrong_dimension(rng):
    with pytest.raises(DimensionMismatchError):
        mlp_forward(_net(rng), np.ones(4))


def test_model_validation(rng):
    with pytest.raises(ShapeMismatchError):
        MlpModel([Layer(np.ones((3, 4)), np.zeros(3)), Layer(np.ones((2, 5)), np.zeros(2))])
    with pytest.raises(ValueError):
        MlpModel([Layer(np.ones((3, 4)), np.zeros(3))], dropout=1.0)
    with pytest.raises(ShapeMismatchError):
        MlpModel([Layer(np.ones((3, 4)), np.zeros(3))], residual=True)


def test_eval_forward_deterministic(rng):
    net = _net(rng, dropout=0.3)
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(mlp_forward(net, x)[0], mlp_forward(net, x)[0])


def test_inverted_dropout_expectation():
    rng = np.random.default_rng(5)
    net = _net(rng, sizes=(4, 16, 2), dropout=0.3)
    x = rng.normal(size=4)
    draws = np.array([mlp_forward(net, x, rng)[0] for _ in range(10_000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - mlp_forward(net, x)[0]) < 3 * se)


# --- backward --------------------------------------------------------------------

def test_backward_zero_grad_output(rng):
    net = _net(rng)
    out, tape = mlp_forward(net, rng.normal(size=(2, 5)))
    grads, gin = mlp_backward(net, tape, np.zeros_like(out))
    assert all(not dw.any() and not db.any() for dw, db in grads)
    assert not gin.any()


def test_backward_single_linear_layer_closed_form(rng):
    net = MlpModel([Layer(rng.normal(size=(3, 4)), rng.normal(size=3), "identity")])
    x, g = rng.normal(size=4), rng.normal(size=3)
    _, tape = mlp_forward(net, x)
    (dw, db), gin = mlp_backward(net, tape, g)[0][0], mlp_backward(net, tape, g)[1]
    np.testing.assert_array_equal(dw, np.outer(g, x))
    np.testing.assert_array_equal(db, g)
    np.testing.assert_allclose(gin, net.layers[0].weight.T @ g, rtol=1e-14)


def _numeric_mlp_grads(net, x, g, eps=1e-6):
    out = []
    for layer in net.layers:
        for arr in (layer.weight, layer.bias):
            flat = arr.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = np.sum(mlp_forward(net, x)[0] * g)
                flat[i] = keep - eps
                down = np.sum(mlp_forward(net, x)[0] * g)
                flat[i] = keep
                num[i] = (up - down) / (2 * eps)
            out.append(num.reshape(arr.shape))
    return out


@pytest.mark.parametrize("residual,normalize", [(False, False), (True, False), (True, True)])
def test_backward_matches_finite_differences(residual, normalize):
    rng = np.random.default_rng(11)
    net = MlpModel.init([5, 9, 5], ["relu", "identity"], rng, residual=residual,
                        normalize_output=normalize)
    x = rng.normal(size=(3, 5))
    g = rng.normal(size=(3, 5))
    _, tape = mlp_forward(net, x)
    analytic = [a for pair in mlp_backward(net, tape, g)[0] for a in pair]
    for a, n in zip(analytic, _numeric_mlp_grads(net, x, g)):
        np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)


def test_backward_respects_dropout_masks():
    rng = np.random.default_rng(3)
    net = _net(rng, dropout=0.5)
    x = rng.normal(size=5)
    out, tape = mlp_forward(net, x, np.random.default_rng(8))
    grads, _ = mlp_backward(net, tape, np.ones_like(out))
    dropped = tape.masks[0] == 0
    assert dropped.any()
    assert not grads[1][0][:, dropped[0]].any()


def test_backward_stale_tape(rng):
    net = _net(rng)
    other = _net(rng, sizes=(5, 4, 3))
    out, tape = mlp_forward(net, rng.normal(size=5))
    with pytest.raises(StaleTapeError):
        mlp_backward(other, tape, np.ones(3))
    with pytest.raises(StaleTapeError):
        mlp_backward(net, tape, np.ones(4))


# --- Adam --------------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point(rng):
    net = _net(rng)
    state = AdamState.for_model(net, lr=1e-2, weight_decay=0.0)
    new, st2 = adam_step(net, zero_grads(net), state)
    for p, q in zip(net.params(), new.params()):
        np.testing.assert_array_equal(p, q)
    assert st2.step == 1 and state.step == 0


def test_adam_first_step_moves_by_lr_against_gradient(rng):
    net = _net(rng)
    grads = [(rng.normal(size=l.weight.shape), rng.normal(size=l.bias.shape)) for l in net.layers]
    new, _ = adam_step(net, grads, AdamState.for_model(net, lr=1e-3, weight_decay=0.0))
    for p, q, g in zip(net.params(), new.params(), [g for pair in grads for g in pair]):
        # with bias correction the first step is lr * g / (|g| + eps')
        expect = -1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(q - p, expect, rtol=1e-6, atol=1e-12)


def test_adam_hyperparameters_and_decoupled_decay(rng):
    net = _net(rng)
    state = AdamState.for_model(net, lr=0.1)
    assert (state.beta1, state.beta2, state.weight_decay) == (0.99, 0.999, 2e-5)
    new, _ = adam_step(net, zero_grads(net), state)
    for p, q in zip(net.params(), new.params()):
        np.testing.assert_allclose(q, p * (1 - 0.1 * 2e-5), rtol=1e-15)


def test_adam_identical_histories_identical_updates():
    w = np.array([[0.3, 0.3]])
    net = MlpModel([Layer(w, np.zeros(1), "identity")])
    state = AdamState.for_model(net, lr=0.01)
    for g in (0.5, -0.2, 0.7):
        net, state = adam_step(net, [(np.array([[g, g]]), np.zeros(1))], state)
    assert net.layers[0].weight[0, 0] == net.layers[0].weight[0, 1]


def test_adam_shape_mismatch(rng):
    net = _net(rng)
    with pytest.raises(ShapeMismatchError):
        adam_step(net, [(np.zeros((2, 2)), np.zeros(2))] * 2, AdamState.for_model(net))


# --- relation network -----------------------------------------------------------------

def test_relation_forward_examples():
    d = 4
    w = np.zeros((1, 3 * d))
    w[0, 2 * d:] = 1.0  # sums the product block only
    relnet = MlpModel([Layer(w, np.zeros(1), "identity")])
    u = l2_normalize([1.0, 2.0, -1.0, 0.5])
    assert relation_forward(relnet, u, u) == pytest.approx(1.0, abs=1e-12)
    x = relation_input(np.zeros(d), u)
    assert not x[2 * d:].any()


def test_relation_forward_is_mlp_on_concat(rng):
    relnet = make_relnet(5, rng, hidden=(16, 8))
    q, c = rng.normal(size=5), rng.normal(size=5)
    x = np.concatenate([q, c, q * c])
    assert relation_forward(relnet, q, c) == mlp_forward(relnet, x)[0][0]
    mat, _ = relation_matrix(relnet, q[None], c[None])
    assert mat[0, 0] == pytest.approx(relation_forward(relnet, q, c), rel=1e-14)
    assert 0 < mat[0, 0] < 1
    with pytest.raises(DimensionMismatchError):
        relation_forward(relnet, q[:4], c[:4])


def test_relation_scorers(rng):
    relnet = make_relnet(4, rng, hidden=(8,))
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    plain = RelationScorer(relnet)
    sym = SymmetricRelationScorer(relnet)
    np.testing.assert_allclose(plain.matrix(a, b)[1, 0], plain(a[1], b[0]), rtol=1e-14)
    np.testing.assert_allclose(sym.matrix(a, b), sym.matrix(b, a).T, rtol=1e-14)
    assert sym(a[0], b[1]) == pytest.approx(sym(b[1], a[0]), rel=1e-14)


def test_relation_loss_examples(rng):
    labels = np.array([1, 0, 2])
    onehot = np.eye(3)[labels]
    assert relation_loss(onehot, labels) == 0.0
    assert relation_loss(np.full((1, 2), 0.5), [0]) == 0.25
    scores = rng.random((3, 3))
    perm = np.array([2, 0, 1])
    inv = np.argsort(perm)
    assert relation_loss(scores[:, perm], inv[labels]) == pytest.approx(relation_loss(scores, labels), rel=1e-15)
    assert relation_loss(scores, labels) > 0
    with pytest.raises(ShapeMismatchError):
        relation_loss(scores, [0, 3, 1])


# --- IDN -------------------------------------------------------------------------------

def test_idn_input_cyclic_pairs_at_m2(rng):
    c = rng.normal(size=(2, 3))
    q = rng.normal(size=3)
    x = idn_input(c, q, 2)
    np.testing.assert_array_equal(x[:6], np.concatenate([c[0] * c[1], c[1] * c[0]]))
    np.testing.assert_array_equal(x[6:], np.concatenate([q * c[0], q * c[1]]))


def test_idn_input_single_speaker(rng):
    c = rng.normal(size=(1, 3))
    q = rng.normal(size=3)
    x = idn_input(c, q, 4)
    np.testing.assert_array_equal(x[:12], np.tile(c[0] * c[0], 4))
    np.testing.assert_array_equal(x[12:], np.tile(q * c[0], 4))


def test_idn_input_cyclic_repetition_m3_to_5(rng):
    first, second, qs = idn_pair_indices(3, 5)
    assert list(first) == [0, 1, 2, 0, 1]
    assert list(second) == [1, 2, 0, 1, 2]
    assert list(qs) == [0, 1, 2, 0, 1]
    c, q = rng.normal(size=(3, 2)), rng.normal(size=2)
    expect = [c[a] * c[b] for a, b in zip(first, second)] + [q * c[j] for j in qs]
    np.testing.assert_array_equal(idn_input(c, q, 5), np.concatenate(expect))


def test_idn_subsample_uses_rng():
    idx = idn_pair_indices(8, 3, np.random.default_rng(0))
    assert len(set(idx[0])) == 3 and list(idx[0]) == sorted(idx[0])
    np.testing.assert_array_equal(idx[1], (idx[0] + 1) % 8)
    np.testing.assert_array_equal(idx[2], idx[0])
    with pytest.raises(ValueError):
        idn_pair_indices(8, 3)


@given(seeds, st.integers(1, 6), st.integers(1, 12), st.integers(1, 5))
def test_idn_input_length(seed, m_train, m_now_raw, d):
    m_now = min(m_now_raw, 2 * m_train)
    r = np.random.default_rng(seed)
    x = idn_input(r.normal(size=(m_now, d)), r.normal(size=d), m_train, r)
    assert x.shape == (2 * m_train * d,)


def test_idn_inputs_batch_matches_single(rng):
    c, qs = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    batch = idn_inputs(c, qs, 6)
    for i, q in enumerate(qs):
        np.testing.assert_array_equal(batch[i], idn_input(c, q, 6))


def test_idn_forward_examples(rng):
    zero = make_idn(3, 2, rng, hidden=(4,))
    for layer in zero.layers:
        layer.weight[:] = 0
    x = rng.normal(size=12)
    assert idn_forward(zero, x) == 0.5
    idn = make_idn(3, 2, rng, hidden=(8, 4))
    assert idn_forward(idn, x) == idn_forward(idn, x) == mlp_forward(idn, x)[0][0]


def test_imposter_loss_examples(rng):
    flags = np.array([True, False, True])
    assert imposter_loss(flags.astype(float), flags) == 0.0
    assert imposter_loss([0.5], [True]) == 0.25
    s = rng.random(6)
    f = rng.random(6) < 0.5
    assert imposter_loss(1 - s, ~f) == pytest.approx(imposter_loss(s, f), rel=1e-14)
    with pytest.raises(ShapeMismatchError):
        imposter_loss([0.1, 0.2], [True])


def test_total_loss_examples():
    assert total_loss(0.2, 0.3, 1.0) == pytest.approx(0.5)
    assert total_loss(0.2, 0.3, 0.0) == 0.2
    assert total_loss(0.1, 0.2, 2.0) == pytest.approx(0.5)
    assert total_loss(0.2, 0.3) == pytest.approx(0.5)


# --- assembly and gradient checks ---------------------------------------------------------

def test_adapter_starts_as_normalizer(rng):
    adapter = make_adapter(6, rng)
    x = rng.normal(size=(4, 6))
    np.testing.assert_allclose(mlp_forward(adapter, x)[0], x / np.linalg.norm(x, axis=1, keepdims=True),
                               rtol=1e-14)


def test_architecture_round_trip(rng):
    asm = init_assembly(5, 4, 0, relnet_hidden=(8,), idn_hidden=(6, 3))
    for model in asm.networks().values():
        clone = MlpModel.from_architecture(model.architecture())
        assert clone.architecture() == model.architecture()
    assert asm.idn.in_dim == 2 * 4 * 5 and asm.relnet.in_dim == 15


def test_gradient_check_linear_toy():
    rng = np.random.default_rng(2)
    adapter = MlpModel([Layer(np.eye(3) + 0.1 * rng.normal(size=(3, 3)), np.zeros(3), "identity")])
    relnet = MlpModel([Layer(rng.normal(size=(1, 9)), np.zeros(1), "identity")])
    asm = Assembly(adapter, relnet, None, m_train=2)
    support = rng.normal(size=(2, 2, 3))
    queries = rng.normal(size=(4, 3))
    assert gradient_check(asm, support, queries, [0, 1, 1, 0]) < 1e-9


def test_gradient_check_full_assembly():
    asm, support, queries, labels = gradcheck_case(hidden=(32, 16))
    assert gradient_check(asm, support, queries, labels, lam=1.0) < 1e-4
    assert gradient_check(asm, support, queries, labels, lam=0.3) < 1e-4


def test_gradient_check_epsilon_sweep():
    asm, support, queries, labels = gradcheck_case(hidden=(16, 8))
    errs = [gradient_check(asm, support, queries, labels, eps=e) for e in (1e-3, 1e-4, 1e-5)]
    assert errs[1] < errs[0]
    assert errs[2] < 1e-4


def test_episode_objective_lambda_scales_idn_gradient():
    asm, support, queries, labels = gradcheck_case(hidden=(16, 8))
    one = episode_objective(asm, support, queries, labels, lam=1.0)
    two = episode_objective(asm, support, queries, labels, lam=2.0)
    for (a, b), (c, d) in zip(one.grads["idn"], two.grads["idn"]):
        np.testing.assert_allclose(c, 2 * a, rtol=1e-12)
    assert two.l_total == pytest.approx(one.l_relation + 2 * one.l_imposter)
    np.testing.assert_array_equal(one.relation_scores, two.relation_scores)
