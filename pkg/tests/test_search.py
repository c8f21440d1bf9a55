import numpy as np
import pytest

from odimo import hardware as hw
from odimo import network as nw
from odimo import search as S
from odimo.data import gen_synthetic
from odimo.mapping import MappingDecision, uniform_decision
from odimo.ops import cross_entropy, softmax_temp
from odimo.quant import QuantSpec, fake_quantize_weights
from odimo.tensor import Tensor, default_dtype

from _oracles import central_diff, max_rel_err

AIMC, DIG = hw.diana_accelerators()


def fc_only(c_in=16, classes=10):
    return {"input": [c_in, 1, 1], "nodes": [{"name": "flat", "op": "flatten"}, {"name": "fc", "op": "fc", "out_features": classes}]}


def small_cnn(width=4):
    return nw.toy_cnn2(width=width)


@pytest.fixture(scope="module")
def two_class():
    return gen_synthetic(classes=2, n=600, seed=3)


# -- effective weights ------------------------------------------------------------


def test_effective_weights_one_hot_and_uniform():
    rng = np.random.default_rng(0)
    w0, w1 = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=(3, 2, 3, 3)))
    onehot = Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    out = S.effective_weights([w0, w1], onehot).data
    np.testing.assert_array_equal(out[[0, 2]], w0.data[[0, 2]])
    np.testing.assert_array_equal(out[1], w1.data[1])
    uniform = Tensor(np.full((3, 2), 0.5))
    np.testing.assert_allclose(S.effective_weights([w0, w1], uniform).data, (w0.data + w1.data) / 2, rtol=1e-15)


def test_effective_weights_errors():
    a, b = Tensor(np.zeros((3, 2))), Tensor(np.zeros((4, 2)))
    with pytest.raises(S.SearchError):
        S.effective_weights([a, b], Tensor(np.full((3, 2), 0.5)))
    with pytest.raises(S.SearchError):
        S.effective_weights([a, a], Tensor(np.full((3, 3), 0.5)))


def test_effective_weights_gradient_wrt_alpha():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(5, 3))
    copies = [fake_quantize_weights(Tensor(w), QuantSpec(b, Tensor(0.3))) for b in (2, 4, 8)]
    r = rng.normal(size=(5, 3))
    alpha = rng.normal(size=(5, 3))

    def f(a):
        return float((S.effective_weights(copies, softmax_temp(Tensor(a), 0.7)).data * r).sum())

    t = Tensor(alpha.copy(), requires_grad=True)
    (S.effective_weights(copies, softmax_temp(t, 0.7)) * Tensor(r)).sum().backward()
    (num,) = central_diff(f, [alpha.copy()], h=1e-4, order=4)
    assert max_rel_err(t.grad, num) < 1e-4


# -- alpha parameters and loss --------------------------------------------------------


def test_masked_entries_stay_masked_with_zero_gradient():
    net = nw.build(nw.toy_mobilenet(), seed=0).fold_bn()
    alpha = S.AlphaParams(net, [AIMC, DIG])
    assert not alpha.masks["dw2"][0] and alpha.masks["dw2"][1]
    alpha.alpha["dw2"].data[:, 0] = 100.0
    p = alpha.probs("dw2")
    np.testing.assert_array_equal(p.data[:, 0], 0.0)
    (p * Tensor(np.arange(p.size).reshape(p.shape))).sum().backward()
    np.testing.assert_array_equal(alpha.alpha["dw2"].grad[:, 0], 0.0)
    state = S.SearchState(net, [AIMC, DIG], alpha, S.QuantState.init(net, [AIMC, DIG]))
    d = S.discretize(state)
    assert set(d.assignments["dw2"]) == {1}


def test_rows_sum_to_one_and_channels_conserved():
    net = nw.build(nw.toy_resnet(), seed=0).fold_bn()
    alpha = S.AlphaParams(net, [AIMC, DIG], tau=0.6)
    rng = np.random.default_rng(2)
    for name, a in alpha.alpha.items():
        a.data = rng.normal(scale=3, size=a.shape)
        p = alpha.probs(name).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-14)
        assert hw.expected_channels(alpha.probs(name)).data.sum() == pytest.approx(a.shape[0], abs=1e-10)


def test_lambda_zero_loss_is_task_loss():
    net = nw.build(small_cnn(), seed=0)
    accs = hw.diana_accelerators()
    state = S.new_state(net, accs, 0.0)
    x = np.random.default_rng(0).uniform(0, 1, (8, 1, 8, 8)).astype(np.float32)
    y = np.arange(8) % 2
    loss, task, reg = S.total_loss(state, x, y)
    assert reg is None and loss is task
    logits = nw.run(net, Tensor(x), state.executor())
    assert loss.item() == cross_entropy(logits, y).item()


def test_single_accelerator_regularizer_has_no_alpha_gradient():
    net = nw.build(small_cnn(), seed=0)
    state = S.new_state(net, [DIG], 1.0)
    reg = S.cost_regularizer(state)
    reg.backward()
    for a in state.alpha.params():
        np.testing.assert_array_equal(a.grad, 0.0)


def test_energy_gradient_prefers_cheaper_accelerator():
    # ops-proportional models with ideal shutdown: L_R is linear in the expected counts,
    # so dL/dalpha[c, i] = lam * p_ci * (cost_i - sum_j p_cj cost_j) / tau exactly
    accs = hw.abstract_accelerators("zero")
    net = nw.build(fc_only(), seed=0, dtype=np.float64)
    lam, tau = 1e3, 0.8
    state = S.new_state(net, accs, lam, "energy", tau)
    rng = np.random.default_rng(4)
    state.alpha.alpha["fc"].data = rng.normal(size=(10, 2))
    x = rng.uniform(0, 1, (16, 16, 1, 1))
    y = rng.integers(0, 10, 16)
    loss, task, _ = S.total_loss(state, x, y, quantize_acts=False)
    loss.backward()
    g = state.alpha.alpha["fc"].grad
    macs = 16
    cost = np.array([a.p_act * a.ops_k * macs for a in accs])
    p = state.alpha.probs("fc").data
    expected = lam * p * (cost - (p * cost).sum(axis=1, keepdims=True)) / tau
    assert np.max(np.abs(g - expected)) < 1e-3 * np.max(np.abs(expected))
    assert np.all(g[:, 0] < g[:, 1])


def test_total_loss_alpha_gradient_matches_finite_differences():
    accs = hw.abstract_accelerators("active")
    rng = np.random.default_rng(5)
    for trial in range(5):
        net32 = nw.build(small_cnn(), seed=trial)
        state = S.new_state(net32, accs, 1e-3)
        for a in state.alpha.params():
            a.data = rng.normal(size=a.shape)
        x = rng.uniform(0, 1, (6, 1, 8, 8)).astype(np.float32)
        y = rng.integers(0, 2, 6)
        loss, _, _ = S.total_loss(state, x, y, quantize_acts=False)
        loss.backward()
        analytic = np.concatenate([a.grad.ravel() for a in state.alpha.params()])

        with default_dtype(np.float64):
            net64 = net32.copy()
            for k, v in net64.params.items():
                v.data = v.data.astype(np.float64)
            s64 = S.SearchState(net64, accs, state.alpha, state.quant, 1e-3, betas=state.betas)
            arrays = [a.data.copy() for a in state.alpha.params()]

            def f(*arrs):
                for t, v in zip(s64.alpha.params(), arrs):
                    t.data = v
                return S.total_loss(s64, x.astype(np.float64), y, quantize_acts=False)[0].item()

            num = np.concatenate([g.ravel() for g in central_diff(f, arrays, h=1e-3, order=4)])
        assert max_rel_err(analytic, num) < 1e-3


# -- discretization -------------------------------------------------------------------


def _state_with_alpha(rows):
    net = nw.build(fc_only(c_in=4, classes=len(rows)), seed=0)
    state = S.new_state(net, [AIMC, DIG], 0.0)
    state.alpha.alpha["fc"].data = np.array(rows, dtype=np.float64)
    return state


def test_discretize_examples_and_tie_break():
    d = S.discretize(_state_with_alpha([[2.0, -1.0], [0.3, 0.3], [-1.0, 5.0]]))
    assert d.assignments["fc"].tolist() == [0, 0, 1]


def test_discretize_invariant_to_row_shift():
    rng = np.random.default_rng(6)
    rows = rng.normal(size=(12, 2))
    base = S.discretize(_state_with_alpha(rows)).assignments["fc"]
    shifted = rows + rng.normal(size=(12, 1)) * 10
    np.testing.assert_array_equal(S.discretize(_state_with_alpha(shifted)).assignments["fc"], base)


# -- training workflows ----------------------------------------------------------------


def _searched(ds, seed, epochs=3, lam=1e-4, accs=None):
    net = nw.build(small_cnn(), seed=seed)
    S.pretrain(net, ds, S.TrainConfig(epochs=2, lr_w=0.05, seed=seed))
    state = S.new_state(net, accs or hw.diana_accelerators(), lam, x_calib=ds.x_train[:64])
    S.search(state, ds, S.TrainConfig(epochs=epochs, patience=100, seed=seed, metric="objective"))
    return state


def test_search_is_deterministic(two_class):
    a, b = _searched(two_class, 7), _searched(two_class, 7)
    for k in a.alpha.alpha:
        np.testing.assert_array_equal(a.alpha.alpha[k].data, b.alpha.alpha[k].data)
    assert a.history == b.history
    assert S.discretize(a).dumps() == S.discretize(b).dumps()


def test_lambda_zero_search_reaches_high_accuracy(two_class):
    state = _searched(two_class, 0, epochs=4, lam=0.0)
    assert max(r["accuracy"] for r in state.history) >= 95.0


def test_single_accelerator_search_equals_plain_qat(two_class):
    ds = two_class
    net = nw.build(small_cnn(), seed=1)
    S.pretrain(net, ds, S.TrainConfig(epochs=2, lr_w=0.05, seed=1))
    base = net.fold_bn()
    cfg = S.TrainConfig(epochs=3, patience=100, seed=1)
    state = S.new_state(base.copy(), [DIG], 0.0, x_calib=ds.x_train[:64])
    S.search(state, ds, cfg)
    qat_net = base.copy()
    quant = S.QuantState.init(qat_net, [DIG], ds.x_train[:64])
    hist = S.finetune(qat_net, quant, uniform_decision(qat_net, [DIG], 0), [DIG], ds, cfg)
    for r1, r2 in zip(state.history, hist):
        assert r1["train_loss"] == pytest.approx(r2["train_loss"], rel=1e-4)


def test_large_lambda_frozen_weights_picks_cheaper_unit():
    accs = hw.abstract_accelerators("zero")
    net = nw.build(fc_only(), seed=0)
    ds = gen_synthetic(classes=10, n=200, size=4, seed=1)
    ds.x_train = ds.x_train.reshape(len(ds.x_train), 16, 1, 1)
    ds.x_val = ds.x_val.reshape(len(ds.x_val), 16, 1, 1)
    state = S.new_state(net, accs, 10.0, "energy", x_calib=ds.x_train[:32])
    w0 = net.params["fc.weight"].data.copy()
    S.search(state, ds, S.TrainConfig(epochs=2, lr_w=0.0, momentum=0.0, lr_alpha=0.1, metric="objective"))
    np.testing.assert_array_equal(net.params["fc.weight"].data, w0)
    assert set(S.discretize(state).assignments["fc"]) == {0}


def test_finetune_zero_epochs_leaves_weights(two_class):
    net = nw.build(small_cnn(), seed=0).fold_bn()
    quant = S.QuantState.init(net, [AIMC, DIG], two_class.x_train[:32])
    before = {k: v.data.copy() for k, v in net.params.items()}
    S.finetune(net, quant, uniform_decision(net, [AIMC, DIG], 1), [AIMC, DIG], two_class, S.TrainConfig(epochs=0))
    for k, v in net.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_finetune_keeps_mapping_and_does_not_regress(two_class):
    state = _searched(two_class, 2, epochs=2, lam=1e-3)
    decision = S.discretize(state)
    snapshot = decision.dumps()
    executor = S.MappedExecutor(state.net, state.accs, decision, state.quant)
    before = S.evaluate(state.net, executor, two_class.x_val, two_class.y_val)["accuracy"]
    hist = S.finetune(state.net, state.quant, decision, state.accs, two_class, S.TrainConfig(epochs=3, lr_w=0.005))
    assert decision.dumps() == snapshot
    assert max(r["accuracy"] for r in hist) >= before - 0.5


def test_divergence_is_reported(two_class):
    net = nw.build(small_cnn(), seed=0).fold_bn()
    state = S.new_state(net, [AIMC, DIG], 0.0)
    net.params["fc.bias"].data[:] = np.nan
    with pytest.raises(S.DivergenceError, match="non-finite loss"):
        S.search(state, two_class, S.TrainConfig(epochs=1))


def test_state_validation():
    net = nw.build(small_cnn(), seed=0).fold_bn()
    with pytest.raises(S.SearchError):
        S.new_state(net, [AIMC, DIG], -1.0)
    with pytest.raises(S.SearchError):
        S.new_state(net, [AIMC, DIG], 0.0, objective="power")
    with pytest.raises(S.SearchError):
        S.TrainConfig(metric="f1")
    with pytest.raises(nw.NetworkError, match="fold BatchNorm"):
        S.new_state(nw.build(nw.toy_resnet(), seed=0), [AIMC, DIG])


def test_mapping_json_roundtrip(tmp_path):
    d = MappingDecision({"a": [0, 1, 1], "b": [1]}, ["aimc", "digital"])
    d.save(tmp_path / "m.json")
    back = MappingDecision.load(tmp_path / "m.json")
    assert back.dumps() == d.dumps()
    assert back.counts("a") == [1, 2]
