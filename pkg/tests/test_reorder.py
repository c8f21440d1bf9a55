import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odimo import hardware as hw
from odimo import network as nw
from odimo import reorder as R
from odimo import simulate as sim
from odimo.mapping import MappingDecision, uniform_decision
from odimo.search import QuantState

ACCS = hw.diana_accelerators()


def random_decision(net, rng, accs=ACCS):
    out = {}
    for node in net.mappable():
        spec = net.layer_spec(node.name)
        allowed = [i for i, a in enumerate(accs) if a.supports(spec.kind)]
        out[node.name] = rng.choice(allowed, size=spec.c_out)
    return MappingDecision(out, [a.name for a in accs])


def test_plan_permutation_examples():
    assert R.plan_permutation([0, 1, 0, 1]).perm.tolist() == [0, 2, 1, 3]
    assert R.plan_permutation([1, 1, 1]).is_identity()
    assert R.plan_permutation([1, 0, 2, 0]).perm.tolist() == [1, 3, 0, 2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=64))
def test_permutation_is_stable_bijection(assign):
    p = R.plan_permutation(assign)
    x = np.arange(len(assign))
    np.testing.assert_array_equal(p.apply(x)[p.inverse], x)
    grouped = np.asarray(assign)[p.perm]
    assert np.all(np.diff(grouped) >= 0)
    for acc in set(assign):
        members = p.perm[grouped == acc]
        assert np.all(np.diff(members) > 0)


def test_not_a_permutation():
    with pytest.raises(R.ReorderError):
        R.ChannelPermutation([0, 0, 1])


def test_split_layer_examples():
    subs = R.split_layer("l", [0] * 6 + [1] * 4)
    assert [(s.accelerator, s.start, s.stop) for s in subs] == [(0, 0, 6), (1, 6, 10)]
    assert len(R.split_layer("l", [1] * 5)) == 1
    assert [s.accelerator for s in R.split_layer("l", [0, 1, 0])] == [0, 1, 0]


def test_identity_permutations_leave_network_unchanged():
    net = nw.build(nw.toy_resnet(), seed=0).fold_bn()
    res = R.apply_reorder(net, uniform_decision(net, ACCS, 1))
    for k, v in net.params.items():
        np.testing.assert_array_equal(res.net.params[k].data, v.data)
    assert all(p.is_identity() for p in res.permutations.values())


def test_bn_must_be_folded():
    net = nw.build(nw.toy_resnet(), seed=0)
    with pytest.raises(R.ReorderError):
        R.apply_reorder(net, uniform_decision(net, ACCS, 1))


def test_residual_producers_share_one_permutation():
    net = nw.build(nw.toy_resnet(), seed=0).fold_bn()
    res = R.apply_reorder(net, random_decision(net, np.random.default_rng(0)))
    assert res.permutations["conv2"] == res.permutations["conv4"]
    assert res.permutations["fc"].is_identity()
    assert not res.gather_used
    # conv2 is the group's primary producer, so its channels end up contiguous
    a = res.decision.assignments["conv2"]
    assert np.all(np.diff(a) >= 0)


@pytest.mark.parametrize("arch", ["toy_cnn2", "toy_resnet", "toy_mobilenet"])
def test_reorder_preserves_function(arch):
    rng = np.random.default_rng(1)
    net = nw.build(getattr(nw, arch)(), seed=2).fold_bn()
    x = rng.uniform(0, 1, (40,) + net.input_shape)
    quant = QuantState.init(net, ACCS, x[:20].astype(np.float32))
    ref = sim.float_logits(net, x)
    for _ in range(5):
        d = random_decision(net, rng)
        res = R.apply_reorder(net, d)
        assert np.max(np.abs(sim.float_logits(res.net, x) - ref)) <= 1e-6
        a = sim.predict(net, sim.IntegerExecutor(net, ACCS, d, quant), x)
        b = sim.predict(res.net, sim.IntegerExecutor(res.net, ACCS, res.decision, quant, res.plan), x)
        np.testing.assert_array_equal(a, b)


def test_split_outputs_concatenate_to_monolithic():
    rng = np.random.default_rng(3)
    net = nw.build(nw.toy_cnn2(), seed=0).fold_bn()
    x = rng.uniform(0, 1, (10,) + net.input_shape)
    quant = QuantState.init(net, ACCS, x.astype(np.float32))
    d = random_decision(net, rng)
    res = R.apply_reorder(net, d)
    mono = sim.predict(res.net, sim.IntegerExecutor(res.net, ACCS, res.decision, quant), x)
    split = sim.predict(res.net, sim.IntegerExecutor(res.net, ACCS, res.decision, quant, res.plan), x)
    np.testing.assert_array_equal(mono, split)
    assert len(res.plan["conv1"]) <= 2


def test_flatten_consumer_gets_expanded_permutation():
    net = nw.build(nw.toy_cnn2(width=3, size=4), seed=0).fold_bn()
    d = MappingDecision({"conv1": [1, 0, 1], "fc": [1, 1]}, ["aimc", "digital"])
    res = R.apply_reorder(net, d)
    assert res.permutations["conv1"].perm.tolist() == [1, 0, 2]
    w, w2 = net.params["fc.weight"].data, res.net.params["fc.weight"].data
    hw_ = 4  # 2x2 spatial after pooling
    np.testing.assert_array_equal(w2[:, :hw_], w[:, hw_:2 * hw_])
    np.testing.assert_array_equal(w2[:, hw_:2 * hw_], w[:, :hw_])


def test_manifest_schema(tmp_path):
    net = nw.build(nw.toy_resnet(), seed=0).fold_bn()
    res = R.apply_reorder(net, random_decision(net, np.random.default_rng(4)))
    res.save_manifest(tmp_path / "split.json")
    import json

    doc = json.loads((tmp_path / "split.json").read_text())
    assert doc["format"] == "odimo-split/1" and doc["gather_used"] is False
    names = [e["name"] for e in doc["layers"]]
    assert names == [n.name for n in net.mappable()]
    for e in doc["layers"]:
        stops = [s["stop"] for s in e["sublayers"]]
        starts = [s["start"] for s in e["sublayers"]]
        assert starts[0] == 0 and starts[1:] == stops[:-1]
    assert set(res.noncontiguous()) <= {"conv4", "fc"}
