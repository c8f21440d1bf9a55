import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from odimo import network as nw
from odimo import pipeline
from odimo import serialize as S
from odimo.data import DatasetError, gen_synthetic, load_dataset, save_dataset
from odimo.search import QuantState
from odimo.hardware import diana_accelerators

DTYPES = [np.float32, np.float64, np.uint8, np.int32, np.int64]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(DTYPES).flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5))))
def test_odt_roundtrip(arr):
    back = S.loads(S.dumps(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_odt_header_layout():
    buf = S.dumps(np.arange(6, dtype=np.int32).reshape(2, 3))
    assert buf[:4] == b"ODT1"
    assert struct.unpack_from("<BBII", buf, 4) == (3, 2, 2, 3)
    assert len(buf) == 4 + 2 + 8 + 24


def test_odt_big_endian_input_is_stored_little_endian():
    arr = np.arange(4, dtype=">f8")
    back = S.loads(S.dumps(arr))
    np.testing.assert_array_equal(back, arr)
    assert back.dtype == np.dtype("<f8")


@pytest.mark.parametrize("bad", [b"", b"ODT2\x00\x00", b"ODT1\x09\x00", b"ODT1\x00\x02\x01\x00"])
def test_odt_malformed(bad):
    with pytest.raises(S.FormatError):
        S.loads(bad)


def test_odt_truncated_payload():
    buf = S.dumps(np.ones((3, 3), np.float32))
    with pytest.raises(S.FormatError, match="payload"):
        S.loads(buf[:-1])
    with pytest.raises(S.FormatError):
        S.loads(buf + b"\x00")


def test_odt_rejects_unsupported_dtype():
    with pytest.raises(S.FormatError):
        S.dumps(np.zeros(2, dtype=np.complex64))


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a/w": np.ones((2, 2), np.float32), "b": np.arange(3)}
    S.save_checkpoint(tmp_path / "ck", tensors, {"k": 1})
    back, meta = S.load_checkpoint(tmp_path / "ck")
    assert meta == {"k": 1}
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v)
    with pytest.raises(S.FormatError):
        S.load_checkpoint(tmp_path / "missing")


def test_model_checkpoint_restores_network_and_quant(tmp_path):
    net = nw.build(nw.toy_resnet(), seed=3).fold_bn()
    x = np.random.default_rng(0).uniform(0, 1, (16,) + net.input_shape).astype(np.float32)
    quant = QuantState.init(net, diana_accelerators(), x)
    pipeline.save_model(tmp_path / "m", net, quant, meta={"seed": 3})
    net2, quant2, _, meta = pipeline.load_model(tmp_path / "m")
    assert meta["seed"] == 3
    for k, v in net.state_arrays().items():
        np.testing.assert_array_equal(net2.state_arrays()[k], v)
    assert quant2.state_arrays().keys() == quant.state_arrays().keys()


def test_synthetic_is_deterministic_and_shaped():
    a = gen_synthetic(classes=4, n=200, size=8, seed=7)
    b = gen_synthetic(classes=4, n=200, size=8, seed=7)
    c = gen_synthetic(classes=4, n=200, size=8, seed=8)
    assert a.x_train.tobytes() == b.x_train.tobytes()
    assert a.x_train.tobytes() != c.x_train.tobytes()
    assert a.x_train.shape == (160, 1, 8, 8) and a.x_val.shape == (40, 1, 8, 8)
    assert a.x_train.dtype == np.float32 and a.y_train.dtype == np.uint8
    assert 0.0 <= a.x_train.min() and a.x_train.max() <= 1.0
    assert set(np.unique(a.y_train)) == set(range(4))


def test_small_images_terminate():
    ds = gen_synthetic(classes=10, n=50, size=4, seed=0)
    assert ds.shape == (1, 4, 4)


@pytest.mark.parametrize("kw", [{"classes": 1}, {"size": 3}])
def test_synthetic_rejects_bad_arguments(kw):
    with pytest.raises(DatasetError):
        gen_synthetic(**kw)


def test_dataset_roundtrip(tmp_path):
    ds = gen_synthetic(classes=3, n=60, seed=1)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.classes == 3
    np.testing.assert_array_equal(back.x_train, ds.x_train)
    np.testing.assert_array_equal(back.y_val, ds.y_val)


def test_dataset_errors(tmp_path):
    ds = gen_synthetic(classes=3, n=60, seed=1)
    save_dataset(ds, tmp_path)
    raw = (tmp_path / "x.odt").read_bytes()
    (tmp_path / "x.odt").write_bytes(raw[:-3])
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    (tmp_path / "x.odt").write_bytes(raw)
    meta = json.loads((tmp_path / "meta.json").read_text())
    (tmp_path / "meta.json").write_text(json.dumps({**meta, "classes": 2}))
    with pytest.raises(DatasetError, match="label"):
        load_dataset(tmp_path)
    (tmp_path / "meta.json").write_text(json.dumps({**meta, "n_train": 0}))
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)
    (tmp_path / "y.odt").unlink()
    with pytest.raises(DatasetError, match="missing"):
        load_dataset(tmp_path)
