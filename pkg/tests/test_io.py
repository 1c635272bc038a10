import io as stdio
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays
from PIL import Image

from chunkstream import io


def test_container_layout_bytes():
    data = io.encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert data[:4] == b"STV1" and data[4] == 2
    assert struct.unpack("<2Q", data[5:21]) == (1, 3)
    assert data[21] == 0
    assert data[22:] == struct.pack("<3f", 1.0, 2.0, 3.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_container_roundtrip_lossless_at_f32(x):
    y = io.decode_tensor(io.encode_tensor(x))
    assert y.shape == x.shape
    assert np.array_equal(y, x.astype(np.float32).astype(np.float64))


def test_container_roundtrip_many_random():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        x = rng.normal(size=tuple(rng.integers(1, 4, size=rng.integers(1, 4))))
        assert np.array_equal(io.decode_tensor(io.encode_tensor(x)), x.astype(np.float32))


@pytest.mark.parametrize("mutate", [lambda d: b"STV2" + d[4:], lambda d: d[:-1], lambda d: d[:21] + b"\x01" + d[22:],
                                    lambda d: d[:3]])
def test_container_rejects_malformed(mutate):
    with pytest.raises(io.FormatError):
        io.decode_tensor(mutate(io.encode_tensor(np.ones((2, 2)))))


def test_weight_directory_roundtrip(tmp_path):
    w = {"a.w": np.ones((2, 3)), "b": np.arange(4.0)}
    io.write_weights(tmp_path / "w", w)
    back = io.read_weights(tmp_path / "w")
    assert back.keys() == w.keys() and all(np.array_equal(back[k], w[k]) for k in w)


def test_config_parse_and_comments():
    cfg = io.parse_config("# run\nddim_steps = 20  # fewer\nseed=0x10\n\nomega_text=3.5\n")
    assert cfg.ddim_steps == 20 and cfg.seed == 16 and cfg.omega_text == 3.5 and cfg.Tprime == 600


@pytest.mark.parametrize("text", ["bogus = 1", "T = ten", "eta = -1", "O = 24", "Tprime = 1000", "novalue",
                                  "beta0 = 0.02", "F_cond = 17"])
def test_config_rejects(text):
    with pytest.raises(ValueError):
        io.parse_config(text)


def test_config_env_default(tmp_path, monkeypatch):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 42\n")
    monkeypatch.setenv(io.CONFIG_ENV, str(p))
    assert io.load_config().seed == 42
    monkeypatch.delenv(io.CONFIG_ENV)
    assert io.load_config() == io.RunConfig()


def test_xt_slice_static_columns_equal():
    frame = np.random.default_rng(1).uniform(size=(5, 6, 3))
    img = io.xt_slice(np.repeat(frame[None], 7, axis=0), 2)
    assert img.shape == (6, 7)
    assert (img == img[:, :1]).all()


def test_xt_slice_cut_spike():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(4, 8, 1)), rng.uniform(size=(4, 8, 1))
    v = np.concatenate([np.repeat(a[None], 5, 0), np.repeat(b[None], 5, 0)])
    diffs = np.abs(np.diff(io.xt_slice(v, 1).astype(int), axis=1)).sum(axis=0)
    assert diffs.argmax() == 4 and (np.delete(diffs, 4) == 0).all()


def test_xt_slice_row_range():
    with pytest.raises(IndexError):
        io.xt_slice(np.zeros((2, 3, 3)), 3)


def test_pgm_matches_reference_reader():
    img = np.random.default_rng(3).integers(0, 256, size=(5, 9)).astype(np.uint8)
    data = io.encode_pgm(img)
    ref = Image.open(stdio.BytesIO(data))
    assert ref.mode == "L" and np.array_equal(np.asarray(ref), img)
    buf = stdio.BytesIO()
    ref.save(buf, format="PPM")
    assert np.array_equal(io.decode_pgm(buf.getvalue()), img)
    assert np.array_equal(io.decode_pgm(data), img)


def test_csv_format():
    text = io.metrics_csv([("mawe", 0.1234567891), ("scuts", 2), ("ofs", 1e-9)])
    assert text == "metric,value\nmawe,0.123457\nscuts,2\nofs,1e-09\n"
