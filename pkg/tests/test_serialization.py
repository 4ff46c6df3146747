import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from srupp import checkpoint as ckpt
from srupp.config import RunConfig, load_config, parse_config, render_config, shipped_configs
from srupp.sru import ConfigError
from srupp.tensor import FormatError

# --- config -----------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(shipped_configs()))
def test_shipped_config_roundtrip(name):
    cfg = load_config(shipped_configs()[name])
    assert parse_config(render_config(cfg)) == cfg
    assert render_config(parse_config(render_config(cfg))) == render_config(cfg)


def test_shipped_full_size_values():
    cfgs = {k: load_config(v) for k, v in shipped_configs().items()}
    ls = cfgs["librispeech"]
    assert (ls.embed_dim, ls.attn_dim, ls.lr, ls.weight_decay) == (3328, 416, 7e-4, 0.05)
    for name, lr in (("aishell1", 2.5e-4), ("tedlium3", 4.4e-4)):
        c = cfgs[name]
        assert (c.embed_dim, c.attn_dim, c.lr, c.weight_decay) == (2176, 272, lr, 0.05)
        assert c.bidirectional


def test_defaults_and_comments():
    cfg = parse_config("# nothing but a comment\n\n")
    assert cfg == RunConfig()
    cfg = parse_config("lr = 0.01   # trailing comment\nbidirectional = yes\n")
    assert cfg.lr == 0.01 and cfg.bidirectional


@pytest.mark.parametrize("text", [
    "colour = blue\n",
    "lr = 1\nlr = 2\n",
    "steps = many\n",
    "bidirectional = maybe\n",
    "just some words\n",
    "embed_dim = 7\nbidirectional = true\n",
    "task = reverse\n",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-9, 1.0), st.integers(1, 64), st.booleans(), st.integers(0, 2**32))
def test_config_roundtrip_property(lr, half, bidi, seed):
    cfg = RunConfig(lr=lr, embed_dim=2 * half, bidirectional=bidi, seed=seed).validate()
    assert parse_config(render_config(cfg)) == cfg


# --- checkpoint -------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_roundtrip_bitwise(tmp_path, dtype):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)).astype(dtype), "layer.0.alpha": np.array([0.5], dtype),
               "big": rng.normal(size=(2, 3, 4, 5)).astype(dtype),
               "nan-free extremes": np.array([np.finfo(dtype).max, np.finfo(dtype).tiny, -0.0], dtype)}
    path = tmp_path / "x.srpp"
    ckpt.save(path, tensors)
    back = ckpt.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    assert not list(tmp_path.glob("*.tmp"))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_checkpoint_roundtrip_property(arr):
    back = ckpt.loads(ckpt.dumps({"t": arr}))["t"]
    assert back.dtype == arr.dtype and back.tobytes() == arr.tobytes()


def test_header_layout():
    data = ckpt.dumps({"w": np.ones(2)})
    assert data[:4] == b"SRPP"
    assert struct.unpack("<IQ", data[4:16]) == (ckpt.VERSION, 1)
    assert struct.unpack("<Q", data[16:24]) == (1,) and data[24:25] == b"w"


def test_version_mismatch_rejected():
    data = bytearray(ckpt.dumps({"w": np.ones(2)}))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(FormatError, match="version 99"):
        ckpt.loads(bytes(data))


def test_bad_magic_rejected():
    with pytest.raises(FormatError, match="magic"):
        ckpt.loads(b"NOPE" + bytes(20))


def test_truncation_reports_offset():
    data = ckpt.dumps({"w": np.arange(10.0)})
    for cut in (2, 10, 20, 30, len(data) - 1):
        with pytest.raises(FormatError) as err:
            ckpt.loads(data[:cut])
        assert err.value.offset is not None and err.value.offset <= cut


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        ckpt.loads(ckpt.dumps({"w": np.ones(1)}) + b"\0")
