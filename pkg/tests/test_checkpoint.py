import io
import struct

import numpy as np
import pytest

from mvgate import checkpoint as ckpt_io
from mvgate.checkpoint import MAGIC, Checkpoint, CheckpointError
from mvgate.model import ModelConfig, init_params

CFG = ModelConfig(vocab_size=12, max_len=16, d_model=8, n_heads=2, n_layers=1, mlp_layers=2)


def _ckpt():
    p = init_params(CFG, np.random.default_rng(0))
    return Checkpoint(p.arrays(), CFG, {"vocab": ["a", "b"], "threshold": 0.5})


def test_round_trip_bit_exact(tmp_path):
    ck = _ckpt()
    path = tmp_path / "m.ckpt"
    ckpt_io.save(ck, str(path))
    back = ckpt_io.load(str(path))
    assert back.model_config == CFG and back.meta == ck.meta
    assert list(back.params) == list(ck.params)
    for k in ck.params:
        assert back.params[k].dtype == np.float32
        np.testing.assert_array_equal(back.params[k], ck.params[k])
    assert ckpt_io.dumps(back) == path.read_bytes()


def test_file_object_round_trip():
    buf = io.BytesIO()
    ckpt_io.save(_ckpt(), buf)
    buf.seek(0)
    assert ckpt_io.load(buf).meta["threshold"] == 0.5


def test_header_layout():
    raw = ckpt_io.dumps(_ckpt())
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<II", raw[8:16])
    assert version == 1 and raw[16:16 + hlen].startswith(b"{")


def test_float64_narrowed_on_save():
    ck = _ckpt()
    ck.params = {k: v.astype(np.float64) for k, v in ck.params.items()}
    back = ckpt_io.loads(ckpt_io.dumps(ck))
    assert all(v.dtype == np.float32 for v in back.params.values())


def test_bad_magic():
    raw = bytearray(ckpt_io.dumps(_ckpt()))
    raw[0:1] = b"X"
    with pytest.raises(CheckpointError, match="magic"):
        ckpt_io.loads(bytes(raw))


def test_bad_version():
    raw = bytearray(ckpt_io.dumps(_ckpt()))
    raw[8:12] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError, match="version"):
        ckpt_io.loads(bytes(raw))


def test_truncated_payload():
    with pytest.raises(CheckpointError, match="truncated"):
        ckpt_io.loads(ckpt_io.dumps(_ckpt())[:-5])
