import json
import struct

import numpy as np
import pytest

from e3net.checkpoint import (BadHeaderError, BadMagicError, CheckpointError, ShapeMismatchError,
                              TruncatedDataError, load_checkpoint, read_checkpoint, save_checkpoint)
from e3net.model import init_params, preset


@pytest.fixture
def saved(tmp_path):
    cfg = preset("mini")
    P = init_params(cfg, 3)
    path = tmp_path / "m.e3n"
    save_checkpoint(P, cfg, path)
    return cfg, P, path


def _rewrite_header(path, edit):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    edit(header)
    hb = json.dumps(header).encode()
    path.write_bytes(raw[:4] + struct.pack("<I", len(hb)) + hb + raw[8 + hlen:])


def test_round_trip_bitwise(saved):
    cfg, P, path = saved
    Q, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg and list(Q) == list(P)
    assert all(np.array_equal(P[k], Q[k]) and Q[k].dtype == np.float32 for k in P)


def test_round_trip_with_extras(tmp_path):
    cfg = preset("tiny")
    P = init_params(cfg)
    extra = {"optim.m.encoder.bias": np.arange(cfg.num_filters, dtype=np.float32)}
    save_checkpoint(P, cfg, tmp_path / "x", extra=extra, train_state={"step": 7})
    ck = read_checkpoint(tmp_path / "x")
    assert ck.train_state == {"step": 7}
    assert np.array_equal(ck.extra["optim.m.encoder.bias"], extra["optim.m.encoder.bias"])
    assert "optim.m.encoder.bias" not in ck.params


def test_bad_magic(saved):
    _, _, path = saved
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="bad magic"):
        load_checkpoint(path)


def test_truncated_data(saved):
    _, _, path = saved
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(TruncatedDataError, match="truncated tensor data"):
        load_checkpoint(path)


def test_header_declares_absent_tensor(saved):
    _, _, path = saved
    _rewrite_header(path, lambda h: h["tensors"].append(
        {"name": "ghost", "dtype": "f32", "shape": [4], "offset": 1 << 30, "byte_len": 16}))
    with pytest.raises(TruncatedDataError):
        load_checkpoint(path)


def test_shape_mismatch(saved):
    cfg, P, path = saved
    P = dict(P)
    P["mask.bias"] = np.zeros(cfg.num_filters + 1, np.float32)
    save_checkpoint(P, cfg, path)
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path)


def test_config_mismatch(saved):
    _, _, path = saved
    _rewrite_header(path, lambda h: h["config"].update(num_blocks=2))
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(path)


def test_bad_header(saved):
    _, _, path = saved
    _rewrite_header(path, lambda h: h.update(format_version=99))
    with pytest.raises(BadHeaderError):
        load_checkpoint(path)
    path.write_bytes(b"E3N1" + struct.pack("<I", 10 ** 6))
    with pytest.raises(BadHeaderError):
        load_checkpoint(path)


def test_error_codes_are_distinct():
    codes = {cls.code for cls in (BadMagicError, BadHeaderError, TruncatedDataError, ShapeMismatchError)}
    assert len(codes) == 4
    assert all(issubclass(c, CheckpointError) for c in (BadMagicError, TruncatedDataError))
