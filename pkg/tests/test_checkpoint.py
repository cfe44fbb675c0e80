import json
import struct

import numpy as np
import pytest

from blockprune.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from blockprune.errors import FormatError
from blockprune.importance import UnitRef
from blockprune.pruner import prune
from blockprune.trainer import LoraConfig, attach_lora
from helpers import toy_model


def test_save_load_save_is_byte_identical(tmp_path):
    m = toy_model(n_blocks=3, seed=9)
    a, b = tmp_path / "a.bpr", tmp_path / "b.bpr"
    save_checkpoint(m, a)
    m2 = load_checkpoint(a)
    save_checkpoint(m2, b)
    assert a.read_bytes() == b.read_bytes()
    assert m2.weight_hash() == m.weight_hash()
    assert m2.config == m.config


def test_pruned_indices_survive_round_trip(tmp_path):
    m = toy_model(n_blocks=8)
    pruned, _ = prune(m, [UnitRef("block", 3), UnitRef("block", 6)])
    save_checkpoint(pruned, tmp_path / "p.bpr")
    back = load_checkpoint(tmp_path / "p.bpr")
    assert back.block_indices == [0, 1, 2, 4, 5, 7]
    assert back.original_n_blocks == 8
    assert back.config.n_blocks == 6
    assert back.weight_hash() == pruned.weight_hash()


def test_module_pruned_round_trip(tmp_path):
    m = toy_model(n_blocks=3)
    pruned, _ = prune(m, [UnitRef("mha", 1), UnitRef("ffn", 2)])
    save_checkpoint(pruned, tmp_path / "m.bpr")
    back = load_checkpoint(tmp_path / "m.bpr")
    assert back.block_by_index(1).mha is None and back.block_by_index(1).ffn is not None
    assert back.block_by_index(2).ffn is None
    x = np.arange(6)[None]
    assert np.array_equal(back.forward(x).data, pruned.forward(x).data)


def test_lora_round_trip_keeps_adapters_frozen_base(tmp_path):
    m = toy_model(n_blocks=2)
    attach_lora(m, LoraConfig(rank=2))
    save_checkpoint(m, tmp_path / "l.bpr")
    back = load_checkpoint(tmp_path / "l.bpr")
    assert sorted(back.adapters) == sorted(m.adapters)
    assert not any(p.requires_grad for p in back.parameters(include_adapters=False))
    assert back.weight_hash(include_adapters=True) == m.weight_hash(include_adapters=True)


def test_offset_walk_oracle(tmp_path):
    """Locate every tensor from the header alone, with no package code."""
    m = toy_model(n_blocks=2, seed=3)
    path = tmp_path / "w.bpr"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw[:8] == b"BPRUNE01"
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = (16 + hlen + 63) // 64 * 64
    assert set(raw[16 + hlen: base]) <= {0}
    params = dict(m.named_parameters())
    assert [t["name"] for t in header["tensors"]] == list(params)
    for t in header["tensors"]:
        start = base + t["offset"]
        assert start % 64 == 0
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(raw[start: start + 4 * n], dtype="<f4").reshape(t["shape"])
        assert np.array_equal(arr, params[t["name"]].data)


def _corrupt(tmp_path, fn):
    path = tmp_path / "c.bpr"
    save_checkpoint(toy_model(n_blocks=1), path)
    raw = bytearray(path.read_bytes())
    path.write_bytes(fn(raw))
    return path


def test_bad_magic(tmp_path):
    path = _corrupt(tmp_path, lambda r: b"XXXXXXXX" + r[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_truncated_blob_names_tensor(tmp_path):
    path = _corrupt(tmp_path, lambda r: r[:-100])
    with pytest.raises(FormatError, match="lm_head"):
        load_checkpoint(path)


def _edit_header(raw, edit):
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    edit(header)
    hb = json.dumps(header).encode()
    base = (16 + hlen + 63) // 64 * 64
    new_base = (16 + len(hb) + 63) // 64 * 64
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"\0" * (new_base - 16 - len(hb)) + raw[base:]


def test_version_mismatch(tmp_path):
    path = _corrupt(tmp_path, lambda r: _edit_header(r, lambda h: h.update(version=99)))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_shape_disagreement_names_tensor(tmp_path):
    def edit(h):
        t = next(t for t in h["tensors"] if t["name"] == "blocks.0.wq")
        t["shape"] = [t["shape"][1], t["shape"][0] + 1]

    path = _corrupt(tmp_path, lambda r: _edit_header(r, edit))
    with pytest.raises(FormatError, match="blocks.0.wq"):
        load_checkpoint(path)


def test_missing_tensor_named(tmp_path):
    def edit(h):
        h["tensors"] = [t for t in h["tensors"] if t["name"] != "blocks.0.w_up"]

    path = _corrupt(tmp_path, lambda r: _edit_header(r, edit))
    with pytest.raises(FormatError, match="blocks.0.w_up"):
        load_checkpoint(path)


def test_float64_model_is_stored_as_f32(tmp_path):
    m = toy_model(n_blocks=1, dtype=np.float64)
    save_checkpoint(m, tmp_path / "d.bpr")
    back = load_checkpoint(tmp_path / "d.bpr", dtype=np.float64)
    assert np.array_equal(back.lm_head.data, m.lm_head.data.astype(np.float32))
