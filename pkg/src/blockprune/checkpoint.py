"""Binary checkpoint format.

Layout::

    b"BPRUNE01"                8-byte magic
    u64 little-endian          length of the JSON header in bytes
    header                     UTF-8 JSON
    zero padding               up to the next multiple of 64
    tensor blobs               little-endian f32, each starting 64-byte aligned

Tensor offsets in the header are relative to the start of the blob section,
which begins at ``align64(16 + header_len)``. The header is therefore
enough to locate every tensor without parsing anything else.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from . import tensor as T
from .errors import FormatError
from .model import Attention, Block, FeedForward, LoraAdapter, Model, ModelConfig

MAGIC = b"BPRUNE01"
VERSION = 1
ALIGN = 64


def _align(n):
    return -(-n // ALIGN) * ALIGN


def build_header(model):
    tensors = []
    offset = 0
    for name, p in model.named_parameters():
        nbytes = p.data.size * 4
        tensors.append({"name": name, "shape": list(p.data.shape), "offset": offset,
                        "nbytes": nbytes})
        offset = _align(offset + nbytes)
    lora = None
    if model.adapters:
        lora = {"rank": model.lora_config.rank, "alpha": model.lora_config.alpha,
                "targets": sorted(model.adapters)}
    return {
        "format": MAGIC.decode(),
        "version": VERSION,
        "dtype": "<f4",
        "config": model.config.to_dict(),
        "original_n_blocks": model.original_n_blocks,
        "blocks": [{"index": b.index, "mha": b.mha is not None, "ffn": b.ffn is not None}
                   for b in model.blocks],
        "lora": lora,
        "tensors": tensors,
    }


def save_checkpoint(model, path):
    header = build_header(model)
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    data_start = _align(16 + len(hbytes))
    params = dict(model.named_parameters())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(b"\0" * (data_start - 16 - len(hbytes)))
        pos = 0
        for entry in header["tensors"]:
            f.write(b"\0" * (entry["offset"] - pos))
            blob = np.ascontiguousarray(params[entry["name"]].data, dtype="<f4").tobytes()
            f.write(blob)
            pos = entry["offset"] + len(blob)
    os.replace(tmp, path)


def read_header(path):
    """Parse and sanity-check the header; returns (header, data_start, file_size)."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw = f.read(8)
        if len(raw) != 8:
            raise FormatError(f"{path}: truncated before header length")
        (hlen,) = struct.unpack("<Q", raw)
        hbytes = f.read(hlen)
    if len(hbytes) != hlen:
        raise FormatError(f"{path}: truncated header ({len(hbytes)} of {hlen} bytes)")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON: {e}") from None
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
    return header, _align(16 + hlen), size


def _expected_shapes(cfg, header):
    d, a, f, V = cfg.d_model, cfg.attn_dim, cfg.d_ffn, cfg.vocab_size
    shapes = {"tok_embedding": (V, d), "final_norm": (d,), "lm_head": (V, d)}
    for b in header["blocks"]:
        p = f"blocks.{b['index']}."
        if b["mha"]:
            shapes.update({p + "wq": (a, d), p + "wk": (a, d), p + "wv": (a, d),
                           p + "wo": (d, a), p + "norm1": (d,)})
        if b["ffn"]:
            shapes.update({p + "w_gate": (f, d), p + "w_up": (f, d), p + "w_down": (d, f),
                           p + "norm2": (d,)})
    return shapes


def load_checkpoint(path, dtype=np.float32):
    header, data_start, size = read_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    expected = _expected_shapes(cfg, header)
    arrays = {}
    with open(path, "rb") as f:
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            if entry["nbytes"] != n * 4:
                raise FormatError(f"tensor {name}: shape {list(shape)} disagrees with "
                                  f"{entry['nbytes']} bytes")
            if not name.endswith((".lora_a", ".lora_b")) and expected.get(name) != shape:
                raise FormatError(f"tensor {name}: shape {list(shape)} does not match config "
                                  f"(expected {expected.get(name)})")
            start = data_start + entry["offset"]
            if start + entry["nbytes"] > size:
                raise FormatError(f"tensor {name}: truncated blob (file has {size} bytes, "
                                  f"needs {start + entry['nbytes']})")
            f.seek(start)
            buf = f.read(entry["nbytes"])
            arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype)
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise FormatError(f"tensor {missing[0]}: missing from checkpoint")

    def p(name):
        return T.Tensor(arrays[name], requires_grad=True)

    blocks = []
    for b in header["blocks"]:
        pre = f"blocks.{b['index']}."
        mha = ffn = None
        if b["mha"]:
            mha = Attention(p(pre + "wq"), p(pre + "wk"), p(pre + "wv"), p(pre + "wo"),
                            p(pre + "norm1"))
        if b["ffn"]:
            ffn = FeedForward(p(pre + "w_gate"), p(pre + "w_up"), p(pre + "w_down"),
                              p(pre + "norm2"))
        blocks.append(Block(b["index"], mha, ffn))
    model = Model(cfg, p("tok_embedding"), blocks, p("final_norm"), p("lm_head"),
                  original_n_blocks=header["original_n_blocks"])
    if header.get("lora"):
        from .trainer import LoraConfig

        lo = header["lora"]
        model.lora_config = LoraConfig(rank=lo["rank"], alpha=lo["alpha"])
        scale = lo["alpha"] / lo["rank"]
        for target in lo["targets"]:
            model.adapters[target] = LoraAdapter(p(target + ".lora_a"), p(target + ".lora_b"), scale)
        for base in model.parameters(include_adapters=False):
            base.requires_grad = False
    return model
