"""LLaMA-style decoder-only Transformer on top of :mod:`blockprune.tensor`.

Blocks are pre-norm: ``x += MHA(rmsnorm(x))`` then ``x += FFN(rmsnorm(x))``
with rotary positions, no biases and a SwiGLU FFN. A block keeps its
original index after pruning, and either of its two modules may be absent
(module-granularity pruning).
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigError

MHA_WEIGHTS = ("wq", "wk", "wv", "wo")
FFN_WEIGHTS = ("w_gate", "w_up", "w_down")
PROJECTIONS = MHA_WEIGHTS + FFN_WEIGHTS


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    d_ffn: int
    n_blocks: int
    max_seq_len: int
    rope_base: float = 10000.0
    rms_eps: float = 1e-5
    # width of one attention head; None means d_model // n_heads
    head_dim: int | None = None

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "d_ffn", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", key=name)
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be >= 0, got {self.n_blocks}", key="n_blocks")
        if self.head_dim is None:
            if self.d_model % self.n_heads:
                raise ConfigError(
                    f"d_model={self.d_model} not divisible by n_heads={self.n_heads}", key="n_heads")
            self.head_dim = self.d_model // self.n_heads
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}",
                              key="head_dim")
        if self.rms_eps <= 0:
            raise ConfigError("rms_eps must be > 0", key="rms_eps")

    @property
    def attn_dim(self):
        return self.n_heads * self.head_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown model config key {unknown[0]!r}", key=unknown[0])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from None

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


# --------------------------------------------------------------------------
# parameter accounting


def mha_params(cfg):
    return 4 * cfg.d_model * cfg.attn_dim + cfg.d_model


def ffn_params(cfg):
    return 3 * cfg.d_model * cfg.d_ffn + cfg.d_model


def block_params(cfg):
    return mha_params(cfg) + ffn_params(cfg)


def non_block_params(cfg):
    return 2 * cfg.vocab_size * cfg.d_model + cfg.d_model


def param_count(obj, unit=None):
    """Exact parameter count of a config, model, or block.

    ``unit`` selects a slice: ``"block"``, ``"mha"``, ``"ffn"`` (per unit of
    the config's shape) or ``"non_block"``. With no unit, a config/model
    returns its total and a block its own size. LoRA adapters are not
    counted.
    """
    if isinstance(obj, Block):
        return obj.param_count()
    cfg = obj.config if isinstance(obj, Model) else obj
    per = {"block": block_params, "mha": mha_params, "ffn": ffn_params,
           "non_block": non_block_params}
    if unit is not None:
        if unit not in per:
            raise ConfigError(f"unknown unit {unit!r}", key="unit")
        return per[unit](cfg)
    if isinstance(obj, Model):
        return non_block_params(cfg) + sum(b.param_count() for b in obj.blocks)
    return non_block_params(cfg) + cfg.n_blocks * block_params(cfg)


# --------------------------------------------------------------------------
# structure


class Attention:
    def __init__(self, wq, wk, wv, wo, norm):
        self.wq, self.wk, self.wv, self.wo, self.norm = wq, wk, wv, wo, norm

    def weights(self):
        return {k: getattr(self, k) for k in MHA_WEIGHTS}

    def param_count(self):
        return sum(w.data.size for w in self.weights().values()) + self.norm.data.size


class FeedForward:
    def __init__(self, w_gate, w_up, w_down, norm):
        self.w_gate, self.w_up, self.w_down, self.norm = w_gate, w_up, w_down, norm

    def weights(self):
        return {k: getattr(self, k) for k in FFN_WEIGHTS}

    def param_count(self):
        return sum(w.data.size for w in self.weights().values()) + self.norm.data.size


class Block:
    """One MHA + FFN pair; either module is None once pruned away."""

    def __init__(self, index, mha, ffn):
        self.index = index
        self.mha = mha
        self.ffn = ffn

    @property
    def norm1(self):
        return None if self.mha is None else self.mha.norm

    @property
    def norm2(self):
        return None if self.ffn is None else self.ffn.norm

    def weights(self):
        """Projection matrices of the live modules, keyed by short name."""
        out = {}
        if self.mha is not None:
            out.update(self.mha.weights())
        if self.ffn is not None:
            out.update(self.ffn.weights())
        return out

    def named_parameters(self):
        p = f"blocks.{self.index}."
        if self.mha is not None:
            for k, w in self.mha.weights().items():
                yield p + k, w
            yield p + "norm1", self.mha.norm
        if self.ffn is not None:
            for k, w in self.ffn.weights().items():
                yield p + k, w
            yield p + "norm2", self.ffn.norm

    def param_count(self):
        return sum(m.param_count() for m in (self.mha, self.ffn) if m is not None)

    def __repr__(self):
        mods = "+".join(n for n, m in (("mha", self.mha), ("ffn", self.ffn)) if m is not None)
        return f"Block({self.index}, {mods or 'empty'})"


class KvCache:
    """Per-block key/value buffers of shape [batch, n_heads, capacity, head_dim]."""

    def __init__(self, model, batch, capacity):
        cfg = model.config
        if capacity > cfg.max_seq_len:
            raise CapacityError(f"cache capacity {capacity} exceeds max_seq_len {cfg.max_seq_len}")
        dt = model.dtype
        shape = (batch, cfg.n_heads, capacity, cfg.head_dim)
        self.batch = batch
        self.capacity = capacity
        self.length = 0
        self.block_indices = [b.index for b in model.blocks if b.mha is not None]
        self.keys = {i: np.zeros(shape, dt) for i in self.block_indices}
        self.values = {i: np.zeros(shape, dt) for i in self.block_indices}

    @property
    def n_layers(self):
        return len(self.keys)


class LoraAdapter:
    """Low-rank update ``scale * B @ A`` attached to one projection matrix."""

    def __init__(self, a, b, scale):
        self.a = a  # [r, d_in]
        self.b = b  # [d_out, r]
        self.scale = float(scale)

    @property
    def rank(self):
        return self.a.shape[0]

    def delta(self):
        return self.scale * (self.b.data @ self.a.data)


class Model:
    def __init__(self, config, tok_embedding, blocks, final_norm, lm_head, original_n_blocks=None):
        self.config = config
        self.tok_embedding = tok_embedding
        self.blocks = list(blocks)
        self.final_norm = final_norm
        self.lm_head = lm_head
        self.original_n_blocks = (config.n_blocks if original_n_blocks is None
                                  else original_n_blocks)
        self.adapters = {}
        self.lora_config = None

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        """Random initialisation; residual-branch outputs are scaled by depth."""
        rng = np.random.default_rng(seed)
        d, a, f = config.d_model, config.attn_dim, config.d_ffn
        resid = 1.0 / np.sqrt(2.0 * max(config.n_blocks, 1))

        def w(shape, std):
            return T.Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

        def ones(n):
            return T.Tensor(np.ones(n, dtype), requires_grad=True)

        emb = w((config.vocab_size, d), 1.0)
        blocks = []
        for i in range(config.n_blocks):
            mha = Attention(w((a, d), d ** -0.5), w((a, d), d ** -0.5), w((a, d), d ** -0.5),
                            w((d, a), a ** -0.5 * resid), ones(d))
            ffn = FeedForward(w((f, d), d ** -0.5), w((f, d), d ** -0.5),
                              w((d, f), f ** -0.5 * resid), ones(d))
            blocks.append(Block(i, mha, ffn))
        return cls(config, emb, blocks, ones(d), w((config.vocab_size, d), d ** -0.5))

    # -- parameter access ---------------------------------------------------

    @property
    def dtype(self):
        return self.tok_embedding.data.dtype

    def block_by_index(self, index):
        for b in self.blocks:
            if b.index == index:
                return b
        raise KeyError(f"no live block with original index {index}")

    @property
    def block_indices(self):
        return [b.index for b in self.blocks]

    def named_parameters(self, include_adapters=True):
        yield "tok_embedding", self.tok_embedding
        for b in self.blocks:
            yield from b.named_parameters()
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head
        if include_adapters:
            for name in sorted(self.adapters):
                ad = self.adapters[name]
                yield name + ".lora_a", ad.a
                yield name + ".lora_b", ad.b

    def parameters(self, include_adapters=True):
        return [p for _, p in self.named_parameters(include_adapters)]

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}

    def param_count(self):
        return param_count(self)

    def weight_hash(self, include_adapters=False):
        h = hashlib.sha256()
        for name, p in self.named_parameters(include_adapters):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Copy of the model with every parameter cast to ``dtype``."""
        m = self.copy()
        for _, p in m.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return m

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def new_cache(self, batch, capacity=None):
        return KvCache(self, batch, self.config.max_seq_len if capacity is None else capacity)

    # -- computation --------------------------------------------------------

    def _proj(self, x, block, key, weight):
        y = T.linear(x, weight)
        ad = self.adapters.get(f"blocks.{block.index}.{key}")
        if ad is not None:
            low = T.linear(T.linear(x, ad.a), ad.b)
            y = T.add(y, T.scale(low, ad.scale))
        return y

    def _attention(self, x, block, cache, start):
        cfg = self.config
        mha = block.mha
        h = T.rmsnorm(x, mha.norm, cfg.rms_eps)
        q = T.rope(T.split_heads(self._proj(h, block, "wq", mha.wq), cfg.n_heads), start, cfg.rope_base)
        k = T.rope(T.split_heads(self._proj(h, block, "wk", mha.wk), cfg.n_heads), start, cfg.rope_base)
        v = T.split_heads(self._proj(h, block, "wv", mha.wv), cfg.n_heads)
        if cache is not None:
            end = start + x.shape[1]
            kb, vb = cache.keys[block.index], cache.values[block.index]
            kb[:, :, start:end] = k.data
            vb[:, :, start:end] = v.data
            k, v = T.Tensor(kb[:, :, :end]), T.Tensor(vb[:, :, :end])
        o = T.merge_heads(T.causal_attention(q, k, v, start if cache is not None else 0))
        return self._proj(o, block, "wo", mha.wo)

    def _ffn(self, x, block):
        ffn = block.ffn
        h = T.rmsnorm(x, ffn.norm, self.config.rms_eps)
        gate = T.silu(self._proj(h, block, "w_gate", ffn.w_gate))
        up = self._proj(h, block, "w_up", ffn.w_up)
        return self._proj(T.mul(gate, up), block, "w_down", ffn.w_down)

    def forward(self, tokens, cache=None, skip=()):
        """Logits [batch, seq, vocab] for integer tokens [batch, seq].

        ``skip`` holds ``(kind, index)`` pairs with kind in block/mha/ffn;
        those units are bypassed without touching the weights. With a cache
        the tokens continue the cached prefix and their K/V are appended.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, S = tokens.shape
        start = 0 if cache is None else cache.length
        if cache is not None:
            if cache.batch != B:
                raise CapacityError(f"cache batch {cache.batch} != input batch {B}")
            if start + S > cache.capacity:
                raise CapacityError(
                    f"cache overflow: {start} + {S} tokens exceeds capacity {cache.capacity}")
        elif S > self.config.max_seq_len:
            raise CapacityError(f"sequence length {S} exceeds max_seq_len {self.config.max_seq_len}")
        x = T.embedding_lookup(self.tok_embedding, tokens)
        for block in self.blocks:
            if ("block", block.index) in skip:
                continue
            if block.mha is not None and ("mha", block.index) not in skip:
                x = T.add(x, self._attention(x, block, cache, start))
            if block.ffn is not None and ("ffn", block.index) not in skip:
                x = T.add(x, self._ffn(x, block))
        if cache is not None:
            cache.length = start + S
        x = T.rmsnorm(x, self.final_norm, self.config.rms_eps)
        return T.linear(x, self.lm_head)

    __call__ = forward

    def loss(self, inputs, targets, skip=()):
        return T.cross_entropy(self.forward(inputs, skip=skip), targets)

    def __repr__(self):
        c = self.config
        return (f"Model(blocks={self.block_indices}, d_model={c.d_model}, heads={c.n_heads}, "
                f"d_ffn={c.d_ffn}, params={self.param_count():,})")


def forward(model, tokens, cache=None, skip=()):
    return model.forward(tokens, cache=cache, skip=skip)


def decode_step(model, cache, token):
    """Feed one token per sequence through the cache; returns logits [batch, vocab]."""
    tok = np.asarray(token).reshape(-1, 1)
    if cache.length >= cache.capacity:
        raise CapacityError(f"cache full ({cache.length}/{cache.capacity})")
    with T.no_grad():
        return model.forward(tok, cache=cache).data[:, -1, :]


def prefill(model, cache, tokens):
    """Run a prompt [batch, seq] through the cache; returns last-position logits."""
    with T.no_grad():
        return model.forward(tokens, cache=cache).data[:, -1, :]


def greedy_generate(model, prompt, n_new, use_cache=True):
    """Greedy continuation of ``prompt`` [batch, seq]; returns [batch, n_new] tokens."""
    prompt = np.atleast_2d(np.asarray(prompt))
    B, S = prompt.shape
    out = np.empty((B, n_new), dtype=np.int64)
    if n_new == 0:
        return out
    if use_cache:
        cache = model.new_cache(B, S + n_new)
        logits = prefill(model, cache, prompt)
        for t in range(n_new):
            nxt = logits.argmax(axis=-1)
            out[:, t] = nxt
            if t + 1 < n_new:
                logits = decode_step(model, cache, nxt)
        return out
    seq = prompt
    with T.no_grad():
        for t in range(n_new):
            nxt = model.forward(seq).data[:, -1, :].argmax(axis=-1)
            out[:, t] = nxt
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out
