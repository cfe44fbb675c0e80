"""Shared builders and oracles for the test suite."""
import hashlib
import json
from pathlib import Path

import numpy as np

from blockprune import tensor as T
from blockprune.checkpoint import load_checkpoint, save_checkpoint
from blockprune.model import Model, ModelConfig
from blockprune.trainer import TrainConfig, pretrain


def toy_config(n_blocks=2, d_model=16, n_heads=2, d_ffn=48, vocab_size=257, max_seq_len=64,
               **kw):
    return ModelConfig(vocab_size=vocab_size, d_model=d_model, n_heads=n_heads, d_ffn=d_ffn,
                       n_blocks=n_blocks, max_seq_len=max_seq_len, **kw)


def toy_model(n_blocks=2, seed=0, dtype=np.float32, **kw):
    return Model.init(toy_config(n_blocks=n_blocks, **kw), seed=seed, dtype=dtype)


def zero_branch(model, index):
    """Zero the residual outputs (wo, w_down) of one block in place."""
    b = model.block_by_index(index)
    b.mha.wo.data[:] = 0
    b.ffn.w_down.data[:] = 0
    return model


def central_diff(f, arrays, which, idx, eps=1e-5):
    """(f(x+eps) - f(x-eps)) / 2eps for one entry, evaluated in extended precision.

    ``arrays`` are float64 inputs; they are promoted to long double so the
    difference quotient does not drown in float64 roundoff.
    """
    xs = [np.asarray(a, dtype=np.longdouble).copy() for a in arrays]
    orig = xs[which][idx]
    xs[which][idx] = orig + eps
    hi = f(*xs)
    xs[which][idx] = orig - eps
    lo = f(*xs)
    return float((hi - lo) / (2 * eps))


def rel_err(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), 1e-8)


TOY_TRAIN = dict(lr=3e-3, batch=16, seq_len=64, eval_every=0, eval_windows=32)


def trained_toy(cache_dir, corpus, n_blocks, steps, d_model=64, n_heads=4, d_ffn=192, seed=0):
    """Pretrain (or load the cached result of) a toy on ``corpus``.

    Training is deterministic, so the checkpoint is cached under a key
    derived from the full recipe.
    """
    mcfg = ModelConfig(vocab_size=257, d_model=d_model, n_heads=n_heads, d_ffn=d_ffn,
                       n_blocks=n_blocks, max_seq_len=256)
    tcfg = TrainConfig(max_steps=steps, seed=seed, **TOY_TRAIN)
    key = json.dumps([mcfg.to_dict(), tcfg.to_dict(), corpus.name, len(corpus.tokens)],
                     sort_keys=True)
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"toy-{digest}.bpr"
    if not path.exists():
        model, _ = pretrain(mcfg, corpus, tcfg)
        save_checkpoint(model, path)
    return load_checkpoint(path)


def scalar_loss(out, proj):
    """sum(out * proj) as a tape op, to turn any tensor into a scalar."""
    return T.tsum(T.mul(out, T.Tensor(proj, dtype=out.dtype)))


# criterion number -> one-line pass/fail summary, printed at the end of the run
ACCEPTANCE = {}


def record(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok
