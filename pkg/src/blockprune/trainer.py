"""Pretraining and post-pruning retraining (LoRA, full fine-tuning, CPT then LoRA)."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corpus import batch_iter
from .errors import ConfigError, ContractError, NumericError
from .model import PROJECTIONS, LoraAdapter, Model

log = logging.getLogger(__name__)

MODES = ("pretrain", "lora", "full_ft")
RETRAIN_MODES = ("lora", "full_ft", "cpt_then_lora")


@dataclass
class TrainConfig:
    mode: str = "pretrain"
    lr: float = 1e-4
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    batch: int = 16
    seq_len: int = 128
    max_steps: int = 5000
    seed: int = 0
    eval_every: int = 250
    eval_windows: int = 64

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.mode not in MODES:
            raise ConfigError(f"unknown train mode {self.mode!r}", key="mode")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", key="lr")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}", key="betas")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be > 0", key="grad_clip_norm")
        if self.batch < 1 or self.seq_len < 1 or self.max_steps < 0:
            raise ConfigError("batch, seq_len must be >= 1 and max_steps >= 0", key="batch")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float | None = None  # None -> 2 * rank
    targets: tuple = PROJECTIONS
    init_std: float | None = None  # None -> 1 / sqrt(d_in)

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}", key="rank")
        if self.alpha is None:
            self.alpha = 2.0 * self.rank
        unknown = set(self.targets) - set(PROJECTIONS)
        if unknown:
            raise ConfigError(f"unknown LoRA target {sorted(unknown)[0]!r}", key="targets")

    @property
    def scale(self):
        return self.alpha / self.rank


# --------------------------------------------------------------------------
# optimiser


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied only to parameters with ``ndim >= 2`` (projection and
    embedding matrices); norm gains are left alone.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.1):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def global_grad_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                         for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm):
    """Rescale grads in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= coef
    return norm


# --------------------------------------------------------------------------
# LoRA


def attach_lora(model, cfg=None, seed=0):
    """Attach a zero-initialised adapter to every targeted projection and freeze the base."""
    cfg = cfg or LoraConfig()
    if model.adapters:
        raise ContractError("model already has LoRA adapters attached")
    rng = np.random.default_rng(seed)
    for block in model.blocks:
        for key, w in block.weights().items():
            if key not in cfg.targets:
                continue
            d_out, d_in = w.shape
            std = cfg.init_std if cfg.init_std is not None else d_in ** -0.5
            a = T.Tensor(rng.normal(0.0, std, (cfg.rank, d_in)).astype(model.dtype),
                         requires_grad=True)
            b = T.Tensor(np.zeros((d_out, cfg.rank), model.dtype), requires_grad=True)
            model.adapters[f"blocks.{block.index}.{key}"] = LoraAdapter(a, b, cfg.scale)
    for p in model.parameters(include_adapters=False):
        p.requires_grad = False
    model.lora_config = cfg
    return model


def merge_lora(model):
    """Fold every adapter into its base weight, drop the adapters and unfreeze."""
    if not model.adapters:
        raise ContractError("no LoRA adapters to merge")
    for name, ad in model.adapters.items():
        _, idx, key = name.split(".")
        w = model.block_by_index(int(idx)).weights()[key]
        w.data = (w.data + ad.delta()).astype(w.data.dtype)
    model.adapters = {}
    model.lora_config = None
    for p in model.parameters():
        p.requires_grad = True
    return model


def lora_trainable_count(model):
    return sum(ad.a.data.size + ad.b.data.size for ad in model.adapters.values())


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainCurve:
    rows: list = field(default_factory=list)  # dicts: step, train_loss, val_ppl, grad_norm

    def append(self, **row):
        self.rows.append(row)

    @property
    def final_val_ppl(self):
        vals = [r["val_ppl"] for r in self.rows if r.get("val_ppl") is not None]
        return vals[-1] if vals else None

    @property
    def losses(self):
        return [r["train_loss"] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["step", "train_loss", "val_ppl"])
            for r in self.rows:
                vp = r.get("val_ppl")
                w.writerow([r["step"], repr(r["train_loss"]), "" if vp is None else repr(vp)])


def train(model, corpus, cfg, params=None, on_step=None, checkpoint_path=None):
    """Run ``cfg.max_steps`` AdamW steps on the next-token loss.

    Only ``params`` (default: every parameter with requires_grad) are
    updated. Validation PPL is logged every ``eval_every`` steps and at the
    end. ``on_step(step, params)`` is called after clipping, before the
    update, which lets tests observe clipped gradients. With
    ``checkpoint_path`` the model is saved there at every evaluation.
    """
    from .bench import eval_ppl
    from .checkpoint import save_checkpoint

    if params is None:
        params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    batches = batch_iter(corpus, cfg.batch, cfg.seq_len, seed=cfg.seed)
    curve = TrainCurve()

    def val():
        return eval_ppl(model, corpus.val, cfg.seq_len, max_windows=cfg.eval_windows)

    for step in range(1, cfg.max_steps + 1):
        x, y = next(batches)
        opt.zero_grad()
        loss = model.loss(x, y)
        lv = loss.item()
        if not math.isfinite(lv):
            raise NumericError(f"training diverged at step {step}: loss={lv}")
        T.backward(loss)
        norm = clip_grad_norm(params, cfg.grad_clip_norm)
        if on_step is not None:
            on_step(step, params)
        opt.step()
        row = {"step": step, "train_loss": lv, "grad_norm": norm, "val_ppl": None}
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.max_steps):
            row["val_ppl"] = val()
            log.info("step %d loss %.4f val_ppl %.3f", step, lv, row["val_ppl"])
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        curve.rows.append(row)
    if cfg.max_steps == 0 and cfg.eval_every:
        curve.append(step=0, train_loss=float("nan"), grad_norm=0.0, val_ppl=val())
    return curve


def pretrain(config, corpus, cfg, init_seed=None, checkpoint_path=None):
    """Train a freshly initialised model; returns (model, curve)."""
    model = Model.init(config, seed=cfg.seed if init_seed is None else init_seed)
    curve = train(model, corpus, cfg, checkpoint_path=checkpoint_path)
    return model, curve


def retrain(model, mode, corpus, cfg, lora_cfg=None, lora_steps=None, checkpoint_path=None):
    """Recover a (pruned) model in place; returns (model, curve).

    ``lora`` trains adapters only (attached if absent, left attached),
    ``full_ft`` updates every parameter, and ``cpt_then_lora`` runs the
    full budget followed by ``lora_steps`` (default: the same) of LoRA.
    """
    if mode not in RETRAIN_MODES:
        raise ConfigError(f"unknown retrain mode {mode!r}", key="mode")
    if mode == "full_ft":
        if model.adapters:
            raise ContractError("full_ft on a model with attached adapters; merge them first")
        return model, train(model, corpus, _with(cfg, mode="full_ft"),
                            checkpoint_path=checkpoint_path)
    if mode == "lora":
        if not model.adapters:
            attach_lora(model, lora_cfg, seed=cfg.seed)
        params = [p for _, ad in sorted(model.adapters.items()) for p in (ad.a, ad.b)]
        return model, train(model, corpus, _with(cfg, mode="lora"), params=params,
                            checkpoint_path=checkpoint_path)
    model, curve = retrain(model, "full_ft", corpus, cfg, checkpoint_path=checkpoint_path)
    steps = cfg.max_steps if lora_steps is None else lora_steps
    model, curve2 = retrain(model, "lora", corpus, _with(cfg, max_steps=steps), lora_cfg,
                           checkpoint_path=checkpoint_path)
    offset = cfg.max_steps
    for r in curve2.rows:
        curve.rows.append({**r, "step": r["step"] + offset})
    return model, curve


def _with(cfg, **kw):
    d = cfg.to_dict()
    d.update(kw)
    return TrainConfig(**d)
