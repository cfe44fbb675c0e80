"""Unit selection and structural surgery.

Depth pruning removes whole blocks (or whole MHA / FFN modules) and keeps
every surviving weight at its original shape. A magnitude-based width
baseline is included for latency comparisons.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, InfeasibleError
from .importance import (
    ScoreConfig,
    UnitRef,
    candidate_units,
    rank,
    score_ppl,
    score_units,
    scores_to_json,
)
from .model import ModelConfig, block_params, ffn_params, mha_params, param_count


@dataclass
class PruneSpec:
    remove_count: int | None = None
    target_params: int | None = None
    target_ratio: float | None = None
    granularity: str = "block"
    criterion: str = "ppl"
    score_config: ScoreConfig | None = None
    iterative: bool = False

    def __post_init__(self):
        given = [k for k in ("remove_count", "target_params", "target_ratio")
                 if getattr(self, k) is not None]
        if len(given) != 1:
            raise ConfigError("set exactly one of remove_count, target_params, target_ratio",
                              key="target")
        if self.target_ratio is not None and not 0 < self.target_ratio < 1:
            raise ConfigError(f"target_ratio must lie in (0, 1), got {self.target_ratio}",
                              key="target_ratio")
        if self.remove_count is not None and self.remove_count < 0:
            raise ConfigError("remove_count must be >= 0", key="remove_count")
        if self.score_config is None:
            self.score_config = ScoreConfig(criterion=self.criterion, granularity=self.granularity)

    def target_size(self, total):
        if self.target_params is not None:
            return int(self.target_params)
        if self.target_ratio is not None:
            return (1.0 - self.target_ratio) * total
        return None


@dataclass
class PruneReport:
    removed: list
    surviving: list
    params_before: int
    params_after: int
    criterion: str
    granularity: str = "block"
    scores: list = field(default_factory=list)
    removal_order: list = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self):
        def units(us):
            return [{"kind": u.kind, "block_index": u.block_index} for u in us]

        return {"removed": units(self.removed), "surviving": units(self.surviving),
                "params_before": self.params_before, "params_after": self.params_after,
                "criterion": self.criterion, "granularity": self.granularity,
                "scores": self.scores, "removal_order": units(self.removal_order),
                "seconds": self.seconds}

    @classmethod
    def from_dict(cls, d):
        def units(us):
            return [UnitRef(u["kind"], u["block_index"]) for u in us]

        return cls(units(d["removed"]), units(d["surviving"]), d["params_before"],
                   d["params_after"], d["criterion"], d.get("granularity", "block"),
                   d.get("scores", []), units(d.get("removal_order", [])), d.get("seconds", 0.0))

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


# --------------------------------------------------------------------------
# sizing


def blocks_to_remove(config, remove_count=None, target_params=None, target_ratio=None):
    """Number of whole blocks to drop so the model lands on the target size.

    Picks the count whose resulting size is closest to the target; exact
    ties go to the larger removal. ``target_ratio`` is the fraction of total
    parameters to remove.
    """
    n = config.n_blocks
    if remove_count is not None:
        k = int(remove_count)
    else:
        total = param_count(config)
        per = block_params(config)
        if target_params is None:
            if target_ratio is None or not 0 < target_ratio < 1:
                raise ConfigError("need remove_count, target_params or 0 < target_ratio < 1",
                                  key="target")
            target_params = (1.0 - target_ratio) * total
        if target_params >= total:
            return 0
        x = (total - target_params) / per
        k = math.floor(x)
        if x - k >= 0.5:
            k += 1
    if k >= n:
        raise InfeasibleError(f"removing {k} of {n} blocks leaves nothing")
    return k


def plan(config, spec):
    """Dry-run sizing from the config alone (no weights)."""
    k = blocks_to_remove(config, spec.remove_count, spec.target_params, spec.target_ratio)
    after = ModelConfig(**{**config.to_dict(), "n_blocks": config.n_blocks - k})
    return {"n_blocks_before": config.n_blocks, "remove": k,
            "surviving_blocks": config.n_blocks - k,
            "params_before": param_count(config), "params_after": param_count(after),
            "per_block_params": block_params(config), "criterion": spec.criterion}


def unit_params(config, unit):
    return {"block": block_params, "mha": mha_params, "ffn": ffn_params}[unit.kind](config)


# --------------------------------------------------------------------------
# selection


def select_units(scores, k, spec=None):
    """The ``k`` lowest-scoring unprotected units (higher index first on ties)."""
    free = [s for s in rank(scores) if not s.protected]
    if k > len(free):
        raise InfeasibleError(f"asked to remove {k} units but only {len(free)} are unprotected")
    return [s.unit for s in free[:k]]


def select_by_budget(scores, config, target_params, current_params):
    """Greedy lowest-score-first selection of mixed-size units toward a size target.

    A unit is taken while doing so moves the model closer to the target.
    """
    chosen = []
    size = current_params
    for s in rank(scores):
        if s.protected:
            continue
        nxt = size - unit_params(config, s.unit)
        if abs(nxt - target_params) < abs(size - target_params) or (
                abs(nxt - target_params) == abs(size - target_params) and nxt >= 0):
            chosen.append(s.unit)
            size = nxt
        else:
            break
    return chosen


# --------------------------------------------------------------------------
# surgery


def _remove_units(model, selection):
    keys = [u.key for u in selection]
    if len(set(keys)) != len(keys):
        raise ContractError(f"duplicate unit in selection: {keys}")
    live = set(model.block_indices)
    for u in selection:
        if u.block_index not in live:
            raise ContractError(f"unit {u} does not exist in the model")
        b = model.block_by_index(u.block_index)
        if (u.kind == "mha" and b.mha is None) or (u.kind == "ffn" and b.ffn is None):
            raise ContractError(f"unit {u} was already removed")
    m = model.copy()
    drop_blocks = {u.block_index for u in selection if u.kind == "block"}
    for u in selection:
        if u.kind != "block":
            b = m.block_by_index(u.block_index)
            setattr(b, u.kind, None)
            if b.mha is None and b.ffn is None:
                drop_blocks.add(b.index)
    m.blocks = [b for b in m.blocks if b.index not in drop_blocks]
    live_names = {f"blocks.{b.index}.{k}" for b in m.blocks for k in b.weights()}
    m.adapters = {k: v for k, v in m.adapters.items() if k in live_names}
    m.config = ModelConfig(**{**m.config.to_dict(), "n_blocks": len(m.blocks)})
    return m


def _surviving(model, granularity):
    return candidate_units(model, granularity)


def prune(model, selection, criterion="", scores=None, granularity=None):
    """Physically remove ``selection`` from a copy of ``model``.

    Returns (pruned_model, report). The input model is not modified.
    """
    selection = list(selection)
    if granularity is None:
        granularity = "module" if any(u.kind != "block" for u in selection) else "block"
    before = param_count(model)
    pruned = _remove_units(model, selection)
    report = PruneReport(
        removed=selection,
        surviving=_surviving(pruned, granularity),
        params_before=before,
        params_after=param_count(pruned),
        criterion=criterion,
        granularity=granularity,
        scores=scores_to_json(scores) if scores else [],
        removal_order=list(selection),
    )
    return pruned, report


def prune_one_shot(model, calib, spec):
    """Score every unit once, take the least important ones, cut them in one step."""
    t0 = time.perf_counter()
    cfg = spec.score_config
    scores = score_units(model, calib, cfg)
    if spec.granularity == "block":
        k = blocks_to_remove(model.config, spec.remove_count, spec.target_params,
                             spec.target_ratio)
        selection = select_units(scores, k, spec)
    elif spec.remove_count is not None:
        selection = select_units(scores, spec.remove_count, spec)
    else:
        target = spec.target_size(param_count(model))
        selection = select_by_budget(scores, model.config, target, param_count(model))
    pruned, report = prune(model, selection, cfg.criterion, scores, spec.granularity)
    report.seconds = time.perf_counter() - t0
    return pruned, report


def prune_iterative(model, calib, spec):
    """Remove one unit at a time, re-scoring the survivors after each removal.

    Protection flags follow the criterion. Block granularity only uses the
    block count from the PruneSpec target; the calibration set is reused in
    every round.
    """
    if spec.granularity != "block":
        raise ConfigError("iterative pruning supports block granularity only", key="granularity")
    t0 = time.perf_counter()
    k = blocks_to_remove(model.config, spec.remove_count, spec.target_params, spec.target_ratio)
    cfg = spec.score_config
    current = model
    order = []
    first_scores = None
    for _ in range(k):
        scores = score_units(current, calib, cfg)
        if first_scores is None:
            first_scores = scores
        (unit,) = select_units(scores, 1, spec)
        order.append(unit)
        current = _remove_units(current, [unit])
    report = PruneReport(
        removed=list(order), surviving=_surviving(current, "block"),
        params_before=param_count(model), params_after=param_count(current),
        criterion=cfg.criterion, granularity="block",
        scores=scores_to_json(first_scores) if first_scores else [],
        removal_order=list(order), seconds=time.perf_counter() - t0)
    return current, report


# --------------------------------------------------------------------------
# width baseline


def prune_width_baseline(model, ratio):
    """Uniformly drop attention heads and FFN channels with the smallest L2 norm.

    In every block the same number of heads and channels is removed
    (``round(ratio * n)``), ranked locally: a head by the norm of its rows in
    wq/wk/wv, a channel by the norm of its rows in w_gate/w_up. Depth is
    unchanged.
    """
    cfg = model.config
    if not 0 <= ratio < 1:
        raise InfeasibleError(f"width ratio must lie in [0, 1), got {ratio}")
    keep_heads = cfg.n_heads - int(round(ratio * cfg.n_heads))
    keep_ffn = cfg.d_ffn - int(round(ratio * cfg.d_ffn))
    if keep_heads < 1 or keep_ffn < 1:
        raise InfeasibleError(f"ratio {ratio} leaves {keep_heads} heads and {keep_ffn} channels")
    if any(b.mha is None or b.ffn is None for b in model.blocks):
        raise ContractError("width baseline needs complete blocks")
    m = model.copy()
    if m.adapters:
        raise ContractError("merge LoRA adapters before width pruning")
    hd = cfg.head_dim
    for b in m.blocks:
        heads = kept_heads(b, cfg.n_heads, hd, keep_heads)
        rows = np.concatenate([np.arange(h * hd, (h + 1) * hd) for h in heads])
        for key in ("wq", "wk", "wv"):
            w = getattr(b.mha, key)
            w.data = np.ascontiguousarray(w.data[rows])
        b.mha.wo.data = np.ascontiguousarray(b.mha.wo.data[:, rows])
        ch = kept_channels(b, keep_ffn)
        b.ffn.w_gate.data = np.ascontiguousarray(b.ffn.w_gate.data[ch])
        b.ffn.w_up.data = np.ascontiguousarray(b.ffn.w_up.data[ch])
        b.ffn.w_down.data = np.ascontiguousarray(b.ffn.w_down.data[:, ch])
    for _, p in m.named_parameters():
        p.grad = None
    m.config = ModelConfig(**{**cfg.to_dict(), "n_heads": keep_heads, "d_ffn": keep_ffn,
                              "head_dim": hd})
    return m


def head_norms(block, n_heads, head_dim):
    sq = sum(np.square(getattr(block.mha, k).data.astype(np.float64)) for k in ("wq", "wk", "wv"))
    return np.sqrt(sq.reshape(n_heads, head_dim, -1).sum(axis=(1, 2)))


def channel_norms(block):
    sq = (np.square(block.ffn.w_gate.data.astype(np.float64))
          + np.square(block.ffn.w_up.data.astype(np.float64)))
    return np.sqrt(sq.sum(axis=1))


def kept_heads(block, n_heads, head_dim, keep):
    norms = head_norms(block, n_heads, head_dim)
    return np.sort(np.argsort(-norms, kind="stable")[:keep])


def kept_channels(block, keep):
    return np.sort(np.argsort(-channel_norms(block), kind="stable")[:keep])


def ablation_ppls(model, calib, cfg=None):
    """Convenience: calibration PPL for each single-block removal, by original index."""
    cfg = cfg or ScoreConfig(criterion="ppl")
    return {s.unit.block_index: s.value for s in score_ppl(model, calib, cfg)}


__all__ = [
    "PruneSpec", "PruneReport", "blocks_to_remove", "plan", "select_units", "select_by_budget",
    "prune", "prune_one_shot", "prune_iterative", "prune_width_baseline",
]
