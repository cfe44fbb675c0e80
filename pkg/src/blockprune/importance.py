"""Importance scores for Transformer blocks or their MHA / FFN modules.

Criteria:

* ``mag`` -- sum of |W| over the unit's projection matrices.
* ``taylor`` -- sum of |dL/dW * W|, first-order estimate of the loss change
  when each weight is zeroed; L is the mean next-token loss over the whole
  calibration set.
* ``ppl`` -- calibration perplexity of the model with the unit bypassed.
  Lower means less important.
* ``mag_plus`` / ``taylor_plus`` -- as above, but the first
  ``protect_prefix`` and last ``protect_suffix`` blocks are never removed.

Per-matrix scores are combined over the unit's matrices with the configured
aggregation (sum by default). Norm gains and embeddings never count.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .bench import calibration_batches, calibration_ppl
from .errors import ConfigError, NumericError
from .model import FFN_WEIGHTS, MHA_WEIGHTS

CRITERIA = ("mag", "mag_plus", "taylor", "taylor_plus", "ppl")
AGGREGATIONS = ("sum", "mean", "product", "max")
GRANULARITIES = ("block", "module")
KINDS = ("block", "mha", "ffn")


@dataclass(frozen=True, order=True)
class UnitRef:
    kind: str
    block_index: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown unit kind {self.kind!r}", key="kind")

    @property
    def key(self):
        return (self.kind, self.block_index)

    def weight_names(self):
        return {"block": MHA_WEIGHTS + FFN_WEIGHTS, "mha": MHA_WEIGHTS, "ffn": FFN_WEIGHTS}[self.kind]


@dataclass
class UnitScore:
    unit: UnitRef
    criterion: str
    value: float
    protected: bool = False

    def to_dict(self):
        return {"kind": self.unit.kind, "block_index": self.unit.block_index,
                "criterion": self.criterion, "value": self.value, "protected": self.protected}

    @classmethod
    def from_dict(cls, d):
        return cls(UnitRef(d["kind"], d["block_index"]), d["criterion"], d["value"],
                   d.get("protected", False))


@dataclass
class ScoreConfig:
    criterion: str = "ppl"
    granularity: str = "block"
    aggregation: str = "sum"
    protect_prefix: int = 4
    protect_suffix: int = 2
    batch_size: int = 16
    workers: int = 1

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.criterion!r}", key="criterion")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"unknown granularity {self.granularity!r}", key="granularity")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}", key="aggregation")
        if self.protect_prefix < 0 or self.protect_suffix < 0:
            raise ConfigError("protection sizes must be >= 0", key="protect_prefix")

    @property
    def base_criterion(self):
        return self.criterion.removesuffix("_plus")

    @property
    def is_plus(self):
        return self.criterion.endswith("_plus")

    def to_dict(self):
        return asdict(self)


def candidate_units(model, granularity="block"):
    units = []
    for b in model.blocks:
        if granularity == "block":
            units.append(UnitRef("block", b.index))
        else:
            if b.mha is not None:
                units.append(UnitRef("mha", b.index))
            if b.ffn is not None:
                units.append(UnitRef("ffn", b.index))
    return units


def unit_weights(model, unit):
    """Live projection matrices of a unit, in fixed order."""
    w = model.block_by_index(unit.block_index).weights()
    return [w[k] for k in unit.weight_names() if k in w]


def aggregate(values, how):
    v = np.asarray(values, dtype=np.float64)
    if how == "sum":
        return float(math.fsum(v))
    if how == "mean":
        return float(math.fsum(v) / len(v))
    if how == "product":
        return float(np.prod(v))
    if how == "max":
        return float(v.max())
    raise ConfigError(f"unknown aggregation {how!r}", key="aggregation")


def _per_unit(model, cfg, matrix_score):
    units = candidate_units(model, cfg.granularity)
    if not units:
        raise ConfigError("model has no candidate units to score", key="granularity")
    out = []
    for u in units:
        vals = [matrix_score(w) for w in unit_weights(model, u)]
        out.append(UnitScore(u, cfg.criterion, aggregate(vals, cfg.aggregation)))
    return out


def score_magnitude(model, cfg):
    def mag(w):
        # per-output-neuron sums first, then summed over neurons
        return math.fsum(np.abs(w.data.astype(np.float64)).sum(axis=1))

    return apply_protection(_per_unit(model, cfg, mag), cfg, model.original_n_blocks)


def taylor_gradients(model, calib, batch_size=16):
    """Gradients of the mean calibration loss w.r.t. every projection matrix.

    Returns {id(weight tensor): grad}. Only projection matrices are put on
    the tape; requires_grad flags and existing grads are restored afterwards.
    """
    inputs, targets = calibration_batches(calib, model.config.vocab_size)
    n_total = targets.size
    params = model.parameters()
    saved = [(p, p.requires_grad, p.grad) for p in params]
    proj = [w for b in model.blocks for w in b.weights().values()]
    try:
        for p in params:
            p.requires_grad = False
            p.grad = None
        for w in proj:
            w.requires_grad = True
        for i in range(0, len(inputs), batch_size):
            x, y = inputs[i: i + batch_size], targets[i: i + batch_size]
            loss = model.loss(x, y)
            if not math.isfinite(loss.item()):
                bad = _first_bad_sequence(model, x, y)
                raise NumericError(f"non-finite calibration loss at sequence {i + bad}")
            T.backward(T.scale(loss, y.size / n_total))
        grads = {id(w): (w.grad if w.grad is not None else np.zeros_like(w.data)) for w in proj}
    finally:
        for p, rg, g in saved:
            p.requires_grad = rg
            p.grad = g
    return grads


def _first_bad_sequence(model, x, y):
    with T.no_grad():
        for j in range(len(x)):
            if not math.isfinite(model.loss(x[j: j + 1], y[j: j + 1]).item()):
                return j
    return 0


def score_taylor(model, calib, cfg):
    grads = taylor_gradients(model, calib, cfg.batch_size)

    def taylor(w):
        g = grads[id(w)].astype(np.float64)
        return math.fsum(np.abs(g * w.data.astype(np.float64)).sum(axis=1))

    return apply_protection(_per_unit(model, cfg, taylor), cfg, model.original_n_blocks)


def score_ppl(model, calib, cfg, units=None):
    """Calibration PPL with each candidate unit masked out (weights untouched)."""
    units = candidate_units(model, cfg.granularity) if units is None else list(units)
    if not units:
        raise ConfigError("no candidate units for PPL scoring", key="granularity")

    def one(u):
        return calibration_ppl(model, calib, skip={u.key}, batch_size=cfg.batch_size)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            vals = list(ex.map(one, units))
    else:
        vals = [one(u) for u in units]
    return [UnitScore(u, "ppl", v) for u, v in zip(units, vals)]


def apply_protection(scores, cfg, n_blocks):
    """Flag the first/last original blocks as protected for plus-variant criteria.

    Other criteria (including ppl) are returned unflagged.
    """
    if not cfg.is_plus:
        return scores
    if cfg.protect_prefix + cfg.protect_suffix >= n_blocks:
        raise ConfigError(
            f"protecting {cfg.protect_prefix} + {cfg.protect_suffix} blocks leaves none of "
            f"{n_blocks} removable", key="protect_prefix")
    lo, hi = cfg.protect_prefix, n_blocks - cfg.protect_suffix
    for s in scores:
        s.protected = not lo <= s.unit.block_index < hi
    return scores


def score_units(model, calib, cfg):
    """Dispatch on ``cfg.criterion``."""
    base = cfg.base_criterion
    if base == "mag":
        return score_magnitude(model, cfg)
    if calib is None:
        raise ConfigError(f"criterion {cfg.criterion!r} needs a calibration set", key="criterion")
    if base == "taylor":
        return score_taylor(model, calib, cfg)
    return score_ppl(model, calib, cfg)


def rank(scores):
    """Scores from least to most important; ties put the higher block index first."""
    return sorted(scores, key=lambda s: (s.value, -s.unit.block_index, s.unit.kind))


def scores_to_json(scores, path=None):
    rows = [s.to_dict() for s in scores]
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=2)
    return rows


def scores_from_json(path):
    with open(path, encoding="utf-8") as f:
        return [UnitScore.from_dict(d) for d in json.load(f)]
