"""Perplexity evaluation and the decode latency/throughput protocol.

Latency ``T`` is wall-clock time for one full generate call: cache
allocation, prompt prefill and ``L`` greedy tokens for each of ``M``
sequences. Throughput is ``M * L / T``. Warm-up runs are discarded and the
mean is taken over exactly ``runs`` timed calls.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .corpus import BOS
from .errors import CapacityError, ConfigError, DataError
from .model import greedy_generate, param_count


# --------------------------------------------------------------------------
# perplexity


def nll_sum(model, inputs, targets, skip=(), batch_size=16):
    """Total next-token NLL (float64) and token count over [N, T] arrays."""
    total = 0.0
    count = 0
    with T.no_grad():
        for i in range(0, len(inputs), batch_size):
            x, y = inputs[i: i + batch_size], targets[i: i + batch_size]
            logits = model.forward(x, skip=skip).data.astype(np.float64)
            m = logits.max(axis=-1, keepdims=True)
            lse = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
            picked = np.take_along_axis(logits, y[..., None], axis=-1)[..., 0]
            total += float((lse - picked).sum())
            count += y.size
    return total, count


def eval_ppl(model, tokens, seq_len, max_windows=None, batch_size=16):
    """exp(mean next-token NLL) over non-overlapping windows of a token stream."""
    tokens = np.asarray(tokens)
    if tokens.size < seq_len + 1:
        raise DataError(f"eval stream has {tokens.size} tokens, needs at least {seq_len + 1}")
    starts = np.arange(0, tokens.size - seq_len, seq_len)
    if max_windows is not None:
        starts = starts[:max_windows]
    win = tokens[starts[:, None] + np.arange(seq_len + 1)]
    total, count = nll_sum(model, win[:, :-1], win[:, 1:], batch_size=batch_size)
    return math.exp(total / count)


def calibration_batches(calib, vocab_size=None):
    """Inputs and targets for scoring on a calibration set.

    With a vocabulary that contains BOS, every sequence is BOS-prefixed and
    all S*L tokens are predicted. Smaller vocabularies have no BOS id, so
    the first token is context only and S*(L-1) tokens are predicted.
    """
    seqs = calib.sequences
    if vocab_size is not None and vocab_size <= BOS:
        if seqs.shape[1] < 2:
            raise DataError("calibration sequences need L >= 2 without a BOS token")
        return seqs[:, :-1], seqs[:, 1:]
    inputs = np.concatenate([np.full((len(seqs), 1), BOS, dtype=seqs.dtype), seqs[:, :-1]], axis=1)
    return inputs, seqs


def calibration_ppl(model, calib, skip=(), batch_size=16):
    inputs, targets = calibration_batches(calib, model.config.vocab_size)
    total, count = nll_sum(model, inputs, targets, skip=skip, batch_size=batch_size)
    return math.exp(total / count)


# --------------------------------------------------------------------------
# latency / throughput


@dataclass
class BenchSpec:
    batch: int = 1
    input_len: int = 12
    output_len: int = 128
    warmups: int = 10
    runs: int = 20
    greedy: bool = True
    seed: int = 0

    def __post_init__(self):
        for k in ("batch", "input_len", "output_len", "warmups", "runs"):
            if getattr(self, k) < 1:
                raise ConfigError(f"bench {k} must be >= 1", key=k)
        if not self.greedy:
            raise ConfigError("only greedy decoding is benchmarked", key="greedy")

    def check(self, model):
        need = self.input_len + self.output_len
        if need > model.config.max_seq_len:
            raise CapacityError(f"input_len + output_len = {need} exceeds max_seq_len "
                                f"{model.config.max_seq_len}")


@dataclass
class BenchReport:
    spec: dict
    mean_latency_s: float
    latency_std: float
    throughput: float
    latencies: list
    n_blocks: int
    params: int
    threads: int | None = None
    tokens_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self, path):
        write_json(path, self.to_dict())

    def latencies_to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["run", "latency_s"])
            for i, t in enumerate(self.latencies):
                w.writerow([i, repr(t)])


def make_prompts(vocab_size, spec):
    rng = np.random.default_rng(spec.seed)
    hi = min(vocab_size, 256)
    return rng.integers(0, hi, size=(spec.batch, spec.input_len))


def bench_generate(model, spec, threads=None):
    """Time ``spec.runs`` greedy generations after ``spec.warmups`` discarded ones."""
    import hashlib

    spec.check(model)
    prompts = make_prompts(model.config.vocab_size, spec)
    out = None
    for _ in range(spec.warmups):
        greedy_generate(model, prompts, spec.output_len)
    lat = []
    for _ in range(spec.runs):
        t0 = time.perf_counter()
        out = greedy_generate(model, prompts, spec.output_len)
        lat.append(time.perf_counter() - t0)
    mean = float(np.mean(lat))
    return BenchReport(
        spec=asdict(spec),
        mean_latency_s=mean,
        latency_std=float(np.std(lat)),
        throughput=spec.batch * spec.output_len / mean,
        latencies=lat,
        n_blocks=len(model.blocks),
        params=param_count(model),
        threads=threads if threads is not None else _thread_count(),
        tokens_hash=hashlib.sha256(out.tobytes()).hexdigest(),
    )


def _thread_count():
    try:
        from threadpoolctl import threadpool_info

        info = threadpool_info()
        return max((i.get("num_threads", 1) for i in info), default=1)
    except Exception:  # noqa: BLE001 - informational only
        return os.cpu_count()


def compare_pruning_latency(base, depth_pruned, width_pruned, spec, threads=None):
    """Bench three models side by side and report ratios against ``base``.

    Width-vs-depth speed differences depend on the memory system; the
    report only states measured numbers, it does not judge them.
    """
    models = {"base": base, "depth": depth_pruned, "width": width_pruned}
    reports = {}
    for name, m in models.items():
        if m is None:
            continue
        try:
            reports[name] = bench_generate(m, spec, threads=threads).to_dict()
        except CapacityError as e:
            reports[name] = {"error": e.code, "message": str(e)}
    ratios = {}
    b = reports.get("base", {})
    for name, r in reports.items():
        if "error" in r or "error" in b:
            continue
        ratios[name] = {
            "latency_ratio": r["mean_latency_s"] / b["mean_latency_s"],
            "throughput_ratio": r["throughput"] / b["throughput"],
            "param_ratio": r["params"] / b["params"],
        }
    return {"kind": "latency_comparison", "spec": asdict(spec), "reports": reports, "ratios": ratios}


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def read_report(path):
    """Load a report written by this package; bench reports come back as BenchReport."""
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    if d.get("kind") == "latency_comparison":
        d["reports"] = {k: (v if "error" in v else BenchReport.from_dict(v))
                        for k, v in d["reports"].items()}
        return d
    if "mean_latency_s" in d:
        return BenchReport.from_dict(d)
    return d
