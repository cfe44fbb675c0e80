"""Command-line entry point: pretrain, score, prune, retrain, eval, bench, gen, pipeline.

Settings resolve as built-in defaults < ``--config`` JSON file < flags. The
resolved config is echoed into every JSON report, and a report can itself
be passed back as ``--config`` to repeat a stage.

Errors print one JSON line to stderr, ``{"error": <code>, "message": ...,
"key": ...}``, and exit with the status attached to the error class.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

from .bench import BenchSpec, bench_generate, calibration_ppl, compare_pruning_latency, eval_ppl
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .corpus import Corpus, detokenize, load_sample_corpus, sample_calibration, tokenize
from .errors import BlockPruneError, ConfigError
from .importance import ScoreConfig, score_units, scores_to_json
from .model import ModelConfig, greedy_generate
from .pruner import PruneSpec, plan, prune_iterative, prune_one_shot, prune_width_baseline
from .trainer import LoraConfig, TrainConfig, merge_lora, pretrain, retrain

log = logging.getLogger("blockprune")

DEFAULTS = {
    "model": {"vocab_size": 257, "d_model": 64, "n_heads": 4, "d_ffn": 192, "n_blocks": 8,
              "max_seq_len": 256, "rope_base": 10000.0, "rms_eps": 1e-5, "head_dim": None},
    "score": {"criterion": "ppl", "granularity": "block", "aggregation": "sum",
              "protect_prefix": 4, "protect_suffix": 2, "calib_samples": 10, "calib_len": 128},
    "prune": {"remove_count": None, "target_params": None, "target_ratio": None,
              "iterative": False, "dry_run": False, "width_ratio": None},
    "train": {"lr": 1e-4, "beta1": 0.9, "beta2": 0.95, "weight_decay": 0.1,
              "grad_clip_norm": 1.0, "batch": 16, "seq_len": 128, "max_steps": 5000,
              "eval_every": 250, "eval_windows": 64},
    "retrain": {"mode": "lora", "retrain_steps": 1000, "lora_rank": 8, "lora_alpha": None,
                "lora_steps": None, "merge": False},
    "bench": {"bench_batch": 1, "input_len": 12, "output_len": 128, "warmups": 10, "runs": 20},
    "paths": {"corpus": None, "checkpoint": None, "out": None, "out_checkpoint": None,
              "emit_profile": None, "csv": None, "workdir": "runs", "model_config": None,
              "prompt": "In the morning, "},
    "seed": 0,
    "threads": None,
}

_TYPES = {"rope_base": float, "rms_eps": float, "lr": float, "beta1": float, "beta2": float,
          "weight_decay": float, "grad_clip_norm": float, "target_ratio": float,
          "width_ratio": float}
_BOOL = {"iterative", "dry_run", "merge"}
_STR = {"criterion", "granularity", "aggregation", "mode", "corpus", "checkpoint", "out",
        "out_checkpoint", "emit_profile", "csv", "workdir", "model_config", "prompt"}


def _field_index():
    idx = {}
    for section, fields in DEFAULTS.items():
        if isinstance(fields, dict):
            for k in fields:
                idx[k] = section
        else:
            idx[section] = None
    return idx


FIELDS = _field_index()


class RunConfig:
    """Merged settings for every stage, as a dict of sections."""

    def __init__(self, data=None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            self.update(data)

    def update(self, doc):
        for key, val in doc.items():
            if key in DEFAULTS and isinstance(DEFAULTS[key], dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"config section {key!r} must be an object", key=key)
                for k, v in val.items():
                    if FIELDS.get(k) != key:
                        raise ConfigError(f"unknown config key {key}.{k}", key=f"{key}.{k}")
                    self.data[key][k] = v
            elif FIELDS.get(key, "") is None:
                self.data[key] = val
            else:
                raise ConfigError(f"unknown config key {key!r}", key=key)

    def set(self, key, val):
        section = FIELDS[key]
        if section is None:
            self.data[key] = val
        else:
            self.data[section][key] = val

    def __getitem__(self, key):
        section = FIELDS[key]
        return self.data[key] if section is None else self.data[section][key]

    def to_dict(self):
        return copy.deepcopy(self.data)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", key="config") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}", key="config") from None
        if "config" in doc and "stage" in doc:  # a report: reuse its echoed config
            doc = doc["config"]
        return cls(doc)

    # -- typed views --------------------------------------------------------

    def model_config(self):
        if self["model_config"]:
            return ModelConfig.from_json(_existing(self["model_config"], "model_config"))
        return ModelConfig.from_dict(self.data["model"])

    def score_config(self):
        s = self.data["score"]
        return ScoreConfig(criterion=s["criterion"], granularity=s["granularity"],
                           aggregation=s["aggregation"], protect_prefix=s["protect_prefix"],
                           protect_suffix=s["protect_suffix"])

    def prune_spec(self):
        p = self.data["prune"]
        sc = self.score_config()
        return PruneSpec(remove_count=p["remove_count"], target_params=p["target_params"],
                         target_ratio=p["target_ratio"], granularity=sc.granularity,
                         criterion=sc.criterion, score_config=sc, iterative=p["iterative"])

    def train_config(self, mode="pretrain", max_steps=None):
        t = self.data["train"]
        return TrainConfig(mode=mode, lr=t["lr"], betas=(t["beta1"], t["beta2"]),
                           weight_decay=t["weight_decay"], grad_clip_norm=t["grad_clip_norm"],
                           batch=t["batch"], seq_len=t["seq_len"],
                           max_steps=t["max_steps"] if max_steps is None else max_steps,
                           seed=self["seed"], eval_every=t["eval_every"],
                           eval_windows=t["eval_windows"])

    def lora_config(self):
        r = self.data["retrain"]
        return LoraConfig(rank=r["lora_rank"], alpha=r["lora_alpha"])

    def bench_spec(self):
        b = self.data["bench"]
        return BenchSpec(batch=b["bench_batch"], input_len=b["input_len"],
                         output_len=b["output_len"], warmups=b["warmups"], runs=b["runs"],
                         seed=self["seed"])


def _existing(path, key):
    if not path or not os.path.exists(path):
        raise ConfigError(f"file for {key!r} not found: {path}", key=key)
    return path


def _corpus(cfg):
    if cfg["corpus"]:
        return Corpus.from_file(_existing(cfg["corpus"], "corpus"))
    return load_sample_corpus()


def _load_model(cfg):
    return load_checkpoint(_existing(cfg["checkpoint"], "checkpoint"))


def _out(cfg, default_name):
    if cfg["out"]:
        return Path(cfg["out"])
    d = Path(cfg["workdir"])
    d.mkdir(parents=True, exist_ok=True)
    return d / default_name


def _out_ckpt(cfg, default_name):
    if cfg["out_checkpoint"]:
        return Path(cfg["out_checkpoint"])
    d = Path(cfg["workdir"])
    d.mkdir(parents=True, exist_ok=True)
    return d / default_name


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    return str(path)


def _report(stage, cfg, **body):
    return {"stage": stage, "config": cfg.to_dict(), "threads": cfg["threads"], **body}


# --------------------------------------------------------------------------
# stages


def run_pretrain(cfg):
    corpus = _corpus(cfg)
    mcfg = cfg.model_config()
    tcfg = cfg.train_config("pretrain")
    ckpt = _out_ckpt(cfg, "pretrained.bpr")
    model, curve = pretrain(mcfg, corpus, tcfg, checkpoint_path=ckpt)
    save_checkpoint(model, ckpt)
    csv_path = cfg["csv"] or str(Path(ckpt).with_suffix(".curve.csv"))
    curve.to_csv(csv_path)
    rep = _report("pretrain", cfg, checkpoint=str(ckpt), checkpoint_sha256=file_sha256(ckpt),
                  params=model.param_count(), n_blocks=len(model.blocks),
                  final_train_loss=curve.losses[-1] if curve.losses else None,
                  final_val_ppl=curve.final_val_ppl, curve_csv=csv_path)
    rep["report_path"] = _write(_out(cfg, "pretrain.json"), rep)
    return rep


def _calib(cfg, corpus):
    s = cfg.data["score"]
    return sample_calibration(corpus, s["calib_samples"], s["calib_len"], seed=cfg["seed"])


def run_score(cfg):
    model = _load_model(cfg)
    sc = cfg.score_config()
    calib = None if sc.base_criterion == "mag" else _calib(cfg, _corpus(cfg))
    scores = score_units(model, calib, sc)
    rows = scores_to_json(scores)
    if cfg["emit_profile"]:
        scores_to_json(scores, cfg["emit_profile"])
    rep = _report("score", cfg, scores=rows, calibration=None if calib is None else
                  {"S": calib.S, "L": calib.L, "seed": calib.seed, "starts": calib.starts})
    rep["report_path"] = _write(_out(cfg, "score.json"), rep)
    return rep


def run_prune(cfg):
    if cfg["width_ratio"] is not None and not cfg["dry_run"]:
        model = _load_model(cfg)
        pruned = prune_width_baseline(model, cfg["width_ratio"])
        ckpt = _out_ckpt(cfg, "width_pruned.bpr")
        save_checkpoint(pruned, ckpt)
        rep = _report("prune", cfg, dry_run=False, width_baseline=True,
                      params_before=model.param_count(), params_after=pruned.param_count(),
                      checkpoint=str(ckpt), checkpoint_sha256=file_sha256(ckpt))
        rep["report_path"] = _write(_out(cfg, "prune.json"), rep)
        return rep
    spec = cfg.prune_spec()
    if cfg["dry_run"]:
        if cfg["checkpoint"]:
            header, _, _ = read_header(_existing(cfg["checkpoint"], "checkpoint"))
            mcfg = ModelConfig.from_dict(header["config"])
        else:
            mcfg = cfg.model_config()
        rep = _report("prune", cfg, dry_run=True, plan=plan(mcfg, spec))
        rep["report_path"] = _write(_out(cfg, "prune_plan.json"), rep)
        return rep
    model = _load_model(cfg)
    calib = None if spec.score_config.base_criterion == "mag" else _calib(cfg, _corpus(cfg))
    if spec.iterative:
        pruned, report = prune_iterative(model, calib, spec)
    else:
        pruned, report = prune_one_shot(model, calib, spec)
    ckpt = _out_ckpt(cfg, "pruned.bpr")
    save_checkpoint(pruned, ckpt)
    rep = _report("prune", cfg, dry_run=False, report=report.to_dict(), checkpoint=str(ckpt),
                  checkpoint_sha256=file_sha256(ckpt), surviving_blocks=len(pruned.blocks))
    rep["report_path"] = _write(_out(cfg, "prune.json"), rep)
    return rep


def run_retrain(cfg):
    model = _load_model(cfg)
    corpus = _corpus(cfg)
    r = cfg.data["retrain"]
    tcfg = cfg.train_config("full_ft" if r["mode"] == "full_ft" else "lora", r["retrain_steps"])
    before = eval_ppl(model, corpus.val, tcfg.seq_len, max_windows=tcfg.eval_windows)
    ckpt = _out_ckpt(cfg, "retrained.bpr")
    model, curve = retrain(model, r["mode"], corpus, tcfg, cfg.lora_config(), r["lora_steps"],
                           checkpoint_path=ckpt)
    if r["merge"] and model.adapters:
        merge_lora(model)
    save_checkpoint(model, ckpt)
    csv_path = cfg["csv"] or str(Path(ckpt).with_suffix(".curve.csv"))
    curve.to_csv(csv_path)
    rep = _report("retrain", cfg, mode=r["mode"], val_ppl_before=before,
                  final_val_ppl=curve.final_val_ppl, checkpoint=str(ckpt),
                  checkpoint_sha256=file_sha256(ckpt), curve_csv=csv_path,
                  budget={"steps": tcfg.max_steps, "batch": tcfg.batch, "seq_len": tcfg.seq_len})
    rep["report_path"] = _write(_out(cfg, "retrain.json"), rep)
    return rep


def run_eval(cfg):
    model = _load_model(cfg)
    corpus = _corpus(cfg)
    t = cfg.data["train"]
    val = eval_ppl(model, corpus.val, t["seq_len"], max_windows=t["eval_windows"])
    cal = calibration_ppl(model, _calib(cfg, corpus))
    rep = _report("eval", cfg, val_ppl=val, calibration_ppl=cal, params=model.param_count(),
                  n_blocks=len(model.blocks), block_indices=model.block_indices)
    rep["report_path"] = _write(_out(cfg, "eval.json"), rep)
    return rep


def run_bench(cfg):
    model = _load_model(cfg)
    br = bench_generate(model, cfg.bench_spec(), threads=cfg["threads"])
    if cfg["csv"]:
        br.latencies_to_csv(cfg["csv"])
    rep = _report("bench", cfg, **br.to_dict())
    rep["report_path"] = _write(_out(cfg, "bench.json"), rep)
    return rep


def run_gen(cfg):
    model = _load_model(cfg)
    prompt = tokenize(cfg["prompt"])
    if prompt.size == 0:
        raise ConfigError("prompt must not be empty", key="prompt")
    n = min(cfg.data["bench"]["output_len"], model.config.max_seq_len - prompt.size)
    out = greedy_generate(model, prompt[None, :], n)
    text = detokenize(out[0]).decode("utf-8", errors="replace")
    rep = _report("gen", cfg, prompt=cfg["prompt"], completion=text)
    if cfg["out"]:
        _write(cfg["out"], rep)
    return rep


def run_pipeline(cfg):
    """pretrain -> score -> prune -> retrain -> eval -> bench in one work directory."""
    work = Path(cfg["workdir"])
    work.mkdir(parents=True, exist_ok=True)
    corpus = _corpus(cfg)
    stages = {}
    mcfg = cfg.model_config()
    model, curve = pretrain(mcfg, corpus, cfg.train_config("pretrain"))
    base_ckpt = work / "pretrained.bpr"
    save_checkpoint(model, base_ckpt)
    curve.to_csv(work / "pretrain_curve.csv")
    stages["pretrain"] = {"checkpoint": str(base_ckpt), "checkpoint_sha256": file_sha256(base_ckpt),
                          "final_val_ppl": curve.final_val_ppl, "params": model.param_count()}

    spec = cfg.prune_spec()
    calib = _calib(cfg, corpus)
    scores = score_units(model, calib if spec.score_config.base_criterion != "mag" else None,
                         spec.score_config)
    scores_to_json(scores, work / "scores.json")
    stages["score"] = {"scores": scores_to_json(scores)}

    if spec.iterative:
        pruned, report = prune_iterative(model, calib, spec)
    else:
        pruned, report = prune_one_shot(model, calib, spec)
    pruned_ckpt = work / "pruned.bpr"
    save_checkpoint(pruned, pruned_ckpt)
    stages["prune"] = {"report": report.to_dict(), "checkpoint": str(pruned_ckpt),
                       "checkpoint_sha256": file_sha256(pruned_ckpt)}

    r = cfg.data["retrain"]
    tcfg = cfg.train_config("full_ft" if r["mode"] == "full_ft" else "lora", r["retrain_steps"])
    seq = tcfg.seq_len
    ppl_pruned = eval_ppl(pruned, corpus.val, seq, max_windows=tcfg.eval_windows)
    retrained, rcurve = retrain(pruned.copy(), r["mode"], corpus, tcfg, cfg.lora_config(),
                                r["lora_steps"])
    if retrained.adapters:
        merge_lora(retrained)
    re_ckpt = work / "retrained.bpr"
    save_checkpoint(retrained, re_ckpt)
    rcurve.to_csv(work / "retrain_curve.csv")
    stages["retrain"] = {"mode": r["mode"], "final_val_ppl": rcurve.final_val_ppl,
                         "checkpoint": str(re_ckpt), "checkpoint_sha256": file_sha256(re_ckpt)}

    stages["eval"] = {
        "val_ppl": {"base": eval_ppl(model, corpus.val, seq, max_windows=tcfg.eval_windows),
                    "pruned": ppl_pruned,
                    "retrained": eval_ppl(retrained, corpus.val, seq,
                                          max_windows=tcfg.eval_windows)},
        "calibration_ppl": {"base": calibration_ppl(model, calib),
                            "pruned": calibration_ppl(pruned, calib)},
    }
    width = None
    if cfg["width_ratio"] is not None:
        width = prune_width_baseline(model, cfg["width_ratio"])
    stages["bench"] = compare_pruning_latency(model, retrained, width, cfg.bench_spec(),
                                              threads=cfg["threads"])
    rep = _report("pipeline", cfg, stages=stages)
    rep["report_path"] = _write(work / "pipeline.json", rep)
    return rep


COMMANDS = {
    "pretrain": run_pretrain, "score": run_score, "prune": run_prune, "retrain": run_retrain,
    "eval": run_eval, "bench": run_bench, "gen": run_gen, "pipeline": run_pipeline,
}


# --------------------------------------------------------------------------
# argument parsing


def _flag_type(key):
    if key in _BOOL:
        return None
    if key in _STR:
        return str
    if key in _TYPES:
        return _TYPES[key]
    return _int_or_none


def _int_or_none(s):
    if s.lower() in ("none", "null"):
        return None
    try:
        v = float(s) if ("e" in s.lower() or "." in s) else int(s)
        if v != int(v):
            raise ValueError
        return int(v)
    except (ValueError, OverflowError):
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None


class _Parser(argparse.ArgumentParser):
    """Turns usage errors into ConfigError so they get the JSON error line."""

    def error(self, message):
        m = re.search(r"(--?[\w-]+)", message)
        raise ConfigError(f"usage: {message}", key=m.group(1) if m else None)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a previous report)")
    common.add_argument("-v", "--verbose", action="store_true")
    for key in FIELDS:
        flag = "--" + key.replace("_", "-")
        t = _flag_type(key)
        if t is None:
            common.add_argument(flag, dest=key, action="store_const", const=True, default=None)
        else:
            common.add_argument(flag, dest=key, type=t, default=None)
    p = _Parser(prog="blockprune", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=COMMANDS[name].__doc__)
    return p


def resolve_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key in FIELDS:
        val = getattr(args, key, None)
        if val is not None:
            cfg.set(key, val)
    if cfg["threads"] is None and os.environ.get("BLOCKPRUNE_THREADS"):
        try:
            cfg.set("threads", int(os.environ["BLOCKPRUNE_THREADS"]))
        except ValueError:
            raise ConfigError("BLOCKPRUNE_THREADS must be an integer", key="threads") from None
    return cfg


def run(argv=None):
    """Parse ``argv``, run the stage, return its report dict."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args)
    threads = cfg["threads"]
    if threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=int(threads)):
            return COMMANDS[args.command](cfg)
    return COMMANDS[args.command](cfg)


def main(argv=None):
    try:
        rep = run(argv)
    except BlockPruneError as e:
        err = {"error": e.code, "class": type(e).__name__, "message": str(e)}
        if getattr(e, "key", None):
            err["key"] = e.key
        print(json.dumps(err), file=sys.stderr)
        return e.exit_status
    summary = {k: v for k, v in rep.items() if k not in ("config", "scores", "stages", "latencies")}
    if rep.get("stage") == "gen":
        print(rep["completion"])
    else:
        print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
