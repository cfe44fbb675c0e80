"""Depth pruning for small decoder-only Transformers.

Train a toy LLaMA-style model, score its blocks (magnitude, Taylor,
ablation perplexity), remove the least important ones in one shot, retrain
with LoRA or full fine-tuning, and measure perplexity and decode speed.
"""
from .bench import (
    BenchReport,
    BenchSpec,
    bench_generate,
    calibration_ppl,
    compare_pruning_latency,
    eval_ppl,
    read_report,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (
    BOS,
    VOCAB_SIZE,
    CalibrationSet,
    Corpus,
    batch_iter,
    detokenize,
    load_sample_corpus,
    sample_calibration,
    tokenize,
)
from .importance import (
    ScoreConfig,
    UnitRef,
    UnitScore,
    apply_protection,
    score_magnitude,
    score_ppl,
    score_taylor,
    score_units,
)
from .model import KvCache, Model, ModelConfig, decode_step, forward, greedy_generate, param_count
from .pruner import (
    PruneReport,
    PruneSpec,
    blocks_to_remove,
    plan,
    prune,
    prune_iterative,
    prune_one_shot,
    prune_width_baseline,
    select_units,
)
from .trainer import (
    AdamW,
    LoraConfig,
    TrainConfig,
    attach_lora,
    clip_grad_norm,
    merge_lora,
    pretrain,
    retrain,
)

__version__ = "0.1.0"
