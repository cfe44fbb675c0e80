"""
Score, prune and retrain a toy model
====================================

A 6-block byte-level model is trained on the bundled corpus.  Its blocks
are scored with every criterion, the two least important ones are
removed, and the damage is repaired with LoRA and with full fine-tuning.
Runs in about a minute on a laptop CPU.
"""
import numpy as np

from blockprune import (ModelConfig, PruneSpec, ScoreConfig, TrainConfig, eval_ppl,
                        load_sample_corpus, prune_one_shot, pretrain, retrain,
                        sample_calibration, score_units)

corpus = load_sample_corpus()
print(corpus.name, len(corpus.train), "train bytes,", len(corpus.val), "val bytes")

cfg = ModelConfig(vocab_size=257, d_model=64, n_heads=4, d_ffn=192, n_blocks=6, max_seq_len=256)
model, curve = pretrain(cfg, corpus, TrainConfig(lr=3e-3, max_steps=400, batch=16, seq_len=64,
                                                 eval_every=100, eval_windows=32))
for row in curve.rows:
    if row["val_ppl"] is not None:
        print(f"step {row['step']:4d}  val ppl {row['val_ppl']:.3f}")


def val(m):
    return eval_ppl(m, corpus.val, 64, max_windows=128)


# %%
# Importance profile.  Low means "safe to drop".
calib = sample_calibration(corpus, S=10, L=128, seed=0)
print("\nblock  " + "  ".join(f"{i:>8d}" for i in model.block_indices))
for crit in ("mag", "taylor", "ppl"):
    scores = score_units(model, calib, ScoreConfig(criterion=crit))
    print(f"{crit:6s} " + "  ".join(f"{s.value:8.3g}" for s in scores))

# %%
# Remove two blocks chosen by the perplexity criterion
pruned, report = prune_one_shot(model, calib, PruneSpec(remove_count=2, criterion="ppl"))
print("\nremoved", [u.block_index for u in report.removed],
      f"params {report.params_before} -> {report.params_after}")

base_ppl, pruned_ppl = val(model), val(pruned)
print(f"val ppl: base {base_ppl:.3f}  pruned {pruned_ppl:.3f}")

# %%
# Retraining: same budget and learning rate for both modes
tc = dict(lr=1e-3, max_steps=100, batch=16, seq_len=64, eval_every=0)
ft, _ = retrain(pruned.copy(), "full_ft", corpus, TrainConfig(mode="full_ft", **tc))
lo, _ = retrain(pruned.copy(), "lora", corpus, TrainConfig(mode="lora", **tc))
print(f"after 100 steps: full_ft {val(ft):.3f}  lora {val(lo):.3f}")
print("lora trains", sum(int(np.prod(a.a.shape) + np.prod(a.b.shape))
                         for a in lo.adapters.values()), "weights")
