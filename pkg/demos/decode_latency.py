"""
Depth vs width pruning at batch size one
========================================

Greedy decoding of one sequence is dominated by per-layer overhead and
weight reads, not arithmetic.  Dropping whole blocks removes layers;
shrinking heads and channels keeps all of them.  Both models below have
roughly the same parameter count.  Untrained weights are fine for timing.
"""
from blockprune import BenchSpec, Model, ModelConfig, UnitRef, compare_pruning_latency, prune
from blockprune.pruner import prune_width_baseline

cfg = ModelConfig(vocab_size=257, d_model=128, n_heads=4, d_ffn=384, n_blocks=12, max_seq_len=256)
base = Model.init(cfg, seed=0)

depth, _ = prune(base, [UnitRef("block", i) for i in range(6, 12)])
width = prune_width_baseline(base, 0.5)
for name, m in (("base", base), ("depth", depth), ("width", width)):
    print(f"{name:6s} {len(m.blocks):2d} blocks  {m.param_count():8d} params")

spec = BenchSpec(batch=1, input_len=12, output_len=128, warmups=3, runs=10)
cmp = compare_pruning_latency(base, depth, width, spec)
for name, r in cmp["reports"].items():
    print(f"{name:6s} {r['mean_latency_s'] * 1e3:7.1f} ms  {r['throughput']:7.0f} tok/s  "
          f"latency x{cmp['ratios'][name]['latency_ratio']:.2f}")

# %%
# Larger batches amortise the per-layer cost over more tokens
spec16 = BenchSpec(batch=16, input_len=12, output_len=64, warmups=2, runs=5)
cmp = compare_pruning_latency(base, depth, width, spec16)
print("\nbatch 16:", {k: round(v["latency_ratio"], 2) for k, v in cmp["ratios"].items()})
