"""
How many blocks survive a parameter budget
==========================================

Block removal is coarse: each LLaMA-7B block holds about 202M weights, so
a parameter target maps to a whole number of blocks.  Nothing is
allocated here, only the arithmetic runs.
"""
from blockprune import ModelConfig, PruneSpec, plan
from blockprune.model import block_params, non_block_params

llama7b = ModelConfig(vocab_size=32000, d_model=4096, n_heads=32, d_ffn=11008,
                      n_blocks=32, max_seq_len=2048)
llama13b = ModelConfig(vocab_size=32000, d_model=5120, n_heads=40, d_ffn=13824,
                       n_blocks=40, max_seq_len=2048)

for name, cfg in (("7B", llama7b), ("13B", llama13b)):
    print(f"{name}: {block_params(cfg) / 1e6:.1f}M per block, "
          f"{non_block_params(cfg) / 1e6:.1f}M outside the blocks")

for target in (5.5e9, 4.9e9, 4.5e9, 3.7e9, 2.7e9, 1.5e9):
    p = plan(llama7b, PruneSpec(target_params=int(target)))
    print(f"7B  target {target / 1e9:.1f}B: keep {p['surviving_blocks']:2d} blocks "
          f"-> {p['params_after'] / 1e9:.2f}B")

# a ratio is the fraction removed
p = plan(llama7b, PruneSpec(target_ratio=0.35))
print(f"7B  minus 35%: keep {p['surviving_blocks']} blocks")

for target in (10.5e9, 9.5e9, 8.3e9):
    p = plan(llama13b, PruneSpec(target_params=int(target)))
    print(f"13B target {target / 1e9:.1f}B: keep {p['surviving_blocks']} blocks "
          f"-> {p['params_after'] / 1e9:.2f}B")
