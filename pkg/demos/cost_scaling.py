"""How the cost of one context refresh grows with the number of frames.

Cross-attention runs only the text through the decoder and lets it read
visual keys and values; the concatenation baseline pushes every visual
token through every layer.  FLOPs are counted on each matrix product and
compared with closed-form totals.
"""

from streamlmm import ModelConfig, StreamLMM
from streamlmm.bench import cross_flops, run_bench, summarize

model = StreamLMM(ModelConfig(dtype="float64"))
rows = run_bench(model, frame_counts=(0, 8, 16, 32, 64), text_len=32, repeats=3)
print(f"{'frames':>6s} {'cross GFLOP':>12s} {'concat GFLOP':>13s} {'cross ms':>9s} {'concat ms':>10s}")
by = {(r.arch, r.frames): r for r in rows}
for f in (0, 8, 16, 32, 64):
    c, k = by["cross", f], by["concat", f]
    print(f"{f:6d} {c.flops_counted / 1e9:12.3f} {k.flops_counted / 1e9:13.3f} {1e3 * c.wall_median_s:9.2f} {1e3 * k.wall_median_s:10.2f}")

s = summarize(rows)
print("closed form == counted:", all(r.flops_formula == r.flops_counted for r in rows))
print("cross  log-log exponent %.2f" % s["cross"]["flop_fit"]["loglog_exponent"])
print("concat log-log exponent %.2f" % s["concat"]["flop_fit"]["loglog_exponent"])
print("visual share of cross cost at 64 frames: %.2f" % (1 - cross_flops(model.cfg, 32, 0) / cross_flops(model.cfg, 32, 64)))
