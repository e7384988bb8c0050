"""Rotary positions for a video stream and a text stream side by side.

In an interleaved layout every frame pushes later text tokens further
along a single index axis, so two consecutive words straddling a frame end
up hundreds of positions apart.  Here each token takes its position from
its own timestamp: text at (t, t, t), patches at (t, row, col).
"""

import numpy as np

from streamlmm.rope3d import RopeLayout, apply_rope3d, interleaved_positions, parallel_positions, text_position, visual_position

text_times = [0.5, 1.5, 2.5, 3.5]
frame_times = [1.0, 2.0, 3.0]

idx, frame_start = interleaved_positions(text_times, frame_times, tokens_per_frame=256)
print("interleaved text indices:", idx.tolist())
print("gaps between consecutive words:", np.diff(idx).tolist())

text_pos, frame_pos = parallel_positions(text_times, frame_times, grid=(16, 16))
print("parallel text t-coordinates:", text_pos[:, 0].tolist())
print("first patches of the frame at 2 s:", frame_pos[1][:3].tolist())

layout = RopeLayout.for_head_dim(32)
print("head_dim 32 split into t/h/w widths:", (layout.d_t, layout.d_h, layout.d_w))

# a word and a patch at the same instant rotate their temporal slice identically
v = np.random.default_rng(0).normal(size=32)
a = apply_rope3d(v, np.array(text_position(2.0)), layout)
b = apply_rope3d(v, np.array(visual_position(2.0, 1.0, row=5, col=9)), layout)
print("temporal slices identical:", np.array_equal(a[: layout.d_t], b[: layout.d_t]))
print("norm kept:", np.isclose(np.linalg.norm(a), np.linalg.norm(v)))
