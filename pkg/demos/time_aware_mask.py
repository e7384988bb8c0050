"""Which frames can each answer token see?

A question arrives at 5 s and the answer is decoded at one token per
second.  Frames come in at 1 FPS.  Each row of the mask is one token; a
token may look at every frame stamped at or before its own time.
"""

import numpy as np

from streamlmm import InstructionTriplet, Tokenizer, assign_timestamps, build_stream_mask, verify_temporal_integrity

tri = InstructionTriplet(5.0, 10.0, "what is happening now ?", "The person is cooking right now.")
tok = Tokenizer.from_texts([tri.instruction, tri.answer])
seq = assign_timestamps(tri, decode_rate=1.0, tokenizer=tok)

frame_times = np.arange(0.0, 11.0)
mask = build_stream_mask(seq.times, frame_times)

print("frame times:", " ".join(f"{t:>3.0f}" for t in frame_times))
for token, role, row in zip(seq.tokens, seq.roles, mask.allowed):
    word = tok.itos[token.token]
    cells = " ".join("  #" if a else "  ." for a in row)
    print(f"{word:>10s} {role[:3]} t={token.time:4.1f} {cells}")

print("integrity check passes:", verify_temporal_integrity(mask, seq.times, frame_times).passed)

# a FIFO queue of 4 frames keeps only the newest four visible frames per row
capped = build_stream_mask(seq.times, frame_times, capacity=4)
print("frames visible to the last token with a 4-frame queue:", frame_times[capped.allowed[-1]].tolist())
