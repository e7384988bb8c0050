"""Can the masks stop a model from cheating with future frames?

Two copies of the same model are trained on the same videos.  In the
first corpus every answer word names the symbol on screen at that word's
timestamp; in the second it names the symbol one hold period later, which
no visible frame reveals.  The first should be learned almost perfectly,
the second should stay at chance.  Takes a couple of minutes.
"""

from streamlmm.verify import causality_probe

rep = causality_probe(n_videos=2000, steps=400)
print(f"chance level      {rep['chance']:.3f}")
for probe in ("now", "future"):
    r = rep[probe]
    print(f"{probe:6s} probe: accuracy {r['accuracy']:.3f}, loss {r['first_loss']:.2f} -> {r['last_loss']:.3f}, {r['train_seconds']:.0f}s")
