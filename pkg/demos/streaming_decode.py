"""Answering while the video keeps playing.

Train a small model on the synthetic symbol videos for a short while,
then ask "which symbol is visible right now?" at t=4 s while a 5 FPS
schedule keeps arriving.  Streaming decode re-reads the queue before every
token; the fixed-context baseline keeps only what existed at question time.
Takes about half a minute.
"""

from streamlmm import Clock, ModelConfig, StreamLMM, decode_offline_oracle, decode_streaming, freshness_report
from streamlmm.densedata import SYMBOL_NAMES, synth_generate, synth_tokenizer
from streamlmm.tokens import TimedToken
from streamlmm.train import TrainConfig, items_from_corpus, train
from streamlmm.verify import A5_MODEL

tok = synth_tokenizer(8)
corpus = synth_generate(seed=0, n_videos=400)
model = StreamLMM(ModelConfig(vocab=len(tok), n_symbols=8, **A5_MODEL))
train(model, items_from_corpus(corpus, tok), TrainConfig(steps=150))

video = synth_generate(seed=123, n_videos=1).videos[0]
schedule = [(video.symbol_at(k / 5), k / 5) for k in range(int(video.duration * 5))]
t_q = 4.0
question = [TimedToken(i, t_q) for i in tok.encode("which symbol is visible right now ?")]

truth = [SYMBOL_NAMES[video.symbol_at(t_q + k)] for k in range(6)]
live = decode_streaming(schedule, question, model, Clock(decode_rate=1.0), max_tokens=6)
fixed = decode_streaming(schedule, question, model, Clock(decode_rate=1.0), max_tokens=6, fixed_context=True)
oracle = decode_offline_oracle(schedule, question, model, Clock(decode_rate=1.0), max_tokens=6)

print("on screen :", " ".join(truth))
print("streaming :", " ".join(tok.itos[t.token] for t in live.tokens))
print("fixed     :", " ".join(tok.itos[t.token] for t in fixed.tokens))
print("oracle agrees with streaming:", [t.token for t in oracle.tokens] == [t.token for t in live.tokens])

times = [t for _, t in schedule]
for name, res in (("streaming", live), ("fixed", fixed)):
    rep = freshness_report(res.tokens, times, res.attended)
    print(f"{name:9s} newest-frame fraction {rep['newest_fraction']:.2f}, lags {rep['lags']}")
