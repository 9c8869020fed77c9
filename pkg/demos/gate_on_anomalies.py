"""Train a small model on generated data and look at what the risk gate does.

Prints the mean gate value at positions with strong view signals against
the rest, for a few held-out anomalous sessions.

Run: python demos/gate_on_anomalies.py   (about a minute on one core)
"""

import numpy as np

from mvgate.datagen import GenSpec, gen_dataset, with_mix
from mvgate.features import featurize_tokens
from mvgate.logs import build_vocab, tokenize_session
from mvgate.model import ModelConfig, encoder_forward
from mvgate.training import TrainConfig, make_batches, metrics, score, split, train

spec = with_mix(GenSpec(n_users=20, seed=3), ["resurfacing", "burst"])
sessions, _, kinds = gen_dataset(spec)
tokens = [tokenize_session(s) for s in sessions]
vocab = build_vocab(tokens)
records = [featurize_tokens(t, vocab, user=s.user_id, label=s.label, meta={"kind": k})
           for t, s, k in zip(tokens, sessions, kinds)]
train_set, test_set = split(records, 0.8, seed=0)
train_set, val_set = split(train_set, 0.8, seed=1)

cfg = ModelConfig(vocab_size=len(vocab), d_model=16, mlp_hidden=64)
result = train(train_set, val_set, cfg, TrainConfig(lr=5e-3, batch_size=16, epochs=20))
y = np.array([r.label for r in test_set])
print("held-out", metrics(score(test_set, result.checkpoint), y))

params = result.checkpoint.param_store()
anomalous = [r for r in test_set if r.label == 1][:6]
for rec, batch in zip(anomalous, make_batches(anomalous, cfg.max_len, batch_size=1)):
    trace = {}
    encoder_forward(batch, params, cfg, trace=trace)
    n = min(len(rec), cfg.max_len - 1)  # long sessions keep their last events
    g = trace["gate"][0, 1:n + 1]
    hot = ((np.asarray(rec.s) == 3) | (np.abs(rec.f) >= 1))[-n:]
    print(f"{rec.meta['kind']:12s} gate at signal positions {g[hot].mean():.3f}  elsewhere {g[~hot].mean():.3f}")
