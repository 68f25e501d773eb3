"""Train a small tracker with full supervision and score it at every turn.

Run:  python3 demos/03_train_and_evaluate.py     (about two minutes on a laptop core)
"""

import json

import numpy as np

from agg_dst import evaluation, synth, training
from agg_dst.model import ModelConfig, predict_state

schema = synth.default_schema()
train_c = synth.generate_corpus(schema, synth.GenConfig(n_dialogues=120, seed=1))
dev_c = synth.generate_corpus(schema, synth.GenConfig(n_dialogues=30, seed=2))
test_c = synth.generate_corpus(schema, synth.GenConfig(n_dialogues=30, seed=3))

model_cfg = ModelConfig(d_word=32, d_char=8, hidden=64, variant="agg", dtype="f32")
# lr is raised above the 0.001 default: desk corpora give ~40 optimizer steps
# per epoch, two orders of magnitude fewer than the setting that default is
# tuned for
train_cfg = training.TrainConfig(epochs=25, batch_size=16, lr=0.005,
                                 seeds=(11,), regime="full", patience=5)

model, metrics = training.train_single(train_c, model_cfg, train_cfg,
                                       seed=11, dev_corpus=dev_c)
print(f"\ntrained {len(metrics.epoch_losses)} epochs "
      f"(best dev joint GA {metrics.best_dev_joint_ga:.3f} "
      f"at epoch {metrics.best_epoch}); "
      f"mean epoch time {np.mean(metrics.epoch_times):.1f}s")

report = evaluation.evaluate(model, test_c)
print("\ntest-set report:")
print(json.dumps(report.to_json(), indent=2))

d = test_c.dialogues[0]
print(f"\nper-turn predictions for {d.id}:")
for j in range(1, d.n_turns + 1):
    pred = predict_state(d, j, model)
    gold = {k: " ".join(v) for k, v in d.state_at(j).items()}
    mine = {k: " ".join(v) for k, v in pred.assignments.items()}
    marker = "ok " if gold == mine else "MISS"
    print(f"  turn {j} [{marker}] pred={mine}")
