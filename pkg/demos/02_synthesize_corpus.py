"""Generate a synthetic multi-domain corpus and look inside it.

Run:  python3 demos/02_synthesize_corpus.py
Writes demo-output/corpus.jsonl in the working directory.
"""

from pathlib import Path

from agg_dst import corpus as cp
from agg_dst import synth

schema = synth.default_schema()
print("domains:", [d.name for d in schema.domains])
for dom in schema.domains:
    print(f"  {dom.name}: slots", [(s.name, len(s.values)) for s in dom.slots])

cfg = synth.GenConfig(n_dialogues=40, chitchat_prob=0.25, revision_prob=0.2, seed=7)
corpus = synth.generate_corpus(schema, cfg)

d = corpus.dialogues[0]
print(f"\n=== {d.id} (domains {d.domains}, services done at {d.service_done}) ===")
for turn, state in zip(d.turns, d.gold_states):
    rendered = ", ".join(f"{k}={' '.join(v)}" for k, v in state.items())
    print(f"  user : {' '.join(turn.user)}")
    print(f"  agent: {' '.join(turn.agent)}")
    print(f"  state: {{{rendered}}}")

print("\nhistory at the final turn (what the tracker actually reads):")
print(" ", " ".join(cp.build_history(d, d.n_turns)))

for regime in ("full", "weak-final", "weak-service"):
    sup = cp.derive_supervision(d, regime, corpus.catalog)
    print(f"{regime:13s} labeled turns: "
          f"{ {j: len(s) for j, s in sorted(sup.labeled.items())} }")

out = Path("demo-output")
out.mkdir(exist_ok=True)
cp.save_corpus(corpus, out / "corpus.jsonl")
vocab = cp.build_vocab(corpus)
print(f"\nwrote {len(corpus.dialogues)} dialogues to {out/'corpus.jsonl'} "
      f"(vocab {len(vocab)} tokens, catalog {len(corpus.catalog)} slots)")
