"""Loss construction over supervised turns, the epoch loop, and seed averaging.

Only labeled turns ever contribute to the loss; under weak supervision that is
one example per dialogue (final turn) or one per completed service. Batches
group examples of similar history length and decode every supervised slot of
the batch in one pass. Training runs Adam with global-norm gradient clipping,
evaluates dev joint goal accuracy each epoch, keeps the best parameters, and
stops early when dev stops improving.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import evaluation
from .autodiff import Tape, Tensor
from .corpus import Corpus, NONE_VALUE, build_history, build_vocab, derive_supervision
from .model import DstModel, ModelConfig, decode_batch, embedding_table, encode_batch, \
    pad_batch, slot_queries

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (11, 12, 13, 14, 15)  # five-seed averaging


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; training aborted with diagnostics."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.001
    teacher_forcing: float = 0.5
    dropout: float = 0.2
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    regime: str = "full"
    patience: int = 6  # dev evaluations without improvement before stopping
    clip_norm: float = 10.0
    min_count: int = 1
    holdout_fraction: float = 0.1  # dev split carved from train when none given

    def validate(self):
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ValueError("teacher forcing ratio must be in [0, 1]")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch_size")


@dataclass
class TrainExample:
    dialogue_id: str
    turn: int
    history: list[str]
    targets: dict[str, list[str]]  # supervised slot -> gold tokens ("none" filled)


@dataclass
class RunMetrics:
    seed: int
    n_examples: int
    epoch_losses: list[float] = field(default_factory=list)
    epoch_times: list[float] = field(default_factory=list)
    dev_history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_joint_ga: float = 0.0
    total_time: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RunRngs:
    """Independent generators per randomized component, derived from one seed."""

    init: np.random.Generator
    dropout: np.random.Generator
    teacher: np.random.Generator
    shuffle: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunRngs":
        children = np.random.SeedSequence(seed).spawn(4)
        return cls(*(np.random.default_rng(c) for c in children))


def build_examples(corpus: Corpus, supervision_sets) -> list[TrainExample]:
    """One example per labeled (dialogue, turn) entry, targets "none"-filled.

    Services completing at the same turn share that turn's single entry.
    """
    by_id = {d.id: d for d in corpus.dialogues}
    examples = []
    for sup in supervision_sets:
        d = by_id[sup.dialogue_id]
        for j in sorted(sup.labeled):
            gold = d.state_at(j)
            targets = {sid: list(gold.get(sid, [NONE_VALUE]))
                       for sid in sup.labeled[j]}
            examples.append(TrainExample(dialogue_id=d.id, turn=j,
                                         history=build_history(d, j),
                                         targets=targets))
    return examples


def _batch_arrays(batch: list[TrainExample], model: DstModel):
    """Flatten a batch into padded history rows plus per-(example, slot) rows."""
    vocab = model.vocab
    hist_rows = [vocab.encode(ex.history) if ex.history else [vocab.unk_id]
                 for ex in batch]
    ids, mask, lengths = pad_batch(hist_rows, vocab.pad_id)
    row_to_example = []
    slot_idx = []
    target_rows = []
    weights = []
    sid_index = {sid: i for i, sid in enumerate(model.catalog.sids)}
    for b, ex in enumerate(batch):
        n_slots = len(ex.targets)
        for sid, gold in sorted(ex.targets.items()):
            row_to_example.append(b)
            slot_idx.append(sid_index[sid])
            enc = vocab.encode(gold)
            if vocab.unk_id in enc:
                log.debug("gold value %r for %s contains OOV tokens", gold, sid)
            target_rows.append(enc + [vocab.eos_id])
            weights.append(1.0 / (n_slots * len(batch)))
    L = max(len(r) for r in target_rows)
    targets = np.full((len(target_rows), L), vocab.pad_id, dtype=np.intp)
    step_mask = np.zeros((len(target_rows), L), dtype=model.config.np_dtype)
    for r, row in enumerate(target_rows):
        targets[r, : len(row)] = row
        step_mask[r, : len(row)] = 1.0 / len(row)  # mean over decode steps
    return (ids, mask, lengths, np.asarray(row_to_example, dtype=np.intp),
            np.asarray(slot_idx, dtype=np.intp), targets, step_mask,
            np.asarray(weights, dtype=model.config.np_dtype))


def loss(batch, model: DstModel, rngs: RunRngs | None = None,
         teacher_forcing: float = 0.5, training: bool = True) -> Tensor:
    """Negative log-likelihood of gold value tokens (EOS included) under the
    gate mixture, averaged over decode steps, then slots, then the batch."""
    if isinstance(batch, TrainExample):
        batch = [batch]
    drop_rng = rngs.dropout if (rngs and training) else None
    teacher_rng = rngs.teacher if rngs else None
    (ids, mask, lengths, row_to_example, slot_idx, targets, step_mask,
     weights) = _batch_arrays(batch, model)
    table = embedding_table(model)
    flat = ad.gather_rows(table, ids.ravel())
    flat = ad.dropout(flat, model.config.dropout, training, drop_rng)
    e3 = ad.reshape(flat, (ids.shape[0], ids.shape[1], model.config.d_emb))
    enc = encode_batch(e3, model, ids, mask, lengths, training=training, rng=drop_rng)
    all_q = slot_queries(model, table, training=training, rng=drop_rng)
    q_rows = ad.gather_rows(all_q, slot_idx)
    result = decode_batch(model, enc, q_rows, row_to_example, targets.shape[1],
                          targets=targets, teacher_ratio=teacher_forcing,
                          teacher_rng=teacher_rng, training=training,
                          rng=drop_rng, table=table)
    total = None
    for step, dist in enumerate(result.step_dists):
        picked = ad.take_per_row(dist, targets[:, step])
        nll = ad.neg(ad.log(picked))
        contrib = ad.tsum(ad.mul(nll, Tensor(step_mask[:, step] * weights)))
        total = contrib if total is None else ad.add(total, contrib)
    return total


# ---------------------------------------------------------------------------
# the loop


def _split_dev(corpus: Corpus, fraction: float, seed: int):
    n_dev = max(1, int(round(len(corpus.dialogues) * fraction)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE7]))
    idx = rng.permutation(len(corpus.dialogues))
    dev_idx = set(int(i) for i in idx[:n_dev])
    train = [d for i, d in enumerate(corpus.dialogues) if i not in dev_idx]
    dev = [d for i, d in enumerate(corpus.dialogues) if i in dev_idx]
    return (Corpus(train, corpus.catalog, corpus.seen_services),
            Corpus(dev, corpus.catalog, corpus.seen_services))


def _length_batches(examples, batch_size):
    order = sorted(range(len(examples)), key=lambda i: len(examples[i].history))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _dev_loss(dev_examples, model, batch_size) -> float:
    total = 0.0
    batches = _length_batches(dev_examples, batch_size)
    for batch_idx in batches:
        batch = [dev_examples[i] for i in batch_idx]
        val = loss(batch, model, rngs=None, teacher_forcing=1.0, training=False)
        total += val.item() * len(batch)
    return total / max(len(dev_examples), 1)


def train_single(train_corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 seed: int, dev_corpus: Corpus | None = None,
                 progress: bool = True) -> tuple[DstModel, RunMetrics]:
    """Train one model from one seed; returns it with best-dev parameters."""
    train_cfg.validate()
    rngs = RunRngs.from_seed(seed)
    if dev_corpus is None:
        train_corpus, dev_corpus = _split_dev(train_corpus,
                                              train_cfg.holdout_fraction, seed)
    cfg = ModelConfig(**{**asdict(model_cfg), "dropout": train_cfg.dropout})
    vocab = build_vocab(train_corpus, min_count=train_cfg.min_count)
    model = DstModel(cfg, vocab, train_corpus.catalog)
    model.init_params(rngs.init)

    sups = [derive_supervision(d, train_cfg.regime, train_corpus.catalog)
            for d in train_corpus.dialogues]
    examples = build_examples(train_corpus, sups)
    dev_sups = [derive_supervision(d, "full", train_corpus.catalog)
                for d in dev_corpus.dialogues]
    dev_examples = build_examples(dev_corpus, dev_sups)

    metrics = RunMetrics(seed=seed, n_examples=len(examples))
    state = ad.AdamState(model.parameters(), lr=train_cfg.lr)
    batches = _length_batches(examples, train_cfg.batch_size)
    best_params = {k: t.data.copy() for k, t in model.params.items()}
    best_joint = -1.0
    best_epoch = 0
    t_start = time.perf_counter()

    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rngs.shuffle.permutation(len(batches))
        epoch_loss = 0.0
        n_seen = 0
        for bi in order:
            batch = [examples[i] for i in batches[bi]]
            with Tape() as tape:
                batch_loss = loss(batch, model, rngs=rngs,
                                  teacher_forcing=train_cfg.teacher_forcing)
            value = batch_loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"seed {seed} epoch {epoch}: non-finite loss {value} on a "
                    f"batch of {len(batch)} examples (first: "
                    f"{batch[0].dialogue_id} turn {batch[0].turn})")
            grads = tape.backward(batch_loss)
            ad.clip_gradients(grads, train_cfg.clip_norm)
            try:
                ad.adam_step(model.parameters(), grads, state)
            except ad.PoisonedUpdateError as exc:
                raise TrainingDiverged(f"seed {seed} epoch {epoch}: {exc}") from exc
            epoch_loss += value * len(batch)
            n_seen += len(batch)
        metrics.epoch_losses.append(epoch_loss / max(n_seen, 1))
        metrics.epoch_times.append(time.perf_counter() - t0)

        report = evaluation.evaluate(model, dev_corpus)
        dev = {
            "epoch": epoch,
            "joint_ga": report.joint_goal_accuracy,
            "slot_accuracy": report.slot_accuracy,
            "loss": _dev_loss(dev_examples, model, train_cfg.batch_size),
        }
        metrics.dev_history.append(dev)
        if report.joint_goal_accuracy > best_joint:
            best_joint = report.joint_goal_accuracy
            best_epoch = epoch
            best_params = {k: t.data.copy() for k, t in model.params.items()}
        if progress:
            print(f"[seed {seed}] epoch {epoch}: loss {metrics.epoch_losses[-1]:.4f} "
                  f"dev joint GA {report.joint_goal_accuracy:.4f} "
                  f"({metrics.epoch_times[-1]:.1f}s)", file=sys.stderr)
        if epoch - best_epoch >= train_cfg.patience:
            break

    for k, t in model.params.items():
        t.data[:] = best_params[k]
    metrics.best_epoch = best_epoch
    metrics.best_dev_joint_ga = max(best_joint, 0.0)
    metrics.total_time = time.perf_counter() - t_start
    return model, metrics


@dataclass
class TrainResult:
    models: list[DstModel]
    metrics: list[RunMetrics]


def train(train_corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
          dev_corpus: Corpus | None = None, progress: bool = True) -> TrainResult:
    """Run the full loop once per seed."""
    models, metrics = [], []
    for seed in train_cfg.seeds:
        m, r = train_single(train_corpus, model_cfg, train_cfg, seed,
                            dev_corpus=dev_corpus, progress=progress)
        models.append(m)
        metrics.append(r)
    return TrainResult(models=models, metrics=metrics)


def seed_average(reports: list[dict]) -> dict:
    """Elementwise mean and sample standard deviation over per-seed metric dicts.

    Nested dicts are averaged recursively; None values stay None when all
    seeds agree they are absent.
    """
    if not reports:
        raise ValueError("need at least one report")
    keys = set(reports[0])
    for r in reports[1:]:
        if set(r) != keys:
            raise ValueError(f"mismatched report keys: {sorted(keys)} vs {sorted(r)}")
    mean: dict = {}
    stdev: dict = {}
    for k in sorted(keys):
        values = [r[k] for r in reports]
        if isinstance(values[0], dict):
            sub = seed_average(values)
            mean[k] = sub["mean"]
            stdev[k] = sub["stdev"]
        elif all(v is None for v in values):
            mean[k] = None
            stdev[k] = None
        else:
            arr = np.asarray([0.0 if v is None else float(v) for v in values])
            mean[k] = float(arr.mean())
            stdev[k] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": mean, "stdev": stdev, "n": len(reports)}
