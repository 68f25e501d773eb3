"""Turn-level inference over whole dialogues and the tracking metrics.

Evaluation always scores every turn of every dialogue, whatever supervision
regime produced the model. States are compared as slot -> value-string maps
over the full catalog, with absent slots meaning "none"; values are matched
by exact string equality after lowercasing and whitespace collapse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Dialogue, NONE_VALUE, build_history
from .model import DstModel, embedding_table, embed_tokens, encode, init_decoder_batch, \
    predict_values_batch, slot_queries
from . import autodiff as ad

EVAL_CHUNK = 256  # (turn, slot) rows per inference batch


class UnsupportedVariantError(ValueError):
    """The operation needs the slot-attention variant."""


def normalize_value(tokens) -> str:
    if isinstance(tokens, str):
        return " ".join(tokens.lower().split())
    return " ".join(" ".join(tokens).lower().split())


def _norm_state(state: dict) -> dict[str, str]:
    out = {}
    for sid, toks in state.items():
        val = normalize_value(toks)
        if val and val != NONE_VALUE:
            out[sid] = val
    return out


def _check_aligned(preds, golds):
    if len(preds) != len(golds):
        raise ValueError(f"misaligned turn counts: {len(preds)} predictions "
                         f"vs {len(golds)} gold states")


def _active_services(gold: dict[str, str]) -> set[str]:
    return {sid.partition("-")[0] for sid in gold}


def slot_accuracy(preds, golds, sids) -> float:
    """Fraction of (turn, slot) pairs whose value matches exactly."""
    _check_aligned(preds, golds)
    total = correct = 0
    for p, g in zip(preds, golds):
        p, g = _norm_state(p), _norm_state(g)
        for sid in sids:
            total += 1
            if p.get(sid, NONE_VALUE) == g.get(sid, NONE_VALUE):
                correct += 1
    return correct / total if total else 0.0


def joint_goal_accuracy(preds, golds, sids, active_only: bool = False) -> float:
    """Fraction of turns whose whole predicted state matches gold.

    With ``active_only`` the compared slot set at each turn shrinks to slots
    of services that have at least one non-none gold value there (the dynamic
    slot-set convention); turns with no active service count as correct.
    """
    _check_aligned(preds, golds)
    if not preds:
        return 0.0
    correct = 0
    for p, g in zip(preds, golds):
        p, g = _norm_state(p), _norm_state(g)
        compare = sids
        if active_only:
            active = _active_services(g)
            compare = [s for s in sids if s.partition("-")[0] in active]
        if all(p.get(s, NONE_VALUE) == g.get(s, NONE_VALUE) for s in compare):
            correct += 1
    return correct / len(preds)


def average_goal_accuracy(preds, golds, sids) -> float | None:
    """Accuracy over (turn, slot) pairs whose gold value is non-none.

    Returns None (metric absent) when no such pair exists.
    """
    _check_aligned(preds, golds)
    total = correct = 0
    sid_set = set(sids)
    for p, g in zip(preds, golds):
        p, g = _norm_state(p), _norm_state(g)
        for sid, val in g.items():
            if sid not in sid_set:
                continue
            total += 1
            if p.get(sid, NONE_VALUE) == val:
                correct += 1
    if total == 0:
        return None
    return correct / total


@dataclass
class EvalReport:
    slot_accuracy: float
    joint_goal_accuracy: float
    average_goal_accuracy: float | None
    per_domain_joint_ga: dict[str, float]
    n_turns: int
    n_slots: int
    seen: dict[str, float | None] | None = None
    unseen: dict[str, float | None] | None = None

    def to_json(self) -> dict:
        out = {
            "slot_accuracy": self.slot_accuracy,
            "joint_goal_accuracy": self.joint_goal_accuracy,
            "average_goal_accuracy": self.average_goal_accuracy,
            "per_domain_joint_ga": self.per_domain_joint_ga,
            "n_turns": self.n_turns,
            "n_slots": self.n_slots,
        }
        if self.seen is not None:
            out["seen_services"] = self.seen
        if self.unseen is not None:
            out["unseen_services"] = self.unseen
        return out


@dataclass
class AttentionDump:
    dialogue_id: str
    turn: int
    slot: str
    tokens: list[str]
    weights: list[float]

    def to_json(self) -> dict:
        return {"dialogue_id": self.dialogue_id, "turn": self.turn,
                "slot": self.slot, "tokens": self.tokens, "weights": self.weights}


def predict_corpus(model: DstModel, dialogues) -> list[tuple[Dialogue, int, dict, dict]]:
    """Predict every turn of every dialogue; one (d, j, pred, gold) per turn.

    Turns are batched by similar history length to keep padding waste down;
    records come back in corpus order.
    """
    jobs = []
    for di, d in enumerate(dialogues):
        for j in range(1, d.n_turns + 1):
            jobs.append((len(build_history(d, j)), di, j))
    order = sorted(range(len(jobs)), key=lambda i: jobs[i][0])
    n_slots = max(len(model.catalog), 1)
    per_chunk = max(1, EVAL_CHUNK // n_slots)
    results: dict[tuple[int, int], dict] = {}
    for start in range(0, len(order), per_chunk):
        chunk = [jobs[i] for i in order[start:start + per_chunk]]
        histories = [build_history(dialogues[di], j) for _, di, j in chunk]
        states = predict_values_batch(model, histories)
        for (_, di, j), state in zip(chunk, states):
            results[(di, j)] = state
    out = []
    for di, d in enumerate(dialogues):
        for j in range(1, d.n_turns + 1):
            out.append((d, j, results[(di, j)], d.state_at(j)))
    return out


def _subset_metrics(preds, golds, sids_subset) -> dict[str, float | None]:
    """Joint/average GA over one service subset, active-service turns only."""
    joint_total = joint_correct = 0
    for p, g in zip(preds, golds):
        p, g = _norm_state(p), _norm_state(g)
        active = _active_services(g)
        compare = [s for s in sids_subset if s.partition("-")[0] in active]
        if not compare:
            continue
        joint_total += 1
        if all(p.get(s, NONE_VALUE) == g.get(s, NONE_VALUE) for s in compare):
            joint_correct += 1
    return {
        "joint_goal_accuracy": joint_correct / joint_total if joint_total else None,
        "average_goal_accuracy": average_goal_accuracy(preds, golds, sids_subset),
    }


def evaluate(model: DstModel, corpus: Corpus, domain: str | None = None,
             active_only: bool = False) -> EvalReport:
    """Score the model at every turn of (optionally domain-filtered) dialogues."""
    for sid in corpus.catalog.sids:
        if sid not in model.catalog:
            raise ValueError(f"corpus slot {sid!r} not in the model catalog")
    dialogues = list(corpus.dialogues)
    if domain is not None:
        dialogues = [d for d in dialogues if domain in d.domains]
    records = predict_corpus(model, dialogues)
    preds = [r[2] for r in records]
    golds = [r[3] for r in records]
    sids = model.catalog.sids

    per_domain = {}
    domains = sorted({dom for d in dialogues for dom in d.domains})
    for dom in domains:
        dom_records = [(p, g) for (d, j, p, g) in records if dom in d.domains]
        per_domain[dom] = joint_goal_accuracy([p for p, _ in dom_records],
                                              [g for _, g in dom_records],
                                              sids, active_only=active_only)

    seen = unseen = None
    if corpus.seen_services is not None:
        seen_set = set(corpus.seen_services)
        seen_sids = [s for s in sids if s.partition("-")[0] in seen_set]
        unseen_sids = [s for s in sids if s.partition("-")[0] not in seen_set]
        seen = _subset_metrics(preds, golds, seen_sids)
        unseen = _subset_metrics(preds, golds, unseen_sids)

    return EvalReport(
        slot_accuracy=slot_accuracy(preds, golds, sids),
        joint_goal_accuracy=joint_goal_accuracy(preds, golds, sids,
                                                active_only=active_only),
        average_goal_accuracy=average_goal_accuracy(preds, golds, sids),
        per_domain_joint_ga=per_domain,
        n_turns=len(records),
        n_slots=len(sids),
        seen=seen,
        unseen=unseen,
    )


def dump_attention(model: DstModel, d: Dialogue, j: int,
                   sids: list[str] | None = None) -> list[AttentionDump]:
    """Initial-attention weights over the turn-j history for the given slots."""
    if model.config.variant != "agg":
        raise UnsupportedVariantError(
            "attention dumps need the slot-attention variant; this model "
            f"was built with variant={model.config.variant!r}")
    sids = list(sids) if sids is not None else model.catalog.sids
    history = build_history(d, j)
    ids = model.vocab.encode(history) if history else [model.vocab.unk_id]
    table = embedding_table(model)
    e = embed_tokens(ids, model, table=table)
    enc = encode(e, model, token_ids=ids)
    all_q = slot_queries(model, table)
    slot_idx = np.asarray([model.catalog.sids.index(s) for s in sids], dtype=np.intp)
    q_rows = ad.gather_rows(all_q, slot_idx)
    _, alpha = init_decoder_batch(enc, q_rows, model,
                                  np.zeros(len(sids), dtype=np.intp))
    dumps = []
    for k, sid in enumerate(sids):
        dumps.append(AttentionDump(
            dialogue_id=d.id, turn=j, slot=sid,
            tokens=list(history) if history else ["<unk>"],
            weights=[float(w) for w in alpha.data[k]],
        ))
    return dumps


def write_attention_jsonl(dumps, fh) -> None:
    for dump in dumps:
        fh.write(json.dumps(dump.to_json(), ensure_ascii=False) + "\n")


def write_attention_tsv(dumps, fh) -> None:
    """Plot-ready table: one row per token with one weight column per slot."""
    if not dumps:
        return
    fh.write("token\t" + "\t".join(d.slot for d in dumps) + "\n")
    for t, tok in enumerate(dumps[0].tokens):
        row = [tok] + [f"{d.weights[t]:.6f}" for d in dumps]
        fh.write("\t".join(row) + "\n")
