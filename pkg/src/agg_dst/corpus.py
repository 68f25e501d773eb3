"""Dialogue data model, JSON-lines ingestion, and supervision-set derivation.

A corpus file holds one JSON object per line:

    {"id": str, "domains": [str], "turns": [{"agent": str, "user": str}],
     "states": [{slot_id: value_str, ...}], "service_done": {service: turn}?}

An optional first line may be a header object:

    {"catalog": [{"domain": str, "slot": str}], "seen_services": [str]?}

Slot ids are "domain-slot" strings. ``states`` is aligned with ``turns``;
slots absent from a state carry the implicit value "none". All text is
tokenized on whitespace (lowercased unless ``preserve_case``).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, SOS, EOS = "<pad>", "<unk>", "<sos>", "<eos>"
RESERVED = (PAD, UNK, SOS, EOS)
NONE_VALUE = "none"

REGIMES = ("full", "weak-final", "weak-service")


class CorpusFormatError(ValueError):
    """The corpus file violates the JSON-lines schema."""


def tokenize(text: str, preserve_case: bool = False) -> list[str]:
    """Whitespace tokenization; lowercased unless ``preserve_case``."""
    if not preserve_case:
        text = text.lower()
    return text.split()


@dataclass
class Turn:
    index: int  # 1-based
    user: list[str]
    agent: list[str]


@dataclass
class DialogueState:
    """Slot assignments at one turn; slots absent from the map are "none"."""

    turn: int
    assignments: dict[str, list[str]]


@dataclass
class Dialogue:
    id: str
    turns: list[Turn]
    gold_states: list[dict[str, list[str]]]  # per turn: slot id -> value tokens
    domains: tuple[str, ...]
    service_done: dict[str, int] | None = None

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    def state_at(self, j: int) -> dict[str, list[str]]:
        return self.gold_states[j - 1]


@dataclass(frozen=True)
class SlotSpec:
    domain: str
    name: str

    @property
    def sid(self) -> str:
        return f"{self.domain}-{self.name}"


class SlotCatalog:
    """Ordered, unique collection of slots; order is stable across runs."""

    def __init__(self, slots=()):
        self._slots: list[SlotSpec] = []
        self._by_sid: dict[str, SlotSpec] = {}
        for s in slots:
            self.add(s)

    def add(self, slot: SlotSpec):
        if slot.sid not in self._by_sid:
            self._by_sid[slot.sid] = slot
            self._slots.append(slot)

    def __len__(self):
        return len(self._slots)

    def __iter__(self):
        return iter(self._slots)

    def __contains__(self, sid: str):
        return sid in self._by_sid

    @property
    def sids(self) -> list[str]:
        return [s.sid for s in self._slots]

    def get(self, sid: str) -> SlotSpec:
        return self._by_sid[sid]

    def for_domain(self, domain: str) -> list[str]:
        return [s.sid for s in self._slots if s.domain == domain]


@dataclass
class SupervisionSet:
    """Which turns of one dialogue carry labels, and for which slots."""

    dialogue_id: str
    regime: str
    labeled: dict[int, list[str]]  # turn index -> supervised slot ids


@dataclass
class Corpus:
    dialogues: list[Dialogue]
    catalog: SlotCatalog
    seen_services: list[str] | None = None

    def __len__(self):
        return len(self.dialogues)

    def __iter__(self):
        return iter(self.dialogues)


# ---------------------------------------------------------------------------
# loading / saving


def _parse_dialogue(obj: dict, lineno: int, preserve_case: bool) -> Dialogue:
    try:
        did = obj["id"]
        raw_turns = obj["turns"]
        raw_states = obj["states"]
        domains = tuple(obj.get("domains", ()))
    except (KeyError, TypeError) as exc:
        raise CorpusFormatError(f"line {lineno}: missing dialogue field: {exc}") from exc
    if len(raw_states) != len(raw_turns):
        raise CorpusFormatError(
            f"line {lineno}: dialogue {did!r} has {len(raw_turns)} turns "
            f"but {len(raw_states)} states"
        )
    turns = []
    for i, t in enumerate(raw_turns, start=1):
        turns.append(Turn(
            index=i,
            user=tokenize(t.get("user", ""), preserve_case),
            agent=tokenize(t.get("agent", ""), preserve_case),
        ))
    states = []
    for raw in raw_states:
        state: dict[str, list[str]] = {}
        for sid, value in raw.items():
            toks = tokenize(str(value), preserve_case)
            if not toks or toks == [NONE_VALUE]:
                continue  # absent means "none"
            state[sid] = toks
        states.append(state)
    service_done = None
    if obj.get("service_done"):
        service_done = {str(k): int(v) for k, v in obj["service_done"].items()}
        for svc, j in service_done.items():
            if not 1 <= j <= len(turns):
                raise CorpusFormatError(
                    f"line {lineno}: dialogue {did!r}: completion turn {j} for "
                    f"service {svc!r} outside [1, {len(turns)}]"
                )
    return Dialogue(id=did, turns=turns, gold_states=states,
                    domains=domains, service_done=service_done)


def load_corpus(path, preserve_case: bool = False) -> Corpus:
    """Parse a JSON-lines corpus file into dialogues plus a slot catalog.

    With a header the catalog is declarative and states may only reference
    declared slots; without one the catalog is the union of slots seen.
    """
    dialogues: list[Dialogue] = []
    catalog = SlotCatalog()
    declared = False
    seen_services = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {lineno}: malformed JSON: {exc}") from exc
            if lineno == 1 and "catalog" in obj:
                declared = True
                for entry in obj["catalog"]:
                    catalog.add(SlotSpec(str(entry["domain"]), str(entry["slot"])))
                if obj.get("seen_services") is not None:
                    seen_services = [str(s) for s in obj["seen_services"]]
                continue
            d = _parse_dialogue(obj, lineno, preserve_case)
            for state in d.gold_states:
                for sid in state:
                    if declared:
                        if sid not in catalog:
                            raise CorpusFormatError(
                                f"line {lineno}: dialogue {d.id!r} references "
                                f"undeclared slot {sid!r}"
                            )
                    else:
                        domain, _, name = sid.partition("-")
                        catalog.add(SlotSpec(domain, name))
            dialogues.append(d)
    return Corpus(dialogues=dialogues, catalog=catalog, seen_services=seen_services)


def save_corpus(corpus: Corpus, path) -> None:
    """Write a corpus in the JSON-lines format, header first."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"catalog": [{"domain": s.domain, "slot": s.name} for s in corpus.catalog]}
        if corpus.seen_services is not None:
            header["seen_services"] = corpus.seen_services
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for d in corpus.dialogues:
            obj = {
                "id": d.id,
                "domains": list(d.domains),
                "turns": [{"agent": " ".join(t.agent), "user": " ".join(t.user)}
                          for t in d.turns],
                "states": [{sid: " ".join(toks) for sid, toks in state.items()}
                           for state in d.gold_states],
            }
            if d.service_done:
                obj["service_done"] = d.service_done
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# history / supervision / vocab


def build_history(d: Dialogue, j: int) -> list[str]:
    """Token sequence u_1, a_1, u_2, a_2, ..., a_{j-1}, u_j.

    The agent reply of turn j itself is not yet visible when the state at
    turn j is predicted.
    """
    if not 1 <= j <= d.n_turns:
        raise IndexError(f"turn {j} out of range for dialogue with {d.n_turns} turns")
    tokens: list[str] = []
    for turn in d.turns[: j - 1]:
        tokens.extend(turn.user)
        tokens.extend(turn.agent)
    tokens.extend(d.turns[j - 1].user)
    return tokens


def derive_supervision(d: Dialogue, regime: str, catalog: SlotCatalog) -> SupervisionSet:
    """Pick the labeled turns (and slot subsets) for one dialogue.

    full: every turn, all catalog slots. weak-final: only the last turn, all
    catalog slots. weak-service: for each completed service, its completion
    turn restricted to that service's slots.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown supervision regime {regime!r}")
    all_sids = catalog.sids
    if regime == "full":
        labeled = {j: list(all_sids) for j in range(1, d.n_turns + 1)}
    elif regime == "weak-final":
        labeled = {d.n_turns: list(all_sids)}
    else:
        if not d.service_done:
            raise ValueError(
                f"dialogue {d.id!r} has no service completion map; "
                "weak-service supervision needs one"
            )
        labeled = {}
        for svc, j in sorted(d.service_done.items()):
            labeled.setdefault(j, []).extend(catalog.for_domain(svc))
    return SupervisionSet(dialogue_id=d.id, regime=regime, labeled=labeled)


class Vocab:
    """Bijective token<->index map with reserved specials at indices 0-3."""

    def __init__(self, tokens):
        self.id_to_token: list[str] = list(RESERVED)
        seen = set(RESERVED)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.id_to_token.append(tok)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    @property
    def pad_id(self):
        return 0

    @property
    def unk_id(self):
        return 1

    @property
    def sos_id(self):
        return 2

    @property
    def eos_id(self):
        return 3

    def encode(self, tokens) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


def build_vocab(corpus: Corpus, min_count: int = 1) -> Vocab:
    """Vocabulary over dialogue, slot-name, and value tokens.

    Dialogue tokens are kept when their count reaches ``min_count``; domain
    and slot-name tokens, gold value tokens, and the "none" sentinel always
    enter so the generator can emit any target and slot queries never hit UNK.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    always: set[str] = {NONE_VALUE}
    for d in corpus.dialogues:
        for turn in d.turns:
            counts.update(turn.user)
            counts.update(turn.agent)
        for state in d.gold_states:
            for toks in state.values():
                always.update(toks)
    for slot in corpus.catalog:
        always.update(tokenize(slot.domain))
        always.update(tokenize(slot.name))
    kept = {t for t, c in counts.items() if c >= min_count}
    return Vocab(sorted(kept | always))


def subsample(corpus: Corpus, rate: float, seed: int) -> Corpus:
    """Deterministic dialogue-level sample of ceil(rate * n), original order."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"subsample rate must be in (0, 1], got {rate}")
    n = len(corpus.dialogues)
    if rate == 1.0:
        return Corpus(list(corpus.dialogues), corpus.catalog, corpus.seen_services)
    k = math.ceil(rate * n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    picked = [corpus.dialogues[i] for i in idx]
    return Corpus(picked, corpus.catalog, corpus.seen_services)
