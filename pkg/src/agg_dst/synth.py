"""Deterministic template-based generator of multi-domain slot-filling dialogues.

Each dialogue opens one domain at a time, fills all of that domain's slots
across a few turns, and records the cumulative gold state after every user
turn plus the turn at which each domain (service) was completed. Agent turns
ask for the next slot or float distractor value suggestions; optional
chitchat turns add tokens irrelevant to any slot, and optional revision turns
overwrite an earlier value (latest value wins).

Everything is a pure function of (schema, config): dialogues draw from
per-dialogue seeds, so corpora are byte-identical given the same seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Dialogue, SlotCatalog, SlotSpec, Turn, tokenize

_PLACEHOLDER = re.compile(r"\{([a-z_]+)\}")


@dataclass
class SlotDef:
    name: str
    values: list[str]
    phrasings: list[str]  # user templates containing {<slot name>}
    prompts: list[str]  # agent questions asking for this slot
    # boolean-style slots realize a value through a marker phrase, so the
    # gold token ("yes"/"no") need not appear verbatim in the utterance
    realizations: dict[str, str] | None = None

    def realize(self, value: str) -> str:
        if self.realizations is not None:
            return self.realizations[value]
        return value


@dataclass
class DomainDef:
    name: str
    slots: list[SlotDef]
    openers: list[str]
    acks: list[str]
    suggestions: list[str]  # agent distractor templates with {a} and {b}

    def slot(self, name: str) -> SlotDef:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)


@dataclass
class Schema:
    domains: list[DomainDef]
    chitchat_user: list[str]
    chitchat_agent: list[str]
    revision_lead_ins: list[str] = field(default_factory=lambda: [
        "actually change that", "sorry i need to correct something",
        "wait let me revise that",
    ])

    def catalog(self) -> SlotCatalog:
        return SlotCatalog(SlotSpec(d.name, s.name) for d in self.domains for s in d.slots)


@dataclass
class GenConfig:
    n_dialogues: int = 100
    domains_per_dialogue: tuple[int, int] = (1, 3)
    turns_per_domain: tuple[int, int] = (2, 3)
    chitchat_prob: float = 0.2
    revision_prob: float = 0.15
    seed: int = 0

    def validate(self):
        for lo, hi in (self.domains_per_dialogue, self.turns_per_domain):
            if lo < 1 or hi < lo:
                raise ValueError(f"bad range ({lo}, {hi})")
        for p in (self.chitchat_prob, self.revision_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.n_dialogues < 0:
            raise ValueError("n_dialogues must be >= 0")


class SchemaError(ValueError):
    """The schema violates its own declared structure."""


def validate_schema(schema: Schema) -> None:
    """Check value pools are non-empty and every placeholder names a slot."""
    if not schema.domains:
        raise SchemaError("schema has no domains")
    for dom in schema.domains:
        slot_names = {s.name for s in dom.slots}
        for slot in dom.slots:
            if not slot.values:
                raise SchemaError(f"{dom.name}-{slot.name}: empty value pool")
            if slot.realizations is not None:
                missing = set(slot.values) - set(slot.realizations)
                if missing:
                    raise SchemaError(
                        f"{dom.name}-{slot.name}: no realization for {sorted(missing)}")
            for tpl in slot.phrasings:
                for ph in _PLACEHOLDER.findall(tpl):
                    if ph not in slot_names:
                        raise SchemaError(
                            f"template {tpl!r} placeholder {{{ph}}} is not a "
                            f"slot of domain {dom.name!r}")
        for tpl in dom.openers + dom.acks:
            for ph in _PLACEHOLDER.findall(tpl):
                if ph not in slot_names:
                    raise SchemaError(
                        f"template {tpl!r} placeholder {{{ph}}} is not a "
                        f"slot of domain {dom.name!r}")
        for tpl in dom.suggestions:
            for ph in _PLACEHOLDER.findall(tpl):
                if ph not in ("a", "b"):
                    raise SchemaError(
                        f"suggestion {tpl!r} may only use {{a}} and {{b}}")


def _pick(rng: np.random.Generator, items):
    return items[int(rng.integers(len(items)))]


def _partition(items: list, parts: int) -> list[list]:
    """Split into ``parts`` contiguous non-empty groups of near-equal size."""
    parts = max(1, min(parts, len(items)))
    base, extra = divmod(len(items), parts)
    out, i = [], 0
    for p in range(parts):
        size = base + (1 if p < extra else 0)
        out.append(items[i:i + size])
        i += size
    return out


def _generate_dialogue(schema: Schema, cfg: GenConfig, did: str,
                       rng: np.random.Generator) -> Dialogue:
    lo, hi = cfg.domains_per_dialogue
    n_dom = int(rng.integers(lo, min(hi, len(schema.domains)) + 1))
    order = rng.permutation(len(schema.domains))[:n_dom]
    chosen = [schema.domains[i] for i in order]

    turns: list[Turn] = []
    states: list[dict[str, list[str]]] = []
    state: dict[str, list[str]] = {}
    service_done: dict[str, int] = {}

    def emit(user: str, agent: str):
        turns.append(Turn(index=len(turns) + 1, user=tokenize(user), agent=tokenize(agent)))
        states.append({sid: list(v) for sid, v in state.items()})

    def chitchat_maybe():
        if schema.chitchat_user and rng.random() < cfg.chitchat_prob:
            emit(_pick(rng, schema.chitchat_user), _pick(rng, schema.chitchat_agent))

    def inform_sentence(dom: DomainDef, slot: SlotDef, value: str) -> str:
        tpl = _pick(rng, slot.phrasings)
        return tpl.replace("{%s}" % slot.name, slot.realize(value))

    for dom_i, dom in enumerate(chosen):
        slot_order = [dom.slots[i] for i in rng.permutation(len(dom.slots))]
        t_lo, t_hi = cfg.turns_per_domain
        groups = _partition(slot_order, int(rng.integers(t_lo, t_hi + 1)))
        values = {s.name: _pick(rng, s.values) for s in dom.slots}
        for g_i, group in enumerate(groups):
            chitchat_maybe()
            sentences = []
            if g_i == 0:
                sentences.append(_pick(rng, dom.openers))
            for slot in group:
                sentences.append(inform_sentence(dom, slot, values[slot.name]))
                state[f"{dom.name}-{slot.name}"] = tokenize(values[slot.name])
            last_group = g_i == len(groups) - 1
            if last_group:
                service_done[dom.name] = len(turns) + 1
                agent = _pick(rng, dom.acks)
            else:
                next_slot = groups[g_i + 1][0]
                if next_slot.realizations is None and len(next_slot.values) >= 2 \
                        and rng.random() < 0.5 and dom.suggestions:
                    a, b = rng.choice(len(next_slot.values), size=2, replace=False)
                    agent = (_pick(rng, dom.suggestions)
                             .replace("{a}", next_slot.values[int(a)])
                             .replace("{b}", next_slot.values[int(b)]))
                else:
                    agent = _pick(rng, next_slot.prompts)
            emit(" ".join(sentences), agent)
            # revision of an already-filled slot of the active domain
            if not last_group and rng.random() < cfg.revision_prob:
                filled = [s for s in dom.slots
                          if f"{dom.name}-{s.name}" in state and len(s.values) >= 2]
                if filled:
                    slot = _pick(rng, filled)
                    current = " ".join(state[f"{dom.name}-{slot.name}"])
                    pool = [v for v in slot.values if v != current]
                    new_value = _pick(rng, pool)
                    user = (_pick(rng, schema.revision_lead_ins) + " "
                            + inform_sentence(dom, slot, new_value))
                    state[f"{dom.name}-{slot.name}"] = tokenize(new_value)
                    emit(user, _pick(rng, dom.acks))

    return Dialogue(
        id=did,
        turns=turns,
        gold_states=states,
        domains=tuple(d.name for d in chosen),
        service_done=service_done,
    )


def generate_corpus(schema: Schema, cfg: GenConfig) -> Corpus:
    """Generate ``cfg.n_dialogues`` dialogues with per-turn gold states."""
    validate_schema(schema)
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_dialogues)
    dialogues = []
    width = max(4, len(str(max(cfg.n_dialogues - 1, 0))))
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        dialogues.append(_generate_dialogue(schema, cfg, f"syn-{i:0{width}d}", rng))
    return Corpus(dialogues=dialogues, catalog=schema.catalog())


# ---------------------------------------------------------------------------
# bundled schema

_PLACES = [
    "cambridge", "norwich", "stansted", "ely", "peterborough", "huntingdon",
    "royston", "newmarket", "haverhill", "saffron", "thetford", "wisbech",
    "kings lynn", "bury town", "milton keynes", "bedford", "ipswich", "colchester",
]
_TIMES = [
    "09:00", "09:15", "09:30", "10:00", "10:45", "11:15", "12:00", "13:30",
    "14:15", "15:00", "16:30", "17:00", "17:45", "18:30", "19:15", "20:00",
]
_CUISINES = [
    "chinese", "italian", "indian", "thai", "mexican", "french", "turkish",
    "japanese", "korean", "spanish", "greek", "lebanese", "british", "vietnamese",
]
_AREAS = ["north", "south", "east", "west", "centre", "riverside", "downtown", "uptown"]
_COUNTS = ["1", "2", "3", "4", "5", "6", "7", "8"]
_STARS = ["1", "2", "3", "4", "5", "any", "luxury", "budget"]

_CHITCHAT_USER = [
    "by the way the weather is lovely today",
    "thanks for being so patient with me",
    "my day has been rather long honestly",
    "i really enjoy visiting this city",
    "sorry i keep getting distracted",
    "this trip has been planned for ages",
    "my friends recommended this service",
    "hold on my phone was ringing",
]
_CHITCHAT_AGENT = [
    "happy to help", "glad to hear that", "no problem at all",
    "of course take your time", "always a pleasure",
]


def default_schema() -> Schema:
    """Bundled three-domain schema: taxi, restaurant, hotel."""
    taxi = DomainDef(
        name="taxi",
        openers=["i need a taxi", "can you book a taxi for me",
                 "i would like to arrange a taxi"],
        acks=["alright your taxi is noted", "got it the taxi is set",
              "sure thing all booked"],
        suggestions=["would {a} or {b} work for you", "we could offer {a} or maybe {b}"],
        slots=[
            SlotDef("destination", list(_PLACES),
                    ["i am going to {destination}", "take me to {destination}",
                     "the destination is {destination}"],
                    ["where are you heading", "what is the destination"]),
            SlotDef("leave_at", list(_TIMES),
                    ["i want to leave at {leave_at}", "pick me up at {leave_at}",
                     "departure should be at {leave_at}"],
                    ["when do you want to leave", "what time should the car come"]),
            SlotDef("passengers", list(_COUNTS),
                    ["there will be {passengers} of us", "for {passengers} riders please",
                     "we are a group of {passengers}"],
                    ["how many people will ride", "how many passengers"]),
        ],
    )
    restaurant = DomainDef(
        name="restaurant",
        openers=["i am looking for a restaurant", "can you find me a place to eat",
                 "i want to book a table"],
        acks=["your table is reserved", "the restaurant is booked",
              "done enjoy your meal"],
        suggestions=["do you prefer {a} or {b}", "popular picks are {a} and {b}"],
        slots=[
            SlotDef("food", list(_CUISINES),
                    ["i would like {food} food", "something serving {food} cuisine",
                     "{food} sounds good tonight"],
                    ["what kind of food do you want", "any cuisine in mind"]),
            SlotDef("area", list(_AREAS),
                    ["somewhere in the {area}", "the {area} part of town",
                     "ideally in the {area}"],
                    ["which part of town", "any preferred area"]),
            SlotDef("time", list(_TIMES),
                    ["book it for {time}", "we will arrive at {time}",
                     "a table at {time} please"],
                    ["what time shall i book", "when will you arrive"]),
            SlotDef("people", list(_COUNTS),
                    ["for {people} guests", "a party of {people}",
                     "{people} people will come"],
                    ["how many guests", "for how many people"]),
        ],
    )
    hotel = DomainDef(
        name="hotel",
        openers=["i need a hotel", "please find me a hotel",
                 "looking for a place to stay"],
        acks=["the hotel is reserved", "your room is booked", "all set for your stay"],
        suggestions=["maybe {a} or {b} suits you", "guests often pick {a} or {b}"],
        slots=[
            SlotDef("area", list(_AREAS),
                    ["in the {area} area", "near the {area}",
                     "the {area} side would be best"],
                    ["which area for the hotel", "where should the hotel be"]),
            SlotDef("stay_days", list(_COUNTS),
                    ["for {stay_days} nights", "we will stay {stay_days} nights",
                     "a stay of {stay_days} nights"],
                    ["how many nights", "how long will you stay"]),
            SlotDef("stars", list(_STARS),
                    ["it should have {stars} stars", "a {stars} star place",
                     "rated {stars} stars"],
                    ["how many stars", "any rating preference"]),
        ],
    )
    return Schema(domains=[taxi, restaurant, hotel],
                  chitchat_user=list(_CHITCHAT_USER),
                  chitchat_agent=list(_CHITCHAT_AGENT))


_PLACE_FIRST = ["north", "south", "east", "west", "old", "new", "upper", "lower",
                "royal", "little", "great", "saint", "port", "lake", "hill", "green"]
_PLACE_SECOND = ["bridge", "field", "market", "haven", "chester", "ford", "wick",
                 "townend", "gate", "wood", "brook", "minster", "borough", "dale",
                 "combe", "leigh"]


def _dense_times() -> list[str]:
    return [f"{h:02d}:{m:02d}" for h in range(6, 22) for m in (0, 15, 30, 45)]


def diverse_schema() -> Schema:
    """A value-dense variant of the bundled schema for data-efficiency studies.

    Same three domains and slot layout, but compositional two-token place
    names (256 combinations) and a dense time grid (64 values), so per-value
    coverage stays thin even in a few thousand dialogues and accuracy keeps
    improving with corpus size instead of saturating.
    """
    schema = default_schema()
    places = [f"{a} {b}" for a in _PLACE_FIRST for b in _PLACE_SECOND]
    times = _dense_times()
    for dom in schema.domains:
        for slot in dom.slots:
            if slot.name == "destination":
                slot.values = list(places)
            elif slot.name in ("leave_at", "time"):
                slot.values = list(times)
    return schema


# ---------------------------------------------------------------------------
# schema (de)serialization

def schema_to_json(schema: Schema) -> dict:
    return {
        "domains": [
            {
                "name": d.name,
                "openers": d.openers,
                "acks": d.acks,
                "suggestions": d.suggestions,
                "slots": [
                    {
                        "name": s.name,
                        "values": s.values,
                        "phrasings": s.phrasings,
                        "prompts": s.prompts,
                        **({"realizations": s.realizations} if s.realizations else {}),
                    }
                    for s in d.slots
                ],
            }
            for d in schema.domains
        ],
        "chitchat_user": schema.chitchat_user,
        "chitchat_agent": schema.chitchat_agent,
        "revision_lead_ins": schema.revision_lead_ins,
    }


def schema_from_json(obj: dict) -> Schema:
    domains = []
    for d in obj["domains"]:
        slots = [SlotDef(s["name"], list(s["values"]), list(s["phrasings"]),
                         list(s["prompts"]), s.get("realizations"))
                 for s in d["slots"]]
        domains.append(DomainDef(d["name"], slots, list(d["openers"]),
                                 list(d["acks"]), list(d.get("suggestions", []))))
    schema = Schema(domains=domains,
                    chitchat_user=list(obj.get("chitchat_user", [])),
                    chitchat_agent=list(obj.get("chitchat_agent", [])))
    if obj.get("revision_lead_ins"):
        schema.revision_lead_ins = list(obj["revision_lead_ins"])
    return schema


def load_schema(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return schema_from_json(json.load(fh))


def save_schema(schema: Schema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_json(schema), fh, indent=2)
        fh.write("\n")
