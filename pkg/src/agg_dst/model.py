"""The state-tracking network: shared embeddings, bidirectional GRU encoder,
and a per-slot GRU generator with a soft-gated copy mechanism.

Two decoder-initialization variants are supported and differ in nothing else:

* ``trade``: the decoder starts from the last encoder state.
* ``agg``: the decoder starts from an attention-weighted sum of encoder
  states, scored against the slot's query embedding, so each slot gets its
  own view of the history.

Public functions mirror a single example; the ``*_batch`` internals run many
(history, slot) rows at once and are what training and bulk evaluation use.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import NONE_VALUE, Dialogue, DialogueState, SlotCatalog, SlotSpec, \
    Vocab, build_history, tokenize

CHECKPOINT_MAGIC = b"AGGDST"
CHECKPOINT_VERSION = 1

VARIANTS = ("trade", "agg")


@dataclass
class ModelConfig:
    d_word: int = 32
    d_char: int = 8
    hidden: int = 64  # encoder hidden units per direction
    combine: str = "sum"  # bidirectional outputs: "sum" | "concat"
    variant: str = "agg"  # decoder init: "trade" | "agg"
    init_attention: str = "bilinear"  # slot-attention score: "bilinear" | "dot"
    dropout: float = 0.2
    max_decode_len: int = 8
    dtype: str = "f64"  # "f64" | "f32"

    @property
    def d_emb(self) -> int:
        return self.d_word + self.d_char

    @property
    def d_hdd(self) -> int:
        return self.hidden if self.combine == "sum" else 2 * self.hidden

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    def validate(self):
        if min(self.d_word, self.d_char, self.hidden, self.max_decode_len) < 1:
            raise ValueError("model dimensions must be positive")
        if self.combine not in ("sum", "concat"):
            raise ValueError(f"unknown combine mode {self.combine!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.init_attention not in ("bilinear", "dot"):
            raise ValueError(f"unknown init_attention {self.init_attention!r}")
        if self.init_attention == "dot" and self.d_emb != self.d_hdd:
            raise ValueError(
                f"dot-product init attention needs d_emb == d_hdd, "
                f"got {self.d_emb} != {self.d_hdd}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.dtype not in ("f64", "f32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")


@dataclass
class EncodedHistory:
    """Per-token encoder states plus what the copy mechanism needs.

    Arrays are batched: ``h_tokens`` is [B, T, d_hdd], ``h_last`` [B, d_hdd].
    ``mask`` marks real (non-PAD) positions; ``lengths`` holds each row's true
    token count.
    """

    h_tokens: Tensor
    h_last: Tensor
    source_ids: np.ndarray  # [B, T] int
    mask: np.ndarray  # [B, T] {0,1}
    lengths: np.ndarray  # [B] int

    @property
    def batch(self) -> int:
        return self.source_ids.shape[0]

    @property
    def steps(self) -> int:
        return self.source_ids.shape[1]


@dataclass
class SlotPrediction:
    slot: str
    tokens: list[str]
    step_distributions: list[np.ndarray]
    attention: np.ndarray | None = None  # init attention over history (agg)


class DstModel:
    """Parameter container plus the fixed lookup structure derived from a vocab."""

    def __init__(self, config: ModelConfig, vocab: Vocab, catalog: SlotCatalog):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.catalog = catalog
        self.params: dict[str, Tensor] = {}
        self.chars = sorted({ch for tok in vocab.id_to_token for ch in tok})
        self._char_index = {c: i for i, c in enumerate(self.chars)}
        self.char_weights = self._build_char_weights()
        self._slot_gather_ids, self._slot_mean = self._build_slot_queries()

    # -- fixed lookup structure ------------------------------------------------

    def _build_char_weights(self) -> np.ndarray:
        """[|V|, n_chars] row-stochastic matrix averaging a token's characters."""
        w = np.zeros((len(self.vocab), len(self.chars)), dtype=self.config.np_dtype)
        for i, tok in enumerate(self.vocab.id_to_token):
            for ch in tok:
                w[i, self._char_index[ch]] += 1.0 / len(tok)
        return w

    def _build_slot_queries(self):
        """Flat token ids of every slot's domain+name tokens, plus the
        [n_slots, total] averaging matrix that turns gathered rows into queries."""
        ids: list[int] = []
        rows = []
        for slot in self.catalog:
            toks = tokenize(slot.domain) + tokenize(slot.name)
            enc = self.vocab.encode(toks)
            rows.append((len(ids), len(enc)))
            ids.extend(enc)
        mean = np.zeros((len(rows), len(ids)), dtype=self.config.np_dtype)
        for r, (start, n) in enumerate(rows):
            mean[r, start:start + n] = 1.0 / n
        return np.asarray(ids, dtype=np.intp), mean

    # -- parameters --------------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        dt = cfg.np_dtype
        V, H, D, E = len(self.vocab), cfg.hidden, cfg.d_hdd, cfg.d_emb

        def emb(shape):
            return Tensor((rng.normal(0.0, 0.1, shape)).astype(dt), requires_grad=True)

        def lin(shape):
            bound = 1.0 / np.sqrt(shape[0])
            return Tensor(rng.uniform(-bound, bound, shape).astype(dt), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        p = {}
        p["word_emb"] = emb((V, cfg.d_word))
        p["char_emb"] = emb((len(self.chars), cfg.d_char))
        for direction in ("fwd", "bwd"):
            p[f"enc_{direction}_w_ih"] = lin((E, 3 * H))
            p[f"enc_{direction}_w_hh"] = lin((H, 3 * H))
            p[f"enc_{direction}_b_ih"] = zeros(3 * H)
            p[f"enc_{direction}_b_hh"] = zeros(3 * H)
        p["dec_w_ih"] = lin((E, 3 * D))
        p["dec_w_hh"] = lin((D, 3 * D))
        p["dec_b_ih"] = zeros(3 * D)
        p["dec_b_hh"] = zeros(3 * D)
        p["vocab_w"] = lin((2 * D, V))
        p["vocab_b"] = zeros(V)
        p["gate_w"] = lin((2 * D + E, 1))
        p["gate_b"] = zeros(1)
        # allocated for both variants so parameter shapes never depend on it
        p["attn_w"] = lin((E, D))
        self.params = p

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def load_word_vectors(self, path) -> int:
        """Overwrite word-embedding rows from a text file of ``token v1 .. vd`` lines."""
        table = self.params["word_emb"].data
        n = 0
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split(" ")
                if len(parts) != self.config.d_word + 1:
                    continue
                tok = parts[0]
                if tok in self.vocab.token_to_id:
                    table[self.vocab.token_to_id[tok]] = [float(x) for x in parts[1:]]
                    n += 1
        return n


# ---------------------------------------------------------------------------
# forward pieces


def embedding_table(model: DstModel) -> Tensor:
    """[|V|, d_emb] table: word vector concatenated with the mean of the
    token's character vectors. Shared by history, domain, and slot tokens."""
    char_part = ad.matmul(Tensor(model.char_weights), model.params["char_emb"])
    return ad.concat([model.params["word_emb"], char_part], axis=1)


def embed_tokens(token_ids, model: DstModel, table: Tensor | None = None,
                 training: bool = False, rng=None) -> Tensor:
    """Embed a token-id sequence -> [T, d_emb]; dropout applies in training."""
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= len(model.vocab)):
        raise IndexError(f"token id out of range for vocabulary of {len(model.vocab)}")
    if table is None:
        table = embedding_table(model)
    rows = ad.gather_rows(table, ids)
    return ad.dropout(rows, model.config.dropout, training, rng)


def _gru_cell(x: Tensor, h: Tensor, p: dict, prefix: str) -> Tensor:
    return ad.gru_cell(x, h, p[f"{prefix}_w_ih"], p[f"{prefix}_w_hh"],
                       p[f"{prefix}_b_ih"], p[f"{prefix}_b_hh"])


def _gru_direction(e3: Tensor, model: DstModel, prefix: str,
                   mask: np.ndarray, reverse: bool) -> list[Tensor]:
    """Run one GRU direction over [B, T, d_emb]; PAD steps hold the state.

    With right-padded rows the reversed pass walks the pads first while the
    state is still zero, so both directions see exactly the real tokens.
    """
    B, T, _ = e3.shape
    H = model.config.hidden
    dt = model.config.np_dtype
    h = Tensor(np.zeros((B, H), dtype=dt))
    order = range(T - 1, -1, -1) if reverse else range(T)
    out: list[Tensor | None] = [None] * T
    full = bool(mask.all())
    for t in order:
        x = ad.time_slice(e3, t)
        h_new = _gru_cell(x, h, model.params, prefix)
        if full:
            h = h_new
        else:
            m = Tensor(mask[:, t:t + 1].astype(dt))
            h = ad.add(h, ad.mul(m, ad.sub(h_new, h)))
        out[t] = h
    return out


def encode_batch(e3: Tensor, model: DstModel, source_ids: np.ndarray,
                 mask: np.ndarray, lengths: np.ndarray,
                 training: bool = False, rng=None) -> EncodedHistory:
    """Bidirectional pass over embedded histories [B, T, d_emb]."""
    fwd = _gru_direction(e3, model, "enc_fwd", mask, reverse=False)
    bwd = _gru_direction(e3, model, "enc_bwd", mask, reverse=True)
    f3 = ad.stack(fwd, axis=1)
    b3 = ad.stack(bwd, axis=1)
    if model.config.combine == "sum":
        h3 = ad.add(f3, b3)
    else:
        h3 = ad.concat([f3, b3], axis=2)
    h3 = ad.dropout(h3, model.config.dropout, training, rng)
    h_last = ad.gather_time(h3, lengths - 1)
    return EncodedHistory(h_tokens=h3, h_last=h_last, source_ids=source_ids,
                          mask=mask, lengths=lengths)


def encode(e: Tensor, model: DstModel, token_ids=None,
           training: bool = False, rng=None) -> EncodedHistory:
    """Encode a single embedded history [T, d_emb]."""
    T = e.shape[0]
    if T < 1:
        raise ValueError("cannot encode an empty history")
    e3 = ad.reshape(e, (1, T, e.shape[1]))
    ids = np.asarray(token_ids if token_ids is not None else np.zeros(T), dtype=np.intp)
    return encode_batch(e3, model, ids.reshape(1, T),
                        np.ones((1, T), dtype=np.intp),
                        np.array([T], dtype=np.intp), training, rng)


def slot_queries(model: DstModel, table: Tensor | None = None,
                 training: bool = False, rng=None) -> Tensor:
    """[n_slots, d_emb] queries: mean embedding of each slot's domain+name tokens."""
    if table is None:
        table = embedding_table(model)
    gathered = ad.gather_rows(table, model._slot_gather_ids)
    queries = ad.matmul(Tensor(model._slot_mean), gathered)
    return ad.dropout(queries, model.config.dropout, training, rng)


def slot_query(sid: str, model: DstModel, table: Tensor | None = None) -> Tensor:
    """Query vector [d_emb] for one catalog slot."""
    if sid not in model.catalog:
        raise KeyError(f"unknown slot {sid!r}")
    idx = model.catalog.sids.index(sid)
    return _single_row(slot_queries(model, table), idx)


def _single_row(x: Tensor, idx: int) -> Tensor:
    picked = ad.gather_rows(x, np.asarray([idx], dtype=np.intp))
    return ad.reshape(picked, (x.shape[1],))


def _neg_inf_mask(mask: np.ndarray, dtype) -> Tensor:
    """Additive attention mask: 0 on real tokens, -inf on PAD."""
    add_mask = np.zeros(mask.shape, dtype=dtype)
    add_mask[mask == 0] = -np.inf
    return Tensor(add_mask)


def _expand_examples(x3: Tensor, row_to_example: np.ndarray) -> Tensor:
    """Select [B, T, D] rows into [R, T, D] by per-row example index."""
    B, T, D = x3.shape
    flat = ad.reshape(x3, (B, T * D))
    return ad.reshape(ad.gather_rows(flat, row_to_example), (len(row_to_example), T, D))


class _AttnEngine:
    """Attention over encoder states for R = (example, slot)-style rows.

    When every example owns the same number of consecutive rows the math runs
    grouped as [B, N, *] batched GEMMs over the shared [B, T, H] states;
    otherwise the states are expanded to [R, T, H] first.
    """

    def __init__(self, enc: EncodedHistory, row_to_example: np.ndarray, dtype):
        B, T = enc.mask.shape
        R = len(row_to_example)
        n = R // B if B else 0
        self.R, self.T = R, T
        uniform = (B > 0 and R == B * n
                   and np.array_equal(row_to_example,
                                      np.repeat(np.arange(B), n)))
        self.n = n if uniform else None
        masked = not enc.mask.all()
        if uniform:
            self.h3 = enc.h_tokens
            self.add_mask = _neg_inf_mask(enc.mask[:, None, :], dtype) if masked else None
        else:
            self.h3 = _expand_examples(enc.h_tokens, row_to_example)
            self.add_mask = (_neg_inf_mask(enc.mask[row_to_example], dtype)
                             if masked else None)

    def attend(self, q_rows: Tensor):
        """Softmax attention of per-row queries -> (alpha [R,T], context [R,H])."""
        if self.n is None:
            scores = ad.attn_scores(self.h3, q_rows)
            if self.add_mask is not None:
                scores = ad.add(scores, self.add_mask)
            alpha = ad.softmax(scores, axis=1)
            return alpha, ad.attn_context(alpha, self.h3)
        B, _, D = self.h3.shape
        q3 = ad.reshape(q_rows, (B, self.n, q_rows.shape[1]))
        scores = ad.attn_scores_grouped(self.h3, q3)
        if self.add_mask is not None:
            scores = ad.add(scores, self.add_mask)
        alpha3 = ad.softmax(scores, axis=2)
        ctx3 = ad.attn_context_grouped(alpha3, self.h3)
        return (ad.reshape(alpha3, (self.R, self.T)),
                ad.reshape(ctx3, (self.R, D)))


def init_decoder_batch(enc: EncodedHistory, q_rows: Tensor, model: DstModel,
                       row_to_example: np.ndarray, engine: _AttnEngine | None = None):
    """Initial decoder state per (history, slot) row.

    trade: the encoder's last state, shared by all that example's slots.
    agg: softmax(score(query, h_t)) over real tokens, then the weighted sum.
    Returns (h0 [R, d_hdd], attention [R, T] Tensor or None).
    """
    if model.config.variant == "trade":
        return ad.gather_rows(enc.h_last, row_to_example), None
    if engine is None:
        engine = _AttnEngine(enc, row_to_example, model.config.np_dtype)
    if model.config.init_attention == "bilinear":
        proj = ad.matmul(q_rows, model.params["attn_w"])
    else:
        proj = q_rows
    alpha, h0 = engine.attend(proj)
    return h0, alpha


def init_decoder(enc: EncodedHistory, query: Tensor, model: DstModel):
    """Single-slot decoder initialization: (h0 [d_hdd], attention [T] or None)."""
    q_rows = ad.reshape(query, (1, query.shape[-1]))
    h0, alpha = init_decoder_batch(enc, q_rows, model,
                                   np.zeros(1, dtype=np.intp))
    h0 = ad.reshape(h0, (h0.shape[1],))
    if alpha is not None:
        alpha = ad.reshape(alpha, (alpha.shape[1],))
    return h0, alpha


@dataclass
class DecodeResult:
    """Batched decoder outputs; rows are (example, slot) pairs."""

    step_dists: list[Tensor]  # per step [R, |V|]
    emitted: np.ndarray  # [R, L] int token ids (greedy path of each step)
    init_attention: Tensor | None


def decode_batch(model: DstModel, enc: EncodedHistory, q_rows: Tensor,
                 row_to_example: np.ndarray, steps: int,
                 targets: np.ndarray | None = None,
                 teacher_ratio: float = 0.0, teacher_rng=None,
                 training: bool = False, rng=None,
                 table: Tensor | None = None,
                 keep_dists: bool = True) -> DecodeResult:
    """Run the generator for ``steps`` steps over R (history, slot) rows.

    ``row_to_example`` maps each row to its encoded history. Each step mixes
    the vocabulary softmax with the copy distribution given by the step
    attention, gated by p_gen. With ``targets`` given, the input token for the
    next step is the gold one with probability ``teacher_ratio`` (sampled per
    step), otherwise the argmax of the mixture.
    """
    cfg = model.config
    p = model.params
    if table is None:
        table = embedding_table(model)
    row_to_example = np.asarray(row_to_example, dtype=np.intp)
    engine = _AttnEngine(enc, row_to_example, cfg.np_dtype)
    src_rep = enc.source_ids[row_to_example]
    R = src_rep.shape[0]
    V = len(model.vocab)

    h, init_attn = init_decoder_batch(enc, q_rows, model, row_to_example, engine=engine)
    x = q_rows  # step-0 decoder input is the slot query
    step_dists: list[Tensor] = []
    emitted = np.zeros((R, steps), dtype=np.intp)
    done = np.zeros(R, dtype=bool)
    eos = model.vocab.eos_id
    for step in range(steps):
        h = _gru_cell(x, h, p, "dec")
        a_step, ctx = engine.attend(h)
        h_ctx = ad.concat([h, ctx], axis=1)
        p_vocab = ad.softmax(ad.add(ad.matmul(h_ctx, p["vocab_w"]), p["vocab_b"]), axis=1)
        p_gen = ad.sigmoid(ad.add(ad.matmul(ad.concat([h, ctx, x], axis=1), p["gate_w"]),
                                  p["gate_b"]))
        p_copy = ad.scatter_to_vocab(a_step, src_rep, V)
        final = ad.add(ad.mul(p_gen, p_vocab), ad.mul(ad.sub(1.0, p_gen), p_copy))
        if keep_dists:
            step_dists.append(final)
        picks = np.argmax(final.data, axis=1)
        emitted[:, step] = picks
        done |= picks == eos
        if step + 1 == steps:
            break
        if targets is not None:
            if teacher_ratio >= 1.0:
                forced = True
            elif teacher_ratio <= 0.0 or teacher_rng is None:
                forced = False
            else:
                forced = teacher_rng.random() < teacher_ratio
            next_ids = targets[:, step] if forced else picks
        else:
            if done.all():
                emitted = emitted[:, : step + 1]
                break
            next_ids = picks
        x = ad.gather_rows(table, next_ids)
    return DecodeResult(step_dists=step_dists, emitted=emitted, init_attention=init_attn)


def decode_slot(enc: EncodedHistory, sid: str, model: DstModel,
                mode: str = "greedy", gold: list[str] | None = None,
                teacher_ratio: float = 0.5, teacher_rng=None,
                training: bool = False, rng=None) -> SlotPrediction:
    """Generate one slot's value for a batch-of-one encoded history."""
    if sid not in model.catalog:
        raise KeyError(f"unknown slot {sid!r}")
    table = embedding_table(model)
    all_q = slot_queries(model, table, training, rng)
    idx = model.catalog.sids.index(sid)
    q = ad.reshape(_single_row(all_q, idx), (1, model.config.d_emb))
    if mode == "greedy":
        steps = model.config.max_decode_len
        targets = None
    elif mode == "teacher_forced":
        if gold is None:
            raise ValueError("teacher_forced mode needs gold tokens")
        ids = model.vocab.encode(gold) + [model.vocab.eos_id]
        steps = len(ids)
        targets = np.asarray([ids], dtype=np.intp)
    else:
        raise ValueError(f"unknown decode mode {mode!r}")
    result = decode_batch(model, enc, q, np.zeros(1, dtype=np.intp), steps,
                          targets=targets, teacher_ratio=teacher_ratio,
                          teacher_rng=teacher_rng, training=training, rng=rng,
                          table=table)
    tokens = _ids_to_value(result.emitted[0], model.vocab)
    attn = None
    if result.init_attention is not None:
        attn = result.init_attention.data[0, : enc.lengths[0]].copy()
    return SlotPrediction(slot=sid, tokens=tokens,
                          step_distributions=[d.data[0] for d in result.step_dists],
                          attention=attn)


def _ids_to_value(ids, vocab: Vocab) -> list[str]:
    toks = []
    for i in ids:
        if i == vocab.eos_id:
            break
        toks.append(vocab.id_to_token[i])
    return toks


# ---------------------------------------------------------------------------
# inference over dialogues


def pad_batch(token_rows: list[list[int]], pad_id: int):
    """Right-pad id rows to a common length: (ids [B,T], mask [B,T], lengths [B])."""
    B = len(token_rows)
    T = max(len(r) for r in token_rows)
    ids = np.full((B, T), pad_id, dtype=np.intp)
    mask = np.zeros((B, T), dtype=np.intp)
    lengths = np.zeros(B, dtype=np.intp)
    for i, row in enumerate(token_rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1
        lengths[i] = len(row)
    return ids, mask, lengths


def predict_values_batch(model: DstModel, histories: list[list[str]],
                         sids: list[str] | None = None) -> list[dict[str, list[str]]]:
    """Greedy values for every (history, slot) pair; one encoder pass per history.

    Returns one {sid: value tokens} map per history with "none" values dropped.
    """
    sids = list(sids) if sids is not None else model.catalog.sids
    slot_idx = [model.catalog.sids.index(s) for s in sids]
    rows = [model.vocab.encode(h) if h else [model.vocab.unk_id] for h in histories]
    ids, mask, lengths = pad_batch(rows, model.vocab.pad_id)
    table = embedding_table(model)
    flat = ad.gather_rows(table, ids.ravel())
    e3 = ad.reshape(flat, (ids.shape[0], ids.shape[1], model.config.d_emb))
    enc = encode_batch(e3, model, ids, mask, lengths)
    all_q = slot_queries(model, table)
    q_sel = ad.gather_rows(all_q, np.asarray(slot_idx, dtype=np.intp))
    q_rows = ad.tile_rows(q_sel, len(histories))
    row_to_example = np.repeat(np.arange(len(histories), dtype=np.intp), len(sids))
    result = decode_batch(model, enc, q_rows, row_to_example,
                          model.config.max_decode_len, table=table, keep_dists=False)
    out = []
    for b in range(len(histories)):
        state: dict[str, list[str]] = {}
        for k, sid in enumerate(sids):
            toks = _ids_to_value(result.emitted[b * len(sids) + k], model.vocab)
            if toks and toks != [NONE_VALUE]:
                state[sid] = toks
        out.append(state)
    return out


def predict_state(d: Dialogue, j: int, model: DstModel,
                  sids: list[str] | None = None) -> DialogueState:
    """Predict the dialogue state at turn j: encode once, decode every slot."""
    history = build_history(d, j)
    sids = list(sids) if sids is not None else model.catalog.sids
    row = model.vocab.encode(history) if history else [model.vocab.unk_id]
    table = embedding_table(model)
    e = embed_tokens(row, model, table=table)
    enc = encode(e, model, token_ids=row)
    all_q = slot_queries(model, table)
    slot_idx = np.asarray([model.catalog.sids.index(s) for s in sids], dtype=np.intp)
    q_rows = ad.gather_rows(all_q, slot_idx)
    result = decode_batch(model, enc, q_rows, np.zeros(len(sids), dtype=np.intp),
                          model.config.max_decode_len, table=table, keep_dists=False)
    assignments: dict[str, list[str]] = {}
    for k, sid in enumerate(sids):
        toks = _ids_to_value(result.emitted[k], model.vocab)
        if toks and toks != [NONE_VALUE]:
            assignments[sid] = toks
    return DialogueState(turn=j, assignments=assignments)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: DstModel, path) -> None:
    """Write a versioned binary container: config, vocab, catalog, parameters.

    The layout is deterministic (no timestamps), so identical models produce
    identical files.
    """
    names = sorted(model.params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": model.vocab.id_to_token,
        "catalog": [{"domain": s.domain, "slot": s.name} for s in model.catalog],
        "params": [
            {"name": k, "dtype": str(model.params[k].dtype),
             "shape": list(model.params[k].shape)}
            for k in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(model.params[k].data).tobytes())


def load_checkpoint(path) -> DstModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        config = ModelConfig(**header["config"])
        vocab = Vocab(header["vocab"][4:])
        if vocab.id_to_token != header["vocab"]:
            raise ValueError("checkpoint vocabulary is not in canonical form")
        catalog = SlotCatalog(SlotSpec(e["domain"], e["slot"]) for e in header["catalog"])
        model = DstModel(config, vocab, catalog)
        params = {}
        for spec in header["params"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
            params[spec["name"]] = Tensor(data.reshape(spec["shape"]).copy(),
                                          requires_grad=True)
        model.params = params
        return model
