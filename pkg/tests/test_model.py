import math

import numpy as np
import pytest

from agg_dst import autodiff as ad
from agg_dst import corpus as cp
from agg_dst import model as md
from agg_dst.autodiff import Tape, Tensor
from agg_dst.model import ModelConfig

from conftest import make_model


# ---------------------------------------------------------------------------
# oracles

def scalar_gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """Pure-Python GRU cell, one row at a time."""
    H = len(h)
    gi = [sum(x[i] * w_ih[i][j] for i in range(len(x))) + b_ih[j] for j in range(3 * H)]
    gh = [sum(h[i] * w_hh[i][j] for i in range(len(h))) + b_hh[j] for j in range(3 * H)]
    r = [1 / (1 + math.exp(-(gi[j] + gh[j]))) for j in range(H)]
    z = [1 / (1 + math.exp(-(gi[H + j] + gh[H + j]))) for j in range(H)]
    n = [math.tanh(gi[2 * H + j] + r[j] * gh[2 * H + j]) for j in range(H)]
    return [(1 - z[j]) * n[j] + z[j] * h[j] for j in range(H)]


def numpy_forward_oracle(model, hist_ids, sid):
    """Independent NumPy re-implementation of embed/encode/init/one decode step.

    Used to pin the library's first-step output distribution; shares no code
    with the autodiff-based path.
    """
    p = {k: t.data for k, t in model.params.items()}
    cfg = model.config
    table = np.concatenate([p["word_emb"], model.char_weights @ p["char_emb"]], axis=1)
    E = table[hist_ids]
    H = cfg.hidden

    def gru(x, h, pre):
        gi = x @ p[pre + "_w_ih"] + p[pre + "_b_ih"]
        gh = h @ p[pre + "_w_hh"] + p[pre + "_b_hh"]
        hh = gi.shape[-1] // 3
        r = 1 / (1 + np.exp(-(gi[:hh] + gh[:hh])))
        z = 1 / (1 + np.exp(-(gi[hh:2 * hh] + gh[hh:2 * hh])))
        n = np.tanh(gi[2 * hh:] + r * gh[2 * hh:])
        return (1 - z) * n + z * h

    fwd, h = [], np.zeros(H)
    for t in range(len(hist_ids)):
        h = gru(E[t], h, "enc_fwd")
        fwd.append(h)
    bwd, h = [None] * len(hist_ids), np.zeros(H)
    for t in range(len(hist_ids) - 1, -1, -1):
        h = gru(E[t], h, "enc_bwd")
        bwd[t] = h
    if cfg.combine == "sum":
        Henc = np.stack(fwd) + np.stack(bwd)
    else:
        Henc = np.concatenate([np.stack(fwd), np.stack(bwd)], axis=1)

    slot = model.catalog.get(sid)
    q_ids = model.vocab.encode(cp.tokenize(slot.domain) + cp.tokenize(slot.name))
    query = table[q_ids].mean(axis=0)

    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    if cfg.variant == "agg":
        scores = Henc @ (query @ p["attn_w"])
        alpha = softmax(scores)
        h0 = alpha @ Henc
    else:
        h0 = Henc[-1]

    h_dec = gru(query, h0, "dec")
    a = softmax(Henc @ h_dec)
    ctx = a @ Henc
    p_vocab = softmax(np.concatenate([h_dec, ctx]) @ p["vocab_w"] + p["vocab_b"])
    p_gen = 1 / (1 + np.exp(-(np.concatenate([h_dec, ctx, query]) @ p["gate_w"]
                              + p["gate_b"])))[0]
    p_copy = np.zeros(len(model.vocab))
    np.add.at(p_copy, np.asarray(hist_ids), a)
    return p_gen * p_vocab + (1 - p_gen) * p_copy


def encode_history(model, tokens):
    ids = model.vocab.encode(tokens)
    table = md.embedding_table(model)
    e = md.embed_tokens(ids, model, table=table)
    return md.encode(e, model, token_ids=ids), table, ids


# ---------------------------------------------------------------------------
# embed_tokens

def test_embed_shape(tiny_model):
    e = md.embed_tokens([0, 1, 2, 3, 4], tiny_model)
    assert e.shape == (5, tiny_model.config.d_emb)
    assert tiny_model.config.d_emb == tiny_model.config.d_word + tiny_model.config.d_char


def test_embed_same_token_same_row(tiny_model):
    e = md.embed_tokens([5, 9, 5], tiny_model)
    assert np.array_equal(e.data[0], e.data[2])
    assert not np.array_equal(e.data[0], e.data[1])


def test_embed_rejects_out_of_range(tiny_model):
    with pytest.raises(IndexError):
        md.embed_tokens([len(tiny_model.vocab)], tiny_model)


def test_embeddings_shared_between_history_and_slot_names(tiny_corpus):
    # the same token gets the same vector whether it occurs in an utterance
    # or inside a slot/domain name
    catalog = cp.SlotCatalog([cp.SlotSpec("taxi", "taxi")])
    vocab = cp.build_vocab(tiny_corpus)
    model = md.DstModel(ModelConfig(d_word=8, d_char=4, hidden=8), vocab, catalog)
    model.init_params(np.random.default_rng(0))
    tid = vocab.token_to_id["taxi"]
    emb = md.embed_tokens([tid], model).data[0]
    q = md.slot_query("taxi-taxi", model).data
    np.testing.assert_allclose(q, emb, atol=1e-15)


def test_embed_dropout_applies_only_in_training(tiny_model):
    ids = [5, 6, 7]
    eval_rows = md.embed_tokens(ids, tiny_model).data
    train_rows = md.embed_tokens(ids, tiny_model, training=True,
                                 rng=np.random.default_rng(0)).data
    assert not np.array_equal(eval_rows, train_rows)
    assert (train_rows == 0.0).any()


# ---------------------------------------------------------------------------
# encode

def test_encode_single_token(tiny_model):
    enc, _, _ = encode_history(tiny_model, ["hello"])
    assert enc.h_tokens.shape == (1, 1, tiny_model.config.d_hdd)
    np.testing.assert_array_equal(enc.h_last.data[0], enc.h_tokens.data[0, 0])


def test_encode_row_count_matches_history(tiny_model):
    enc, _, _ = encode_history(tiny_model, "i need a taxi to ely".split())
    assert enc.h_tokens.shape[1] == 6


def test_gru_cell_matches_scalar_oracle(tiny_model):
    rng = np.random.default_rng(8)
    H = tiny_model.config.hidden
    E = tiny_model.config.d_emb
    x = rng.standard_normal((3, E))
    h = rng.standard_normal((3, H))
    out = md._gru_cell(Tensor(x), Tensor(h), tiny_model.params, "enc_fwd")
    p = tiny_model.params
    for b in range(3):
        ref = scalar_gru_cell(
            x[b].tolist(), h[b].tolist(),
            p["enc_fwd_w_ih"].data.tolist(), p["enc_fwd_w_hh"].data.tolist(),
            p["enc_fwd_b_ih"].data.tolist(), p["enc_fwd_b_hh"].data.tolist())
        np.testing.assert_allclose(out.data[b], ref, atol=1e-10, rtol=0)


def test_backward_direction_mirrors_forward_on_reversed_input(tiny_corpus):
    # zero one direction, give the other direction the same weights, and the
    # backward pass over a reversed history must equal the time-reversed
    # forward pass over the original
    m1 = make_model(tiny_corpus, seed=4, combine="concat", dropout=0.0)
    m2 = make_model(tiny_corpus, seed=4, combine="concat", dropout=0.0)
    H = m1.config.hidden
    shared = {k: m1.params[f"enc_bwd_{k}"].data.copy()
              for k in ("w_ih", "w_hh", "b_ih", "b_hh")}
    for k, v in shared.items():
        m1.params[f"enc_fwd_{k}"].data[:] = 0.0  # m1: only backward live
        m2.params[f"enc_fwd_{k}"].data[:] = v  # m2: forward runs the same cell
        m2.params[f"enc_bwd_{k}"].data[:] = 0.0
    tokens = "i need a taxi to ely at 17:00".split()
    enc_rev, _, _ = encode_history(m1, tokens[::-1])
    enc_fwd, _, _ = encode_history(m2, tokens)
    bwd_part = enc_rev.h_tokens.data[0, :, H:]
    fwd_part = enc_fwd.h_tokens.data[0, :, :H]
    np.testing.assert_allclose(bwd_part[::-1], fwd_part, atol=1e-12)


def test_padded_batch_matches_unpadded_single(tiny_model):
    # PAD positions must not leak into states of shorter rows
    short = "i need a taxi".split()
    long = "can you find me a place to eat tonight".split()
    rows = [tiny_model.vocab.encode(t) for t in (short, long)]
    ids, mask, lengths = md.pad_batch(rows, tiny_model.vocab.pad_id)
    table = md.embedding_table(tiny_model)
    flat = ad.gather_rows(table, ids.ravel())
    e3 = ad.reshape(flat, (2, ids.shape[1], tiny_model.config.d_emb))
    enc = md.encode_batch(e3, tiny_model, ids, mask, lengths)
    solo, _, _ = encode_history(tiny_model, short)
    np.testing.assert_allclose(enc.h_tokens.data[0, : len(short)],
                               solo.h_tokens.data[0], atol=1e-12)
    np.testing.assert_allclose(enc.h_last.data[0], solo.h_last.data[0], atol=1e-12)


# ---------------------------------------------------------------------------
# slot_query

def test_slot_query_mean_of_domain_and_slot_rows(tiny_model):
    table = md.embedding_table(tiny_model)
    q = md.slot_query("taxi-destination", tiny_model).data
    ids = tiny_model.vocab.encode(["taxi", "destination"])
    np.testing.assert_allclose(q, table.data[ids].mean(axis=0), atol=1e-15)


def test_slot_query_multi_token_name(tiny_corpus):
    catalog = cp.SlotCatalog([cp.SlotSpec("restaurant", "price range")])
    vocab = cp.build_vocab(cp.Corpus(tiny_corpus.dialogues, catalog))
    model = md.DstModel(ModelConfig(d_word=8, d_char=4, hidden=8), vocab, catalog)
    model.init_params(np.random.default_rng(0))
    table = md.embedding_table(model)
    ids = vocab.encode(["restaurant", "price", "range"])
    expect = table.data[ids].mean(axis=0)
    np.testing.assert_allclose(md.slot_query("restaurant-price range", model).data,
                               expect, atol=1e-15)


def test_slot_query_unknown_slot(tiny_model):
    with pytest.raises(KeyError):
        md.slot_query("spaceship-fuel", tiny_model)


# ---------------------------------------------------------------------------
# init_decoder

def agg_and_trade_pair(corpus, seed=5):
    agg = make_model(corpus, seed=seed, variant="agg")
    trade = make_model(corpus, seed=seed, variant="trade")
    return agg, trade


def test_init_decoder_degenerate_single_token(tiny_corpus):
    agg, trade = agg_and_trade_pair(tiny_corpus)
    enc_a, table_a, _ = encode_history(agg, ["hello"])
    enc_t, table_t, _ = encode_history(trade, ["hello"])
    q = md.slot_query("taxi-destination", agg, table_a)
    h0_a, alpha = md.init_decoder(enc_a, q, agg)
    h0_t, none_alpha = md.init_decoder(enc_t, md.slot_query("taxi-destination", trade, table_t), trade)
    np.testing.assert_allclose(alpha.data, [1.0], atol=1e-12)
    assert none_alpha is None
    np.testing.assert_allclose(h0_a.data, h0_t.data, atol=1e-12)


def test_init_decoder_identical_states_give_uniform_attention(tiny_model):
    D = tiny_model.config.d_hdd
    row = np.random.default_rng(0).standard_normal(D)
    enc = md.EncodedHistory(
        h_tokens=Tensor(np.stack([row, row])[None, :, :]),
        h_last=Tensor(row[None, :]),
        source_ids=np.zeros((1, 2), dtype=np.intp),
        mask=np.ones((1, 2), dtype=np.intp),
        lengths=np.array([2]),
    )
    q = md.slot_query("taxi-destination", tiny_model)
    _, alpha = md.init_decoder(enc, q, tiny_model)
    np.testing.assert_allclose(alpha.data, [0.5, 0.5], atol=1e-12)


def test_init_attention_matches_formula_oracle(tiny_model):
    tokens = "book me a taxi to norwich at 18:30 please".split()
    enc, table, _ = encode_history(tiny_model, tokens)
    q = md.slot_query("taxi-destination", tiny_model, table)
    _, alpha = md.init_decoder(enc, q, tiny_model)
    scores = enc.h_tokens.data[0] @ (q.data @ tiny_model.params["attn_w"].data)
    e = np.exp(scores - scores.max())
    np.testing.assert_allclose(alpha.data, e / e.sum(), atol=1e-10, rtol=0)


def test_attention_rows_are_distributions(tiny_model):
    for text in ("one", "i need a taxi", "a much longer utterance about a hotel stay"):
        enc, table, _ = encode_history(tiny_model, text.split())
        for sid in tiny_model.catalog.sids[:3]:
            _, alpha = md.init_decoder(enc, md.slot_query(sid, tiny_model, table), tiny_model)
            assert alpha.shape == (enc.lengths[0],)
            assert np.all(alpha.data >= 0)
            assert abs(alpha.data.sum() - 1.0) < 1e-6


def test_dot_mode_requires_matching_dims(tiny_corpus):
    with pytest.raises(ValueError):
        make_model(tiny_corpus, hidden=8, init_attention="dot")  # d_emb 16 != d_hdd 8
    m = make_model(tiny_corpus, d_word=12, d_char=4, hidden=16,
                   combine="sum", init_attention="dot")
    assert m.config.d_emb == m.config.d_hdd
    enc, table, _ = encode_history(m, "i need a taxi to ely".split())
    _, alpha = md.init_decoder(enc, md.slot_query("taxi-destination", m, table), m)
    assert abs(alpha.data.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# decode_slot

def test_decode_distributions_sum_to_one(tiny_model):
    enc, _, _ = encode_history(tiny_model, "i want to leave at 09:30".split())
    pred = md.decode_slot(enc, "taxi-leave_at", tiny_model)
    assert len(pred.step_distributions) >= 1
    for dist in pred.step_distributions:
        assert abs(dist.sum() - 1.0) < 1e-6
        assert np.all(dist >= 0)


def test_decode_copy_only_emits_source_tokens(tiny_corpus):
    model = make_model(tiny_corpus, seed=9)
    model.params["gate_b"].data[:] = -1e4  # p_gen == 0 exactly
    tokens = "take me to stansted at 10:45".split()
    enc, _, ids = encode_history(model, tokens)
    for sid in model.catalog.sids:
        pred = md.decode_slot(enc, sid, model)
        for tok in pred.tokens:
            assert model.vocab.token_to_id[tok] in ids


def test_decode_first_step_matches_numpy_oracle(tiny_corpus):
    for variant in ("agg", "trade"):
        model = make_model(tiny_corpus, seed=11, variant=variant)
        tokens = "take me to ely".split()
        ids = model.vocab.encode(tokens)
        enc, _, _ = encode_history(model, tokens)
        pred = md.decode_slot(enc, "taxi-destination", model)
        oracle = numpy_forward_oracle(model, ids, "taxi-destination")
        np.testing.assert_allclose(pred.step_distributions[0], oracle,
                                   atol=1e-10, rtol=0)


def test_decode_terminates_at_eos_or_max_len(tiny_model):
    enc, _, _ = encode_history(tiny_model, "hello there".split())
    pred = md.decode_slot(enc, "hotel-area", tiny_model)
    assert len(pred.tokens) <= tiny_model.config.max_decode_len


def test_copy_reachability(tiny_model):
    # any real source token keeps nonzero final probability while p_gen < 1
    tokens = "i am going to peterborough".split()
    enc, _, ids = encode_history(tiny_model, tokens)
    pred = md.decode_slot(enc, "taxi-destination", tiny_model)
    dist = pred.step_distributions[0]
    for i in ids:
        assert dist[i] > 0.0


def test_teacher_forced_decode_runs_gold_length(tiny_model):
    enc, _, _ = encode_history(tiny_model, "to kings lynn please".split())
    pred = md.decode_slot(enc, "taxi-destination", tiny_model, mode="teacher_forced",
                          gold=["kings", "lynn"], teacher_ratio=1.0,
                          teacher_rng=np.random.default_rng(0))
    assert len(pred.step_distributions) == 3  # two value tokens + EOS


# ---------------------------------------------------------------------------
# variants

def test_variant_isolation_parameter_shapes_identical(tiny_corpus):
    agg, trade = agg_and_trade_pair(tiny_corpus, seed=21)
    assert set(agg.params) == set(trade.params)
    for k in agg.params:
        assert agg.params[k].shape == trade.params[k].shape
        np.testing.assert_array_equal(agg.params[k].data, trade.params[k].data)


def test_variants_differ_only_through_initialization(tiny_corpus):
    agg, trade = agg_and_trade_pair(tiny_corpus, seed=22)
    enc_a, ta, _ = encode_history(agg, "i need a taxi to royston".split())
    enc_t, tt, _ = encode_history(trade, "i need a taxi to royston".split())
    np.testing.assert_array_equal(enc_a.h_tokens.data, enc_t.h_tokens.data)
    q_a = md.slot_query("taxi-destination", agg, ta)
    q_t = md.slot_query("taxi-destination", trade, tt)
    np.testing.assert_array_equal(q_a.data, q_t.data)
    h0_a, _ = md.init_decoder(enc_a, q_a, agg)
    h0_t, _ = md.init_decoder(enc_t, q_t, trade)
    assert not np.allclose(h0_a.data, h0_t.data)


# ---------------------------------------------------------------------------
# predict_state

def test_untrained_model_returns_valid_state(tiny_model, tiny_corpus):
    d = tiny_corpus.dialogues[0]
    state = md.predict_state(d, 1, tiny_model)
    assert state.turn == 1
    for sid, toks in state.assignments.items():
        assert sid in tiny_model.catalog
        assert isinstance(toks, list) and toks
        assert all(isinstance(t, str) for t in toks)


def test_predict_state_encodes_once_per_turn(tiny_model, tiny_corpus, monkeypatch):
    calls = {"n": 0}
    original = md.encode_batch

    def counting(*args, **kw):
        calls["n"] += 1
        return original(*args, **kw)

    monkeypatch.setattr(md, "encode_batch", counting)
    d = tiny_corpus.dialogues[0]
    md.predict_state(d, d.n_turns, tiny_model)
    assert calls["n"] == 1


def test_predict_values_batch_agrees_with_predict_state(tiny_model, tiny_corpus):
    d = tiny_corpus.dialogues[1]
    histories = [cp.build_history(d, j) for j in range(1, d.n_turns + 1)]
    batch = md.predict_values_batch(tiny_model, histories)
    for j in range(1, d.n_turns + 1):
        single = md.predict_state(d, j, tiny_model)
        assert batch[j - 1] == single.assignments


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip(tiny_model, tmp_path):
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(tiny_model, path)
    loaded = md.load_checkpoint(path)
    assert loaded.config == tiny_model.config
    assert loaded.vocab.id_to_token == tiny_model.vocab.id_to_token
    assert loaded.catalog.sids == tiny_model.catalog.sids
    for k in tiny_model.params:
        np.testing.assert_array_equal(loaded.params[k].data, tiny_model.params[k].data)


def test_checkpoint_bytes_deterministic(tiny_model, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    md.save_checkpoint(tiny_model, a)
    md.save_checkpoint(tiny_model, b)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_round_trip_preserves_predictions(tiny_model, tiny_corpus, tmp_path):
    path = tmp_path / "model.ckpt"
    md.save_checkpoint(tiny_model, path)
    loaded = md.load_checkpoint(path)
    d = tiny_corpus.dialogues[2]
    assert md.predict_state(d, d.n_turns, loaded).assignments == \
        md.predict_state(d, d.n_turns, tiny_model).assignments


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        md.load_checkpoint(path)


def test_f32_build_option(tiny_corpus):
    model = make_model(tiny_corpus, dtype="f32")
    assert model.params["word_emb"].dtype == np.float32
    enc, _, _ = encode_history(model, "i need a taxi".split())
    assert enc.h_tokens.dtype == np.float32
    pred = md.decode_slot(enc, "taxi-destination", model)
    assert pred.step_distributions[0].dtype == np.float32


def test_load_word_vectors(tiny_model, tmp_path, tiny_corpus):
    model = make_model(tiny_corpus, seed=13)
    d_w = model.config.d_word
    vec = np.arange(d_w) / 10.0
    path = tmp_path / "vecs.txt"
    path.write_text("taxi " + " ".join(str(x) for x in vec) + "\n"
                    "unknowntoken " + " ".join("0" for _ in range(d_w)) + "\n")
    n = model.load_word_vectors(path)
    assert n == 1
    np.testing.assert_allclose(
        model.params["word_emb"].data[model.vocab.token_to_id["taxi"]], vec)
