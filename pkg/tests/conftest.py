import numpy as np
import pytest

from agg_dst import corpus as cp
from agg_dst import synth
from agg_dst.model import DstModel, ModelConfig


def small_gen_config(n=20, seed=0, **kw):
    defaults = dict(n_dialogues=n, domains_per_dialogue=(1, 2),
                    turns_per_domain=(2, 3), chitchat_prob=0.2,
                    revision_prob=0.1, seed=seed)
    defaults.update(kw)
    return synth.GenConfig(**defaults)


def make_model(corpus, seed=0, **cfg_kw):
    defaults = dict(d_word=12, d_char=4, hidden=16, max_decode_len=6)
    defaults.update(cfg_kw)
    config = ModelConfig(**defaults)
    vocab = cp.build_vocab(corpus)
    model = DstModel(config, vocab, corpus.catalog)
    model.init_params(np.random.default_rng(seed))
    return model


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth.generate_corpus(synth.default_schema(), small_gen_config(n=20, seed=3))


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    return make_model(tiny_corpus, seed=1, variant="agg")
