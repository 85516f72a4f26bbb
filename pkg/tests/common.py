"""Shared builders for training-level tests."""

from __future__ import annotations

import numpy as np

from fewtrain import data as dt
from fewtrain.adapter import AdapterConfig, TunableParams, init_adapters
from fewtrain.encoder import EncoderConfig, init_encoder, init_lm_head
from fewtrain.prompting import (PromptModel, PromptTemplate, Verbalizer,
                                apply_template)

SMALL_ENC = EncoderConfig(vocab_size=48, max_len=16, d_model=16, n_layers=1,
                          n_heads=2, d_ff=24)
TEMPLATE = PromptTemplate.from_string("{S1} it was {MASK}")
VERBALIZER_MAP = {"neg": "LBL0", "pos": "LBL1"}


def build_task(**spec_overrides):
    spec = dt.default_task_spec(**spec_overrides)
    vocab = dt.build_vocab(spec)
    verbalizer = Verbalizer.from_mapping(VERBALIZER_MAP, vocab)
    return spec, vocab, verbalizer


def to_instances(examples, vocab, max_len, template=TEMPLATE):
    out = []
    for ex in examples:
        gold = getattr(ex, "label", None)
        out.append(apply_template(template, ex.tokens, None, vocab, max_len,
                                  gold=gold))
    return out


def build_model(seed=0, enc_cfg=SMALL_ENC, adapter_cfg=None, vocab=None,
                verbalizer=None, full_vocab=False) -> PromptModel:
    if vocab is None:
        _, vocab, verbalizer = build_task()
    adapter_cfg = adapter_cfg or AdapterConfig(bottleneck_dim=2)
    params = init_encoder(enc_cfg, seed=seed)
    tunable = TunableParams(
        adapters=init_adapters(adapter_cfg, enc_cfg, seed=seed + 1),
        lm_head=init_lm_head(enc_cfg, seed=seed + 2))
    return PromptModel(encoder_params=params, tunable=tunable,
                       verbalizer=verbalizer, pad_id=vocab.pad_id,
                       full_vocab=full_vocab)


def labeled_instances(seed, count, vocab, spec, max_len=SMALL_ENC.max_len):
    corpus = dt.generate(spec, seed=seed)
    examples = [dt.LabeledExample(r.tokens, r.gold)
                for r in corpus.records[:count]]
    return to_instances(examples, vocab, max_len)


def snapshot(tensors) -> list[np.ndarray]:
    return [t.data.copy() for t in tensors]


def identical(tensors, saved) -> bool:
    return all(np.array_equal(t.data, s) for t, s in zip(tensors, saved))
