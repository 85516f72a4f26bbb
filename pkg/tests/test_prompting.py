import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewtrain import data as dt
from fewtrain import diffcore as dc
from fewtrain import prompting as pr
from fewtrain.errors import ConfigError, InputError

from oracles import plain_softmax

VOCAB = dt.build_vocab(dt.default_task_spec(
    extra_tokens=("it", "was", "?", ",", "x", "y", "a", "b")))


def test_apply_template_single_sentence():
    t = pr.PromptTemplate.from_string("{S1} it was {MASK}")
    inst = pr.apply_template(t, ["a", "b"], None, VOCAB, max_len=16)
    assert inst.token_ids == VOCAB.encode(("a", "b", "it", "was", "[MASK]"))
    assert inst.mask_pos == 4
    assert inst.token_ids[inst.mask_pos] == VOCAB.mask_id


def test_apply_template_sentence_pair():
    t = pr.PromptTemplate.from_string("{S1} ? {MASK} , {S2}")
    inst = pr.apply_template(t, ["x"], ["y"], VOCAB, max_len=16)
    assert inst.token_ids == VOCAB.encode(("x", "?", "[MASK]", ",", "y"))
    assert inst.mask_pos == 2


def test_apply_template_truncates_s1_tail_first():
    t = pr.PromptTemplate.from_string("{S1} it was {MASK}")
    s1 = [f"a{i % 8}" for i in range(20)]
    inst = pr.apply_template(t, s1, None, VOCAB, max_len=10)
    assert len(inst.token_ids) == 10
    # template tokens and mask survive at the end
    assert inst.token_ids[-3:] == VOCAB.encode(("it", "was", "[MASK]"))
    assert inst.token_ids[:7] == VOCAB.encode(tuple(s1[:7]))
    assert inst.mask_pos == 9


def test_apply_template_truncates_s2_after_s1():
    t = pr.PromptTemplate.from_string("{S1} {MASK} {S2}")
    inst = pr.apply_template(t, ["a", "a"], ["b", "b", "b"], VOCAB, max_len=3)
    # S1 fully trimmed, then S2 trimmed to fit
    assert inst.token_ids == VOCAB.encode(("[MASK]", "b", "b"))
    assert inst.mask_pos == 0


def test_template_without_mask_rejected():
    with pytest.raises(ConfigError):
        pr.PromptTemplate.from_string("{S1} it was")


def test_template_without_s1_rejected():
    with pytest.raises(ConfigError):
        pr.PromptTemplate.from_string("it was {MASK}")


def test_template_pure_function():
    t = pr.PromptTemplate.from_string("{S1} it was {MASK}")
    a = pr.apply_template(t, ["a", "b"], None, VOCAB, max_len=8)
    b = pr.apply_template(t, ["a", "b"], None, VOCAB, max_len=8)
    assert a == b


def test_missing_s2_rejected():
    t = pr.PromptTemplate.from_string("{S1} {MASK} {S2}")
    with pytest.raises(InputError):
        pr.apply_template(t, ["a"], None, VOCAB, max_len=8)


# ---------------------------------------------------------------------------
# verbalizer and label probabilities


def make_verbalizer():
    return pr.Verbalizer.from_mapping({"neg": "LBL0", "pos": "LBL1"}, VOCAB)


def test_verbalizer_duplicate_tokens_rejected():
    with pytest.raises(ConfigError):
        pr.Verbalizer.from_mapping({"neg": "LBL0", "pos": "LBL0"}, VOCAB)


def test_verbalizer_single_label_rejected():
    with pytest.raises(ConfigError):
        pr.Verbalizer(labels=("x",), token_ids=(1,), vocab_size=8)


def test_equal_head_rows_give_half_half():
    v = make_verbalizer()
    rng = np.random.default_rng(0)
    head = rng.normal(size=(16, len(VOCAB)))
    head[:, v.token_ids[1]] = head[:, v.token_ids[0]]
    probs = pr.label_probs(dc.Tensor(rng.normal(size=(3, 16))),
                           dc.Tensor(head), v)
    np.testing.assert_allclose(probs.data, 0.5, atol=1e-12)


def test_zero_hidden_uniform_probs():
    v = make_verbalizer()
    head = dc.Tensor(np.random.default_rng(1).normal(size=(8, len(VOCAB))))
    probs = pr.label_probs(dc.Tensor(np.zeros((2, 8))), head, v)
    np.testing.assert_allclose(probs.data, 0.5, atol=1e-15)


def test_restricted_probs_equal_renormalized_full_softmax():
    v = make_verbalizer()
    rng = np.random.default_rng(2)
    h = dc.Tensor(rng.normal(size=(5, 12)))
    head = dc.Tensor(rng.normal(size=(12, len(VOCAB))))
    got = pr.label_probs(h, head, v).data

    full = plain_softmax(h.data @ head.data, axis=-1)
    picked = full[:, list(v.token_ids)]
    renorm = picked / picked.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(got, renorm, atol=1e-12)


def test_label_probs_rows_sum_to_one():
    v = make_verbalizer()
    rng = np.random.default_rng(3)
    probs = pr.label_probs(dc.Tensor(rng.normal(size=(64, 10)) * 3),
                           dc.Tensor(rng.normal(size=(10, len(VOCAB)))), v)
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-9)


def test_full_vocab_probs_are_unrenormalized_slice():
    v = make_verbalizer()
    rng = np.random.default_rng(4)
    h = dc.Tensor(rng.normal(size=(4, 8)))
    head = dc.Tensor(rng.normal(size=(8, len(VOCAB))))
    got = pr.label_probs(h, head, v, full_vocab=True).data
    full = plain_softmax(h.data @ head.data, axis=-1)
    np.testing.assert_allclose(got, full[:, list(v.token_ids)], atol=1e-12)
    assert np.all(got.sum(axis=-1) < 1.0)


@settings(max_examples=30)
@given(st.floats(-20, 20))
def test_constant_logit_shift_leaves_probs_unchanged(shift):
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(3, 2))
    base = pr.label_probs_from_logits(dc.Tensor(logits)).data
    shifted = pr.label_probs_from_logits(dc.Tensor(logits + shift)).data
    np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_batch_instances_pads_and_tracks_mask():
    t = pr.PromptTemplate.from_string("{S1} it was {MASK}")
    insts = [pr.apply_template(t, ["a"], None, VOCAB, 16),
             pr.apply_template(t, ["a", "b", "a"], None, VOCAB, 16)]
    tokens, mask_pos = pr.batch_instances(insts, VOCAB.pad_id)
    assert tokens.shape == (2, 6)
    assert tokens[0, 4] == VOCAB.pad_id and tokens[0, 5] == VOCAB.pad_id
    assert mask_pos.tolist() == [3, 5]


def test_one_hot():
    out = pr.one_hot([1, 0, 2], 3)
    np.testing.assert_array_equal(out, np.array([[0, 1, 0], [1, 0, 0],
                                                 [0, 0, 1]], dtype=float))
