"""Cloze templating and label-word classification.

A template turns raw token sequences into a single-mask cloze instance;
a verbalizer maps each class to one vocabulary token. Class probabilities
are the softmax over the label-word logits at the mask position. By
default the softmax denominator ranges over the verbalizer tokens only; a
flag widens it to the full vocabulary for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import encoder as enc
from .adapter import TunableParams
from .data import Vocabulary
from .diffcore import Tensor
from .errors import ConfigError, InputError

S1, S2, MASK_SLOT = "{S1}", "{S2}", "{MASK}"


@dataclass(frozen=True)
class PromptTemplate:
    """Token pattern with one {S1} slot, an optional {S2}, and one {MASK}."""

    pattern: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "pattern", tuple(self.pattern))
        if self.pattern.count(MASK_SLOT) != 1:
            raise ConfigError("template needs exactly one {MASK} slot")
        if self.pattern.count(S1) != 1:
            raise ConfigError("template needs exactly one {S1} slot")
        if self.pattern.count(S2) > 1:
            raise ConfigError("template allows at most one {S2} slot")

    @staticmethod
    def from_string(pattern: str) -> "PromptTemplate":
        return PromptTemplate(tuple(pattern.split()))

    @property
    def has_pair_slot(self) -> bool:
        return S2 in self.pattern

    @property
    def fixed_length(self) -> int:
        return len([t for t in self.pattern if t not in (S1, S2)])


@dataclass(frozen=True)
class ClozeInstance:
    token_ids: tuple[int, ...]
    mask_pos: int
    gold: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(self.token_ids))
        if not 0 <= self.mask_pos < len(self.token_ids):
            raise InputError("mask position outside the token sequence")


def apply_template(template: PromptTemplate, s1, s2, vocab: Vocabulary,
                   max_len: int, gold: int | None = None) -> ClozeInstance:
    """Substitute slots and encode. Overlong inputs lose the tail of S1
    first, then the tail of S2; template tokens and the mask survive."""
    s1 = list(s1)
    s2 = list(s2) if s2 is not None else None
    if template.has_pair_slot and s2 is None:
        raise InputError("template has an {S2} slot but no second sequence")
    fixed = template.fixed_length
    budget = max_len - fixed
    if budget < 0:
        raise ConfigError(f"template alone exceeds max_len {max_len}")
    total = len(s1) + (len(s2) if s2 else 0)
    overflow = total - budget
    if overflow > 0:
        cut = min(overflow, len(s1))
        s1 = s1[:len(s1) - cut]
        overflow -= cut
    if overflow > 0 and s2:
        s2 = s2[:len(s2) - overflow]

    rendered: list[str] = []
    mask_pos = -1
    for item in template.pattern:
        if item == S1:
            rendered.extend(s1)
        elif item == S2:
            rendered.extend(s2 or [])
        elif item == MASK_SLOT:
            mask_pos = len(rendered)
            rendered.append("[MASK]")
        else:
            rendered.append(item)
    return ClozeInstance(token_ids=vocab.encode(rendered), mask_pos=mask_pos,
                         gold=gold)


@dataclass(frozen=True)
class Verbalizer:
    """Injective ordered map from class labels to single vocabulary tokens."""

    labels: tuple[str, ...]
    token_ids: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "token_ids", tuple(self.token_ids))
        if len(self.labels) < 2:
            raise ConfigError("verbalizer needs at least two labels")
        if len(self.labels) != len(self.token_ids):
            raise ConfigError("labels and token ids differ in length")
        if len(set(self.token_ids)) != len(self.token_ids):
            raise ConfigError("duplicate label token in verbalizer")
        if any(not 0 <= t < self.vocab_size for t in self.token_ids):
            raise ConfigError("verbalizer token id outside the vocabulary")

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @staticmethod
    def from_mapping(mapping: dict[str, str], vocab: Vocabulary) -> "Verbalizer":
        labels = tuple(mapping)
        ids = tuple(vocab.id(tok) for tok in mapping.values())
        return Verbalizer(labels=labels, token_ids=ids, vocab_size=len(vocab))


def batch_instances(instances, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pad a list of cloze instances to a rectangular id array."""
    if not instances:
        raise InputError("empty instance batch")
    width = max(len(inst.token_ids) for inst in instances)
    tokens = np.full((len(instances), width), pad_id, dtype=np.int64)
    mask_pos = np.zeros(len(instances), dtype=np.int64)
    for i, inst in enumerate(instances):
        tokens[i, :len(inst.token_ids)] = inst.token_ids
        mask_pos[i] = inst.mask_pos
    return tokens, mask_pos


def label_logits(h_mask: Tensor, head: Tensor, verbalizer: Verbalizer) -> Tensor:
    """Logits of the verbalizer tokens only: [b, d_model] -> [b, n_labels]."""
    return dc.gather_cols(enc.lm_logits(h_mask, head),
                          np.asarray(verbalizer.token_ids))


def label_probs_from_logits(logits: Tensor) -> Tensor:
    return dc.softmax(logits, axis=-1)


def label_probs(h_mask: Tensor, head: Tensor, verbalizer: Verbalizer,
                full_vocab: bool = False) -> Tensor:
    """Class probabilities at the mask position.

    Default: softmax restricted to the verbalizer tokens (rows sum to 1).
    With full_vocab=True the softmax normalizes over the whole vocabulary
    and the label-word entries are returned without renormalization.
    """
    if full_vocab:
        full = dc.softmax(enc.lm_logits(h_mask, head), axis=-1)
        return dc.gather_cols(full, np.asarray(verbalizer.token_ids))
    return label_probs_from_logits(label_logits(h_mask, head, verbalizer))


@dataclass
class PromptModel:
    """Frozen encoder + tunable adapters/LM head behind a cloze classifier."""

    encoder_params: enc.EncoderParams
    tunable: TunableParams
    verbalizer: Verbalizer
    pad_id: int = 0
    full_vocab: bool = False

    def hidden_at_mask(self, instances, tunable: TunableParams | None = None) -> Tensor:
        tunable = tunable or self.tunable
        tokens, mask_pos = batch_instances(instances, self.pad_id)
        h, _ = enc.forward(self.encoder_params, tunable.adapters, tokens,
                           mask_pos, pad_id=self.pad_id)
        return h

    def logits(self, instances, tunable: TunableParams | None = None) -> Tensor:
        tunable = tunable or self.tunable
        return label_logits(self.hidden_at_mask(instances, tunable),
                            tunable.lm_head, self.verbalizer)

    def loss_rows(self, instances, targets, tunable: TunableParams | None = None) -> Tensor:
        """Per-example cross entropy of the classifier; [n, L] soft targets."""
        tunable = tunable or self.tunable
        targets = dc.as_tensor(targets)
        if self.full_vocab:
            full = enc.lm_logits(self.hidden_at_mask(instances, tunable),
                                 tunable.lm_head)
            ids = np.asarray(self.verbalizer.token_ids)
            spread = np.zeros((targets.shape[0], full.shape[-1]))
            spread[:, ids] = targets.data
            return dc.cross_entropy_rows(full, dc.Tensor(spread))
        return dc.cross_entropy_rows(self.logits(instances, tunable), targets)

    def probs(self, instances, tunable: TunableParams | None = None) -> Tensor:
        tunable = tunable or self.tunable
        return label_probs(self.hidden_at_mask(instances, tunable),
                           tunable.lm_head, self.verbalizer, self.full_vocab)

    def predict(self, instances) -> np.ndarray:
        with dc.no_grad():
            return np.argmax(self.probs(instances).data, axis=-1)

    def accuracy(self, instances, batch: int = 64) -> float:
        golds = np.array([inst.gold for inst in instances])
        if np.any(golds == None):  # noqa: E711  (mixed None check)
            raise InputError("accuracy needs gold labels on every instance")
        hits = 0
        for start in range(0, len(instances), batch):
            chunk = instances[start:start + batch]
            hits += int(np.sum(self.predict(chunk) == golds[start:start + len(chunk)]))
        return hits / len(instances)


def one_hot(labels, n_labels: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, n_labels))
    out[np.arange(labels.size), labels] = 1.0
    return out
