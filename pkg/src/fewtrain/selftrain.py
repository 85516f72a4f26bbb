"""Teacher-student self-training over a frozen encoder.

One run is: prompt fine-tune the teacher tunables on the few-shot labeled
set, then for each session re-initialize the student adapter, train the
student on teacher pseudo-labels (KD warmup first, re-weighted steps
after), fine-tune the student on the labeled set, and promote it to
teacher. The shared encoder never changes; only adapters and LM heads do.

The labeled set sits behind an access counter so tests can audit that
warmup steps never read labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .adapter import AdapterConfig, TunableParams, init_adapters
from .encoder import EncoderParams, fingerprint, init_lm_head
from .errors import ConfigError, InputError
from .optim import AdamW
from .prompting import PromptModel, Verbalizer, one_hot
from .reweight import (PseudoBatch, ReweightConfig, meta_weights,
                       reweighted_step, to_weights)

MODES = ("prompt_fn", "promptst", "list")
PROBE_SIZE = 64


@dataclass(frozen=True)
class SelfTrainConfig:
    sessions: int = 3              # M
    student_steps: int = 200       # T
    warmup_steps: int = 120        # T_warm, 60% of T
    unlabeled_batch: int = 16
    labeled_ft_epochs: int = 50
    labeled_batch: int = 4
    fn_lr: float = 1e-3            # labeled fine-tuning, from-scratch scale
    st_lr: float = 1e-3            # student steps, from-scratch scale
    seed: int = 1
    reweight: ReweightConfig | None = None

    def __post_init__(self):
        if self.sessions < 0 or self.student_steps < 1:
            raise ConfigError("sessions must be >= 0, student_steps >= 1")
        if not 0 <= self.warmup_steps <= self.student_steps:
            raise ConfigError("warmup_steps must lie in [0, student_steps]")
        if min(self.unlabeled_batch, self.labeled_batch,
               self.labeled_ft_epochs) < 1:
            raise ConfigError("batch sizes and epochs must be positive")
        if self.fn_lr <= 0 or self.st_lr <= 0:
            raise ConfigError("learning rates must be positive")

    def resolved_reweight(self) -> ReweightConfig:
        # the virtual step size defaults to the self-training rate
        return self.reweight or ReweightConfig(virtual_lr=self.st_lr)


class LabeledSet:
    """Few-shot labeled cloze instances behind an access counter."""

    def __init__(self, instances):
        instances = tuple(instances)
        if any(inst.gold is None for inst in instances):
            raise InputError("labeled set requires gold labels")
        self._instances = instances
        self.accesses = 0

    def __len__(self) -> int:
        return len(self._instances)

    def all(self):
        self.accesses += 1
        return list(self._instances)

    def sample(self, rng: np.random.Generator, size: int):
        self.accesses += 1
        size = min(size, len(self._instances))
        idx = rng.choice(len(self._instances), size=size, replace=False)
        return [self._instances[i] for i in idx]

    def epoch_batches(self, rng: np.random.Generator, batch_size: int):
        self.accesses += 1
        order = rng.permutation(len(self._instances))
        for start in range(0, len(order), batch_size):
            yield [self._instances[i] for i in order[start:start + batch_size]]


@dataclass
class TrainData:
    labeled: LabeledSet
    unlabeled: list
    test: list


@dataclass
class RoleParams:
    teacher: TunableParams
    student: TunableParams | None
    shared: EncoderParams


@dataclass
class SessionRecord:
    session: int
    phase: str
    kl_probe_start: float | None
    kl_probe_end: float | None
    zero_weight_frac: float | None
    ft_loss: float | None
    eval_acc: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunResult:
    teacher: TunableParams
    model: PromptModel
    records: list[SessionRecord]
    encoder_hash_before: str
    encoder_hash_after: str


def session_seed(seed: int, session: int) -> int:
    return seed ^ session


def finetune_labeled(model: PromptModel, labeled: LabeledSet, epochs: int,
                     lr: float, rng: np.random.Generator,
                     batch_size: int = 4) -> float | None:
    """Prompt fine-tuning with cross entropy on the label-word probabilities.

    Returns the mean loss of the final epoch (None when epochs == 0).
    """
    opt = AdamW(model.tunable.tensors(), lr=lr)
    last = None
    n_labels = model.verbalizer.n_labels
    for _ in range(epochs):
        losses = []
        for batch in labeled.epoch_batches(rng, batch_size):
            targets = one_hot([inst.gold for inst in batch], n_labels)
            loss = dc.mean(model.loss_rows(batch, targets))
            opt.zero_grad()
            dc.backward(loss)
            opt.step()
            losses.append(loss.item())
        last = float(np.mean(losses))
    return last


def pseudo_label(teacher: PromptModel, instances) -> PseudoBatch:
    """Soft teacher distributions for a batch of unlabeled instances."""
    with dc.no_grad():
        dists = teacher.probs(instances).data
    return PseudoBatch(instances=list(instances), teacher_dists=dists)


def kd_warmup_step(student: PromptModel, teacher: PromptModel, instances,
                   optimizer, teacher_probs: np.ndarray | None = None) -> float:
    """One step on mean KL(teacher || student); the teacher is untouched.

    Pass teacher_probs to reuse distributions already inferred for the batch.
    """
    if teacher_probs is None:
        with dc.no_grad():
            teacher_probs = teacher.probs(instances).data
    student_probs = student.probs(instances)
    loss = dc.mean(dc.kl_divergence(dc.Tensor(teacher_probs), student_probs))
    optimizer.zero_grad()
    dc.backward(loss)
    optimizer.step()
    return loss.item()


def probe_kl(student: PromptModel, teacher: PromptModel, instances) -> float:
    with dc.no_grad():
        t = teacher.probs(instances)
        s = student.probs(instances)
        return dc.mean(dc.kl_divergence(t, s)).item()


def _sample_unlabeled(rng: np.random.Generator, unlabeled, size: int):
    size = min(size, len(unlabeled))
    idx = rng.choice(len(unlabeled), size=size, replace=False)
    return [unlabeled[i] for i in idx]


def init_student(session: int, teacher: TunableParams,
                 adapter_cfg: AdapterConfig, enc_cfg,
                 cfg: SelfTrainConfig) -> TunableParams:
    """Fresh student tunables for a session: adapter re-initialized from
    (seed, session), LM head copied from the current teacher."""
    return TunableParams(
        adapters=init_adapters(adapter_cfg, enc_cfg,
                               seed=session_seed(cfg.seed, session)),
        lm_head=teacher.lm_head.copy())


def run_session(session: int, mode: str, roles: RoleParams,
                adapter_cfg: AdapterConfig, cfg: SelfTrainConfig,
                data: TrainData, verbalizer: Verbalizer, pad_id: int,
                rng: np.random.Generator, probe,
                on_student_init=None) -> tuple[RoleParams, SessionRecord]:
    """One self-training session; returns roles with the promoted teacher."""
    enc_cfg = roles.shared.config
    student_tunable = init_student(session, roles.teacher, adapter_cfg,
                                   enc_cfg, cfg)
    if on_student_init is not None:
        on_student_init(session, student_tunable)
    teacher_model = PromptModel(roles.shared, roles.teacher, verbalizer,
                                pad_id=pad_id)
    student_model = PromptModel(roles.shared, student_tunable, verbalizer,
                                pad_id=pad_id)

    kl_start = probe_kl(student_model, teacher_model, probe) if probe else None
    rw_cfg = cfg.resolved_reweight()
    opt = AdamW(student_tunable.tensors(), lr=cfg.st_lr)
    zero_fracs = []
    warmup = cfg.warmup_steps if mode == "list" else 0
    kl_end = kl_start if warmup else None

    for step in range(cfg.student_steps):
        batch = _sample_unlabeled(rng, data.unlabeled, cfg.unlabeled_batch)
        pseudo = pseudo_label(teacher_model, batch)
        if mode == "list" and step < warmup:
            kl = kd_warmup_step(student_model, teacher_model, batch, opt,
                                teacher_probs=pseudo.teacher_dists)
            if step == warmup - 1:
                kl_end = probe_kl(student_model, teacher_model, probe) \
                    if probe else kl
        elif mode == "list":
            val_batch = data.labeled.sample(rng, rw_cfg.val_batch_size)
            u = meta_weights(pseudo, val_batch, student_model, rw_cfg)
            weights = to_weights(u, rw_cfg)
            reweighted_step(pseudo, weights, student_model, opt)
            zero_fracs.append(float(np.mean(weights == 0.0)))
        else:  # plain self-training on soft pseudo-labels
            loss = dc.mean(student_model.loss_rows(pseudo.instances,
                                                   pseudo.teacher_dists))
            opt.zero_grad()
            dc.backward(loss)
            opt.step()

    ft_loss = finetune_labeled(student_model, data.labeled,
                               cfg.labeled_ft_epochs, cfg.fn_lr, rng,
                               batch_size=cfg.labeled_batch)
    promoted = student_tunable.clone()
    new_roles = RoleParams(teacher=promoted, student=student_tunable,
                           shared=roles.shared)
    eval_model = PromptModel(roles.shared, promoted, verbalizer, pad_id=pad_id)
    record = SessionRecord(
        session=session, phase=mode,
        kl_probe_start=kl_start, kl_probe_end=kl_end,
        zero_weight_frac=float(np.mean(zero_fracs)) if zero_fracs else None,
        ft_loss=ft_loss, eval_acc=eval_model.accuracy(data.test))
    return new_roles, record


def run(mode: str, enc_params: EncoderParams, adapter_cfg: AdapterConfig,
        cfg: SelfTrainConfig, data: TrainData, verbalizer: Verbalizer,
        pad_id: int = 0, on_student_init=None) -> RunResult:
    """Full training run in one of the three modes.

    prompt_fn: teacher fine-tuning only (sessions ignored).
    promptst:  self-training on soft pseudo-labels, no warmup/re-weighting.
    list:      KD warmup then meta re-weighted training, per session.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if mode == "list" and cfg.warmup_steps < 1:
        raise ConfigError("list mode requires warmup_steps > 0")
    if not data.test or not len(data.labeled):
        raise ConfigError("need labeled and test data")
    if mode != "prompt_fn" and not data.unlabeled:
        raise ConfigError(f"{mode} mode needs unlabeled data")

    hash_before = fingerprint(enc_params)
    rng = np.random.default_rng([cfg.seed, 0xF3])
    enc_cfg = enc_params.config
    teacher = TunableParams(
        adapters=init_adapters(adapter_cfg, enc_cfg,
                               seed=session_seed(cfg.seed, 0)),
        lm_head=init_lm_head(enc_cfg, seed=[cfg.seed, 0x1D]))
    roles = RoleParams(teacher=teacher, student=None, shared=enc_params)
    teacher_model = PromptModel(enc_params, teacher, verbalizer, pad_id=pad_id)

    ft_loss = finetune_labeled(teacher_model, data.labeled,
                               cfg.labeled_ft_epochs, cfg.fn_lr, rng,
                               batch_size=cfg.labeled_batch)
    records = [SessionRecord(session=0, phase="prompt_fn",
                             kl_probe_start=None, kl_probe_end=None,
                             zero_weight_frac=None, ft_loss=ft_loss,
                             eval_acc=teacher_model.accuracy(data.test))]

    if mode != "prompt_fn":
        probe = data.unlabeled[:PROBE_SIZE]
        for session in range(1, cfg.sessions + 1):
            roles, record = run_session(session, mode, roles, adapter_cfg,
                                        cfg, data, verbalizer, pad_id, rng,
                                        probe, on_student_init=on_student_init)
            records.append(record)

    final_model = PromptModel(enc_params, roles.teacher, verbalizer,
                              pad_id=pad_id)
    return RunResult(teacher=roles.teacher, model=final_model,
                     records=records, encoder_hash_before=hash_before,
                     encoder_hash_after=fingerprint(enc_params))
