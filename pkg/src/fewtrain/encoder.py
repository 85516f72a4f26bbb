"""Tiny pre-layer-norm transformer encoder with an LM head hook.

The encoder is meant to stay frozen: its tensors carry requires_grad=False
and a `frozen` flag, and the training loops only ever hand adapter + head
tensors to an optimizer. Adapters are applied to the output of their host
sub-module, before the residual add.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .adapter import (AdapterConfig, AdapterParams, InsertionPoint,
                      PlacementKind, adapter_forward, adapter_param_count)
from .diffcore import Tensor
from .errors import ConfigError, InputError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 64
    max_len: int = 32
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128

    def __post_init__(self):
        for name in ("vocab_size", "max_len", "d_model", "n_layers",
                     "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_ff1: Tensor
    w_ff2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.wq, self.wk, self.wv, self.wo, self.w_ff1, self.w_ff2,
                self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias)


@dataclass
class EncoderParams:
    config: EncoderConfig
    token_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]
    ln_f_gain: Tensor
    ln_f_bias: Tensor
    frozen: bool = True

    def tensors(self) -> list[Tensor]:
        out = [self.token_emb, self.pos_emb]
        for layer in self.layers:
            out.extend(layer.tensors())
        out.extend([self.ln_f_gain, self.ln_f_bias])
        return out


def init_encoder(cfg: EncoderConfig, seed: int, frozen: bool = True) -> EncoderParams:
    """Random encoder weights, deterministic per (cfg, seed)."""
    rng = np.random.default_rng(seed)
    grad = not frozen
    proj_std = 1.0 / np.sqrt(cfg.d_model)
    ff_std = 1.0 / np.sqrt(cfg.d_ff)

    def w(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=grad)

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(LayerParams(
            wq=w((cfg.d_model, cfg.d_model), proj_std),
            wk=w((cfg.d_model, cfg.d_model), proj_std),
            wv=w((cfg.d_model, cfg.d_model), proj_std),
            wo=w((cfg.d_model, cfg.d_model), proj_std),
            w_ff1=w((cfg.d_model, cfg.d_ff), proj_std),
            w_ff2=w((cfg.d_ff, cfg.d_model), ff_std),
            ln1_gain=Tensor(np.ones(cfg.d_model), requires_grad=grad),
            ln1_bias=Tensor(np.zeros(cfg.d_model), requires_grad=grad),
            ln2_gain=Tensor(np.ones(cfg.d_model), requires_grad=grad),
            ln2_bias=Tensor(np.zeros(cfg.d_model), requires_grad=grad),
        ))
    return EncoderParams(
        config=cfg,
        token_emb=w((cfg.vocab_size, cfg.d_model), 1.0),
        pos_emb=w((cfg.max_len, cfg.d_model), 1.0),
        layers=layers,
        ln_f_gain=Tensor(np.ones(cfg.d_model), requires_grad=grad),
        ln_f_bias=Tensor(np.zeros(cfg.d_model), requires_grad=grad),
        frozen=frozen,
    )


def init_lm_head(cfg: EncoderConfig, seed: int) -> Tensor:
    """Tunable LM head [d_model, vocab_size]; no bias, not weight-tied."""
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(cfg.d_model)
    return dc.parameter(rng.normal(0.0, std, size=(cfg.d_model, cfg.vocab_size)))


def forward(params: EncoderParams, adapters: AdapterParams | None,
            tokens: np.ndarray, mask_positions: np.ndarray,
            pad_id: int = 0) -> tuple[Tensor, Tensor]:
    """Run the encoder; returns (hidden at each row's mask position, all hiddens).

    tokens: int array [b, s]; mask_positions: int array [b]. Padding tokens
    are excluded from attention via an additive key mask.
    """
    cfg = params.config
    adapters = adapters or {}
    tokens = np.asarray(tokens)
    mask_positions = np.asarray(mask_positions)
    b, s = tokens.shape
    if s > cfg.max_len:
        raise InputError(f"sequence length {s} exceeds max_len {cfg.max_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError("token id out of range")
    if mask_positions.min() < 0 or mask_positions.max() >= s:
        raise InputError("mask position out of range")

    dh = cfg.d_model // cfg.n_heads
    x = dc.add(dc.embedding_lookup(params.token_emb, tokens),
               dc.broadcast_to(dc.reshape(dc.narrow(params.pos_emb, 0, 0, s),
                                          (1, s, cfg.d_model)),
                               (b, s, cfg.d_model)))
    point = InsertionPoint(PlacementKind.EMBEDDING, None)
    if point in adapters:
        x = adapter_forward(x, adapters[point])

    # additive key mask, repeated per head: [b*h, s, s]
    additive = np.where(tokens == pad_id, -1e9, 0.0)[:, None, :]
    additive = np.repeat(np.broadcast_to(additive, (b, s, s)), cfg.n_heads,
                         axis=0)
    key_mask = Tensor(additive)

    def split_heads(t: Tensor) -> Tensor:
        t = dc.reshape(t, (b, s, cfg.n_heads, dh))
        return dc.reshape(dc.permute(t, (0, 2, 1, 3)), (b * cfg.n_heads, s, dh))

    for layer_idx, w in enumerate(params.layers):
        a_in = dc.layer_norm(x, w.ln1_gain, w.ln1_bias)
        flat = dc.reshape(a_in, (b * s, cfg.d_model))
        q = split_heads(dc.reshape(dc.matmul(flat, w.wq), (b, s, cfg.d_model)))
        k = split_heads(dc.reshape(dc.matmul(flat, w.wk), (b, s, cfg.d_model)))
        v = split_heads(dc.reshape(dc.matmul(flat, w.wv), (b, s, cfg.d_model)))
        scores = dc.add(dc.scale(dc.matmul(q, dc.transpose(k)),
                                 1.0 / np.sqrt(dh)), key_mask)
        ctx = dc.matmul(dc.softmax(scores, axis=-1), v)
        ctx = dc.permute(dc.reshape(ctx, (b, cfg.n_heads, s, dh)), (0, 2, 1, 3))
        attn_out = dc.matmul(dc.reshape(ctx, (b * s, cfg.d_model)), w.wo)

        point = InsertionPoint(PlacementKind.ATTENTION, layer_idx)
        if point in adapters:
            attn_out = adapter_forward(attn_out, adapters[point])
        x = dc.add(x, dc.reshape(attn_out, (b, s, cfg.d_model)))

        f_in = dc.layer_norm(x, w.ln2_gain, w.ln2_bias)
        mid = dc.relu(dc.matmul(dc.reshape(f_in, (b * s, cfg.d_model)),
                                w.w_ff1))
        point = InsertionPoint(PlacementKind.FF_INTERMEDIATE, layer_idx)
        if point in adapters:
            mid = adapter_forward(mid, adapters[point])
        ff_out = dc.matmul(mid, w.w_ff2)
        point = InsertionPoint(PlacementKind.FF_OUTPUT, layer_idx)
        if point in adapters:
            ff_out = adapter_forward(ff_out, adapters[point])
        x = dc.add(x, dc.reshape(ff_out, (b, s, cfg.d_model)))

    x = dc.layer_norm(x, params.ln_f_gain, params.ln_f_bias)
    h_mask = dc.gather_positions(x, mask_positions)
    return h_mask, x


def lm_logits(h: Tensor, head: Tensor) -> Tensor:
    """Vocabulary logits h @ head; no bias term."""
    if h.shape[-1] != head.shape[0]:
        raise ShapeError(f"lm_logits: {h.shape} x {head.shape}")
    return dc.matmul(h, head)


def count_params(enc: EncoderParams | EncoderConfig,
                 adapters: AdapterConfig | AdapterParams | None = None) -> dict:
    """Exact parameter counts, split {encoder, adapter, head}."""
    cfg = enc.config if isinstance(enc, EncoderParams) else enc
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    per_layer = 4 * d * d + d * ff + ff * d + 4 * d
    encoder = v * d + cfg.max_len * d + cfg.n_layers * per_layer + 2 * d
    if adapters is None:
        adapter_total = 0
    elif isinstance(adapters, AdapterConfig):
        adapter_total = adapter_param_count(adapters, cfg)
    else:
        adapter_total = sum(t.size for layer in adapters.values()
                            for t in layer.tensors())
    return {"encoder": encoder, "adapter": adapter_total, "head": d * v}


def fingerprint(params: EncoderParams) -> str:
    """SHA-256 over the config and every encoder tensor, in fixed order."""
    h = hashlib.sha256()
    h.update(json.dumps(params.config.__dict__, sort_keys=True).encode())
    for t in params.tensors():
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
