"""Binary adapter checkpoints.

Layout: magic, format version, a JSON header (encoder fingerprint, adapter
config, placement order, shapes), then the raw little-endian float64
payload for every adapter tensor in placement order followed by the LM
head. Round trips are bit-exact; loading verifies the byte budget and the
encoder fingerprint.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .adapter import AdapterConfig, AdapterLayer, InsertionPoint, TunableParams
from .diffcore import Tensor
from .encoder import EncoderParams, fingerprint
from .errors import CheckpointError

MAGIC = b"FTAD"
FORMAT_VERSION = 1


def _ordered_points(tunable: TunableParams) -> list[InsertionPoint]:
    return sorted(tunable.adapters, key=lambda p: p.sort_key)


def save_checkpoint(path, tunable: TunableParams, enc_params: EncoderParams,
                    adapter_cfg: AdapterConfig, run_seed: int | None = None) -> None:
    points = _ordered_points(tunable)
    header = {
        "format_version": FORMAT_VERSION,
        "encoder_fingerprint": fingerprint(enc_params),
        "adapter_config": {
            "bottleneck_dim": adapter_cfg.bottleneck_dim,
            "init_noise": adapter_cfg.init_noise,
            "noise_is_std": adapter_cfg.noise_is_std,
        },
        "placements": [p.label() for p in points],
        "shapes": {p.label(): [list(t.data.shape)
                               for t in tunable.adapters[p].tensors()]
                   for p in points},
        "lm_head_shape": list(tunable.lm_head.data.shape),
        "run_seed": run_seed,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    payload = bytearray()
    for p in points:
        for t in tunable.adapters[p].tensors():
            payload += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    payload += np.ascontiguousarray(tunable.lm_head.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def read_header(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError("not an adapter checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + header_len])
    except json.JSONDecodeError as e:
        raise CheckpointError("corrupt checkpoint header") from e
    return header


def load_checkpoint(path, enc_params: EncoderParams) -> tuple[TunableParams, dict]:
    raw = Path(path).read_bytes()
    header = read_header(path)
    if header["encoder_fingerprint"] != fingerprint(enc_params):
        raise CheckpointError("checkpoint does not match this encoder")
    _, header_len = struct.unpack("<II", raw[4:12])
    blob = raw[12 + header_len:]

    offset = 0

    def take(shape) -> Tensor:
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError("corrupt checkpoint payload length")
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=offset).reshape(shape)
        offset += nbytes
        return Tensor(arr.astype(np.float64), requires_grad=True)

    adapters = {}
    for label in header["placements"]:
        point = InsertionPoint.parse(label)
        shapes = header["shapes"][label]
        adapters[point] = AdapterLayer(*(take(tuple(s)) for s in shapes))
    lm_head = take(tuple(header["lm_head_shape"]))
    if offset != len(blob):
        raise CheckpointError("corrupt checkpoint payload length")
    return TunableParams(adapters=adapters, lm_head=lm_head), header
