"""Canonical single-file checkpoints.

Layout: an 8-byte magic, a little-endian u64 header length, a JSON header
(sorted keys), then the tensor payload as little-endian float32 in header
order. Identical state always serialises to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .transformer import HTRNERModel, ModelConfig
from .vocab import Vocab

MAGIC = b"HTRNERCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    vocab: Vocab
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_steps: dict[str, int] = field(default_factory=dict)
    cursor: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def build_model(self, dtype=torch.float32) -> HTRNERModel:
        model = HTRNERModel(ModelConfig.from_dict(self.model_config.to_dict()), self.vocab.nb_class)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}
        missing, unexpected = model.load_state_dict(state, strict=False)
        if missing or unexpected:
            raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
        return model.to(dtype).eval()

    def restore_optimizer(self, model: HTRNERModel, optimizer: torch.optim.Optimizer) -> None:
        """Load saved Adam moments into an optimizer built over ``model``'s parameters."""
        for name, p in model.named_parameters():
            if name not in self.optimizer_steps:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(self.optimizer_steps[name])),
                "exp_avg": torch.from_numpy(self.optimizer[f"exp_avg/{name}"].copy()).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(self.optimizer[f"exp_avg_sq/{name}"].copy()).to(p.dtype),
            }


def _as_f32(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy()).astype("<f4", copy=False)


def snapshot(
    model: HTRNERModel,
    vocab: Vocab,
    optimizer: torch.optim.Optimizer | None = None,
    cursor: dict | None = None,
    meta: dict | None = None,
) -> Checkpoint:
    params = {k: _as_f32(v) for k, v in model.state_dict().items()}
    opt, steps = {}, {}
    if optimizer is not None:
        for name, p in model.named_parameters():
            st = optimizer.state.get(p)
            if not st:
                continue
            opt[f"exp_avg/{name}"] = _as_f32(st["exp_avg"])
            opt[f"exp_avg_sq/{name}"] = _as_f32(st["exp_avg_sq"])
            steps[name] = int(st["step"])
    return Checkpoint(model.cfg, vocab, params, opt, steps, dict(cursor or {}), dict(meta or {}))


def to_bytes(ck: Checkpoint) -> bytes:
    tensors, chunks, offset = [], [], 0
    for section, table in (("param", ck.params), ("optim", ck.optimizer)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            raw = arr.tobytes()
            tensors.append(
                {"section": section, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            )
            chunks.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ck.model_config.to_dict(),
        "vocab": json.loads(ck.vocab.to_json()),
        "vocab_fingerprint": ck.vocab.fingerprint(),
        "optimizer_steps": {k: ck.optimizer_steps[k] for k in sorted(ck.optimizer_steps)},
        "cursor": ck.cursor,
        "meta": ck.meta,
        "tensors": tensors,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def from_bytes(data: bytes, expected_vocab: Vocab | None = None) -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(data) < 16:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {header.get('format_version')} != supported {FORMAT_VERSION}"
        )
    payload = data[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, header declares {header['payload_bytes']}")
    vocab = Vocab.from_json(json.dumps(header["vocab"]))
    if vocab.fingerprint() != header["vocab_fingerprint"]:
        raise CheckpointError("embedded vocabulary does not match its fingerprint")
    if expected_vocab is not None and expected_vocab.fingerprint() != vocab.fingerprint():
        raise CheckpointError(
            f"vocabulary fingerprint mismatch: checkpoint {vocab.fingerprint()}, expected {expected_vocab.fingerprint()}"
        )
    params, optim = {}, {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 4
        end = t["offset"] + t["nbytes"]
        if t["nbytes"] != n or end > len(payload):
            raise CheckpointError(f"tensor {t['name']!r}: payload length does not match shape {t['shape']}")
        arr = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=t["offset"]).reshape(t["shape"]).copy()
        (params if t["section"] == "param" else optim)[t["name"]] = arr
    return Checkpoint(
        ModelConfig.from_dict(header["model_config"]),
        vocab,
        params,
        optim,
        dict(header["optimizer_steps"]),
        header["cursor"],
        header["meta"],
    )


def save_checkpoint(path: str | Path, ck: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expected_vocab: Vocab | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_vocab)
