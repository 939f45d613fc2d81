"""Inference over manifests and end-to-end scoring of checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .backbone import preprocess
from .checkpoint import Checkpoint, load_checkpoint
from .datasynth import load_image
from .metrics import ScoreReport, score_records
from .records import GrayImage, ManifestRow, Record, read_manifest
from .transformer import HTRNERModel
from .vocab import Diagnostics, Vocab, decode_target, parse_entities


@dataclass
class Prediction:
    record: Record
    diagnostics: Diagnostics
    tokens: list[int]
    truncated: bool

    def to_json(self, image: str = "", split: str = "") -> str:
        row = {
            "id": self.record.id,
            "image": image,
            "split": split,
            "lines": self.record.to_json_lines(),
            "transcription": self.record.text(),
            "entities": [list(e) for e in parse_entities(self.record)],
            "diagnostics": self.diagnostics.as_dict(),
            "truncated": self.truncated,
        }
        return json.dumps(row, ensure_ascii=False, sort_keys=True)


def load_items(rows: Sequence[ManifestRow], root: str | Path) -> list[tuple[Record, GrayImage]]:
    root = Path(root)
    return [(r.record, load_image(root / r.image, r.line_boxes)) for r in rows]


@torch.no_grad()
def predict(
    model: HTRNERModel,
    vocab: Vocab,
    images: Sequence[GrayImage],
    ids: Sequence[str] | None = None,
    batch_size: int = 8,
    max_len: int | None = None,
) -> list[Prediction]:
    model.eval()
    dtype = next(model.parameters()).dtype
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    out: list[Prediction] = []
    for lo in range(0, len(images), batch_size):
        chunk = images[lo : lo + batch_size]
        x = torch.stack([preprocess(im, model.cfg.image_h, model.cfg.image_w) for im in chunk]).to(dtype)
        seqs, truncated = model.greedy_decode(model.encode(x), vocab.sop, vocab.eop, max_len)
        for rid, seq, trunc in zip(ids[lo : lo + batch_size], seqs, truncated):
            rec, diag = decode_target(seq, vocab, rid)
            out.append(Prediction(rec, diag, seq, trunc))
    return out


def evaluate_items(
    model: HTRNERModel, vocab: Vocab, items: Sequence[tuple[Record, GrayImage]], batch_size: int = 8
) -> tuple[ScoreReport, list[Prediction]]:
    preds = predict(model, vocab, [img for _, img in items], [rec.id for rec, _ in items], batch_size)
    report = score_records((p.record, gt, p.diagnostics) for p, (gt, _) in zip(preds, items))
    return report, preds


def evaluate(
    ckpt: str | Path | Checkpoint, manifest: str | Path, split: str | None = "test", batch_size: int = 8
) -> ScoreReport:
    ck = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
    rows = read_manifest(manifest, split)
    if not rows:
        raise ValueError(f"no records in split {split!r} of {manifest}")
    items = load_items(rows, Path(manifest).parent)
    report, _ = evaluate_items(ck.build_model(), ck.vocab, items, batch_size)
    return report


def read_predictions(path: str | Path) -> dict[str, tuple[Record, Diagnostics | None]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            rec = Record.from_json_lines(row["id"], row["lines"])
            diag = None
            if "diagnostics" in row:
                diag = Diagnostics(**row["diagnostics"])
            out[row["id"]] = (rec, diag)
    return out


def score_files(pred_path: str | Path, ref_manifest: str | Path, split: str | None = None) -> ScoreReport:
    """Score a predictions JSONL against a reference manifest; missing ids score as empty."""
    preds = read_predictions(pred_path)
    refs = read_manifest(ref_manifest, split)
    items = []
    for row in refs:
        pred, diag = preds.get(row.record.id, (Record(row.record.id, ()), None))
        items.append((pred, row.record, diag))
    return score_records(items)
