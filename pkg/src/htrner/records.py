"""Annotation types shared by every stage: tagged words, records, gray images,
and the JSONL manifest schema they are stored in."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

FORBIDDEN_WORD_CHARS = frozenset(" \t\n\r[]<>")


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class TaggedWord:
    text: str
    category: str | None = None
    person: str | None = None

    @property
    def is_entity(self) -> bool:
        return self.category is not None

    def check(self) -> None:
        if not self.text:
            raise RecordError("empty word")
        bad = FORBIDDEN_WORD_CHARS.intersection(self.text)
        if bad:
            raise RecordError(f"word {self.text!r} contains {sorted(bad)}")
        if (self.category is None) != (self.person is None):
            raise RecordError(
                f"word {self.text!r}: category and person must be set together"
            )


@dataclass(frozen=True)
class Record:
    """One annotated block of text lines.

    Decoded model output may be empty (no lines); generated ground truth is
    expected to pass :meth:`check`.
    """

    id: str
    lines: tuple[tuple[TaggedWord, ...], ...]

    @classmethod
    def from_lines(cls, id: str, lines: Iterable[Iterable[TaggedWord]]) -> "Record":
        return cls(id, tuple(tuple(line) for line in lines))

    @property
    def L(self) -> int:
        return len(self.lines)

    @property
    def N(self) -> int:
        return sum(len(line) for line in self.lines)

    @property
    def M(self) -> int:
        return sum(w.is_entity for w in self.words())

    def words(self) -> Iterator[TaggedWord]:
        for line in self.lines:
            yield from line

    def text(self, line_sep: str = "\n") -> str:
        """Plain transcription with tags stripped."""
        return line_sep.join(" ".join(w.text for w in line) for line in self.lines)

    def check(self) -> None:
        if self.L < 1:
            raise RecordError(f"record {self.id!r} has no lines")
        for i, line in enumerate(self.lines):
            if not line:
                raise RecordError(f"record {self.id!r}: line {i} is empty")
            for w in line:
                w.check()

    def to_json_lines(self) -> list[dict]:
        return [
            {"words": [{"t": w.text, "c": w.category, "p": w.person} for w in line]}
            for line in self.lines
        ]

    @classmethod
    def from_json_lines(cls, id: str, lines: list[dict]) -> "Record":
        return cls.from_lines(
            id,
            (
                (TaggedWord(w["t"], w.get("c"), w.get("p")) for w in line["words"])
                for line in lines
            ),
        )


@dataclass
class GrayImage:
    """8-bit grayscale raster; 0 is ink, 255 is background.

    ``line_boxes`` holds one ``(y_top, y_bottom)`` half-open row band per
    rendered line.
    """

    pixels: np.ndarray
    line_boxes: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 2:
            raise ValueError("pixels must be a 2-D uint8 array")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.line_boxes == other.line_boxes and np.array_equal(
            self.pixels, other.pixels
        )


# --- manifest -------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRow:
    record: Record
    image: str
    split: str
    line_boxes: tuple[tuple[int, int], ...] | None = None

    def to_json(self) -> str:
        row = {
            "id": self.record.id,
            "image": self.image,
            "lines": self.record.to_json_lines(),
            "split": self.split,
        }
        if self.line_boxes is not None:
            row["line_boxes"] = [list(b) for b in self.line_boxes]
        return json.dumps(row, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ManifestRow":
        row = json.loads(text)
        try:
            rec = Record.from_json_lines(row["id"], row["lines"])
            boxes = row.get("line_boxes")
            return cls(
                rec,
                row["image"],
                row["split"],
                None if boxes is None else tuple((int(a), int(b)) for a, b in boxes),
            )
        except (KeyError, TypeError) as exc:
            raise RecordError(f"malformed manifest row: {exc}") from exc


def read_manifest(path: str | Path, split: str | None = None) -> list[ManifestRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = ManifestRow.from_json(line)
                if split is None or row.split == split:
                    rows.append(row)
    return rows


def write_manifest(path: str | Path, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(row.to_json() + "\n")
