"""Output class set and the record <-> token-sequence codec.

Target layout for a record (tags precede the word they label)::

    <sop> [name_wife] m a r i a ␣ f i l l a <eol> ... <eop>
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .records import Record, TaggedWord

PAD, SOP, EOL, EOP = "<pad>", "<sop>", "<eol>", "<eop>"
MARKERS = (PAD, SOP, EOL, EOP)
SCHEMES = ("joint", "separate")


class VocabError(ValueError):
    pass


def joint_tag(category: str, person: str) -> str:
    return f"[{category}_{person}]"


def single_tag(name: str) -> str:
    return f"[{name}]"


@dataclass(frozen=True)
class Vocab:
    scheme: str
    labels: tuple[str, ...]
    charset: str
    categories: tuple[str, ...] = ()
    persons: tuple[str, ...] = ()
    pairs: tuple[tuple[str, str], ...] = ()
    index: dict[str, int] = field(init=False, repr=False, compare=False)
    # tag label -> (kind, value); kind is "joint", "category" or "person"
    tag_info: dict[str, tuple[str, object]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise VocabError(f"unknown tagging scheme {self.scheme!r}")
        index: dict[str, int] = {}
        for i, lab in enumerate(self.labels):
            if lab in index:
                raise VocabError(f"duplicate label {lab!r}")
            index[lab] = i
        if self.labels[:4] != MARKERS:
            raise VocabError("labels must start with <pad>, <sop>, <eol>, <eop>")
        info: dict[str, tuple[str, object]] = {}
        if self.scheme == "joint":
            for c, p in self.pairs:
                info[joint_tag(c, p)] = ("joint", (c, p))
        else:
            for c in self.categories:
                info[single_tag(c)] = ("category", c)
            for p in self.persons:
                info[single_tag(p)] = ("person", p)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "tag_info", info)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def nb_class(self) -> int:
        return len(self.labels)

    @property
    def pad(self) -> int:
        return 0

    @property
    def sop(self) -> int:
        return 1

    @property
    def eol(self) -> int:
        return 2

    @property
    def eop(self) -> int:
        return 3

    @property
    def space(self) -> int | None:
        return self.index.get(" ")

    def is_tag(self, idx: int) -> bool:
        return self.labels[idx] in self.tag_info

    def tag_indices(self) -> list[int]:
        return [self.index[t] for t in self.tag_info]

    def to_json(self) -> str:
        return json.dumps(
            {
                "scheme": self.scheme,
                "labels": list(self.labels),
                "charset": self.charset,
                "categories": list(self.categories),
                "persons": list(self.persons),
                "pairs": [list(p) for p in self.pairs],
            },
            sort_keys=True,
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        d = json.loads(text)
        return cls(
            d["scheme"],
            tuple(d["labels"]),
            d["charset"],
            tuple(d["categories"]),
            tuple(d["persons"]),
            tuple((c, p) for c, p in d["pairs"]),
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def build_vocab(
    scheme: str,
    charset: str,
    categories: Sequence[str] = (),
    persons: Sequence[str] = (),
    observed_pairs: Iterable[tuple[str, str]] = (),
) -> Vocab:
    if not charset:
        raise VocabError("empty charset")
    if len(set(charset)) != len(charset):
        raise VocabError("duplicate characters in charset")
    labels = list(MARKERS) + list(charset)
    pairs: tuple[tuple[str, str], ...] = ()
    if scheme == "joint":
        pairs = tuple(dict.fromkeys((c, p) for c, p in observed_pairs))
        for c, p in pairs:
            if c not in categories or p not in persons:
                raise VocabError(f"pair ({c}, {p}) not within declared categories/persons")
        labels += [joint_tag(c, p) for c, p in pairs]
    elif scheme == "separate":
        labels += [single_tag(c) for c in categories] + [single_tag(p) for p in persons]
    else:
        raise VocabError(f"unknown tagging scheme {scheme!r}")
    return Vocab(scheme, tuple(labels), charset, tuple(categories), tuple(persons), pairs)


def encode_target(rec: Record, v: Vocab, include_tags: bool = True) -> list[int]:
    tokens = [v.sop]
    for li, line in enumerate(rec.lines):
        if li:
            tokens.append(v.eol)
        for wi, word in enumerate(line):
            if wi:
                if v.space is None:
                    raise VocabError("vocabulary has no space character")
                tokens.append(v.space)
            if include_tags and word.is_entity:
                if v.scheme == "joint":
                    tag = joint_tag(word.category, word.person)
                    if tag not in v.index:
                        raise VocabError(f"no class for entity pair {tag}")
                    tokens.append(v.index[tag])
                else:
                    for t in (single_tag(word.category), single_tag(word.person)):
                        if t not in v.index:
                            raise VocabError(f"no class for tag {t}")
                        tokens.append(v.index[t])
            for ch in word.text:
                try:
                    tokens.append(v.index[ch])
                except KeyError:
                    raise VocabError(f"character {ch!r} not in vocabulary") from None
    tokens.append(v.eop)
    return tokens


@dataclass
class Diagnostics:
    orphan_tags: int = 0
    duplicate_person: int = 0
    incomplete_tags: int = 0
    unexpected_tokens: int = 0
    missing_sop: bool = False
    missing_eop: bool = False

    @property
    def total(self) -> int:
        return (
            self.orphan_tags
            + self.duplicate_person
            + self.incomplete_tags
            + self.unexpected_tokens
            + int(self.missing_sop)
            + int(self.missing_eop)
        )

    def as_dict(self) -> dict:
        return {
            "orphan_tags": self.orphan_tags,
            "duplicate_person": self.duplicate_person,
            "incomplete_tags": self.incomplete_tags,
            "unexpected_tokens": self.unexpected_tokens,
            "missing_sop": self.missing_sop,
            "missing_eop": self.missing_eop,
        }


def decode_target(tokens: Sequence[int], v: Vocab, record_id: str = "") -> tuple[Record, Diagnostics]:
    """Parse a (possibly malformed) token sequence back into a record."""
    diag = Diagnostics()
    for t in tokens:
        if not 0 <= int(t) < v.nb_class:
            raise VocabError(f"class index {t} out of range for {v.nb_class} classes")
    toks = [int(t) for t in tokens]
    pos = 0
    if toks and toks[0] == v.sop:
        pos = 1
    else:
        diag.missing_sop = True

    lines: list[list[TaggedWord]] = []
    line: list[TaggedWord] = []
    chars: list[str] = []
    category: str | None = None
    person: str | None = None
    held = 0  # tag tokens waiting for their word

    def flush_tags() -> None:
        nonlocal category, person, held
        diag.orphan_tags += held
        category = person = None
        held = 0

    def end_word() -> None:
        nonlocal category, person, held
        if not chars:
            flush_tags()
            return
        c, p = category, person
        if (c is None) != (p is None):
            diag.incomplete_tags += 1
            c = p = None
        line.append(TaggedWord("".join(chars), c, p))
        chars.clear()
        category = person = None
        held = 0

    def end_line() -> None:
        end_word()
        if line:
            lines.append(list(line))
        line.clear()

    finished = False
    for t in toks[pos:]:
        if t == v.eop:
            finished = True
            break
        label = v.labels[t]
        info = v.tag_info.get(label)
        if info is not None:
            if chars:
                # a tag in the middle of a word starts the next word
                end_word()
            kind, value = info
            if kind == "joint":
                if held:
                    diag.orphan_tags += held
                    held = 0
                category, person = value  # type: ignore[misc]
            elif kind == "category":
                if category is not None:
                    diag.orphan_tags += 1
                    held -= 1
                category = value  # type: ignore[assignment]
            else:
                if person is not None:
                    diag.duplicate_person += 1
                    held -= 1
                person = value  # type: ignore[assignment]
            held += 1
        elif t == v.eol:
            end_line()
        elif t == v.space:
            end_word()
        elif t in (v.pad, v.sop):
            diag.unexpected_tokens += 1
        else:
            chars.append(label)
    if not finished:
        diag.missing_eop = True
    end_line()
    return Record.from_lines(record_id, lines), diag


def parse_entities(rec: Record) -> list[tuple[str, str, str]]:
    return [(w.text, w.category, w.person) for w in rec.words() if w.is_entity]  # type: ignore[misc]


def strip_tags(tokens: Sequence[int], v: Vocab) -> list[int]:
    tags = set(v.tag_indices())
    return [t for t in tokens if t not in tags]
