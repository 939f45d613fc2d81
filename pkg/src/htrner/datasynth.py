"""Synthetic marriage-record generator and renderer.

Records are built from slot templates (literal words plus ``{category:person}``
slots filled from per-category lexicons), wrapped into lines, and drawn with
the procedural glyphs in :mod:`htrner.glyphs`.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .glyphs import CELL_H, GLYPH_CHARS, RenderError, glyph_bitmap, max_shear
from .records import GrayImage, ManifestRow, Record, TaggedWord, write_manifest

log = logging.getLogger(__name__)

CATEGORIES = ("name", "surname", "occupation", "location", "state", "other")
PERSONS = (
    "husband",
    "wife",
    "husbands_father",
    "husbands_mother",
    "wifes_father",
    "wifes_mother",
    "other_person",
    "none",
)

LEXICONS = {
    "name": [
        "joan", "pere", "maria", "anna", "francesc", "miquel", "antoni", "jaume",
        "margarida", "elisabet", "caterina", "eulalia", "josep", "esteve", "bernat",
        "joana", "paula", "magdalena", "xavier", "zacaries", "quiteria", "kilian",
        "wilfreda", "yolanda",
    ],
    "surname": [
        "ferrer", "puig", "vila", "soler", "roca", "serra", "font", "pujol", "riera",
        "casas", "marti", "vidal", "mas", "sala", "bosch", "coll", "prats", "gualba",
    ],
    "occupation": [
        "pages", "teixidor", "sastre", "fuster", "mariner", "paraire", "botiguer",
        "corder", "moliner", "hortola", "velluter", "barber", "sabater", "blanquer",
    ],
    "location": [
        "barcelona", "badalona", "sabadell", "terrassa", "girona", "vic", "manresa",
        "reus", "mataro", "sarria", "gracia", "sants", "olot", "lleida",
    ],
    "state": ["viudo", "viuda", "donzella", "fadri"],
    "other": ["quondam", "difunt", "habitant", "defuncta"],
}

TEMPLATES = [
    "rebere de {name:husband} {surname:husband} {occupation:husband} de {location:husband}",
    "{state:husband} fill de {name:husbands_father} {surname:husbands_father} "
    "{occupation:husbands_father} y de {name:husbands_mother}",
    "ab {name:wife} {state:wife} filla de {name:wifes_father} {surname:wifes_father} "
    "{occupation:wifes_father} de {location:wifes_father}",
    "y de {name:wifes_mother} {other:wifes_mother}",
    "testimoni {name:other_person} {occupation:other_person} {other:none}",
]

_SLOT = re.compile(r"^\{([a-z_]+):([a-z_]+)\}$")


class ConfigError(ValueError):
    pass


def parse_slot(token: str) -> tuple[str, str] | None:
    m = _SLOT.match(token)
    return (m.group(1), m.group(2)) if m else None


@dataclass
class GrammarConfig:
    categories: list[str] = field(default_factory=lambda: list(CATEGORIES))
    persons: list[str] = field(default_factory=lambda: list(PERSONS))
    lexicons: dict[str, list[str]] = field(
        default_factory=lambda: {k: list(v) for k, v in LEXICONS.items()}
    )
    templates: list[str] = field(default_factory=lambda: list(TEMPLATES))
    charset: str = "abcdefghijklmnopqrstuvwxyz "
    min_words_per_line: int = 2
    max_words_per_line: int = 4
    min_lines: int = 2
    max_lines: int = 4
    min_entities: int = 2

    def template_tokens(self) -> list[list[str]]:
        return [t.split() for t in self.templates]

    def observed_pairs(self) -> list[tuple[str, str]]:
        """(category, person) pairs the templates can emit, in first-seen order."""
        seen: dict[tuple[str, str], None] = {}
        for toks in self.template_tokens():
            for tok in toks:
                slot = parse_slot(tok)
                if slot:
                    seen[slot] = None
        return list(seen)

    def validate(self) -> None:
        if not self.charset:
            raise ConfigError("empty charset")
        if not self.templates:
            raise ConfigError("no templates")
        if not 1 <= self.min_lines <= self.max_lines:
            raise ConfigError("need 1 <= min_lines <= max_lines")
        if not 1 <= self.min_words_per_line <= self.max_words_per_line:
            raise ConfigError("need 1 <= min_words_per_line <= max_words_per_line")
        chars = set(self.charset)
        referenced = set()
        for toks in self.template_tokens():
            for tok in toks:
                slot = parse_slot(tok)
                if slot is None:
                    if not set(tok) <= chars or "{" in tok:
                        raise ConfigError(f"template word {tok!r} outside charset")
                    continue
                cat, person = slot
                if cat not in self.categories:
                    raise ConfigError(f"template references undeclared category {cat!r}")
                if person not in self.persons:
                    raise ConfigError(f"template references undeclared person {person!r}")
                referenced.add(cat)
        for cat in referenced:
            words = self.lexicons.get(cat) or []
            if not words:
                raise ConfigError(f"empty lexicon for category {cat!r}")
        for cat, words in self.lexicons.items():
            for w in words:
                if not w or not set(w) <= chars or " " in w:
                    raise ConfigError(f"lexicon word {w!r} ({cat}) outside charset")


@dataclass
class RenderConfig:
    jitter: int = 1
    max_slant: float = 0.2
    thickness: tuple[int, int] = (1, 2)
    noise: float = 0.01
    char_gap: int = 2
    margin: int = 4
    line_gap: int = 4

    def validate(self) -> None:
        if not 0 <= self.jitter <= 2:
            raise ConfigError("jitter must be within [0, 2] px")
        if not 0.0 <= self.noise <= 0.02:
            raise ConfigError("noise probability must be within [0, 0.02]")
        lo, hi = self.thickness
        if not 1 <= lo <= hi <= 2:
            raise ConfigError("thickness range must lie within [1, 2]")
        if not 0.0 <= self.max_slant <= 0.5:
            raise ConfigError("max_slant must be within [0, 0.5]")

    @property
    def advance(self) -> int:
        # widest glyph bitmap plus jitter on both sides; cells never overlap
        return 9 + 2 * max_shear(self.max_slant) + 2 * self.jitter + self.char_gap

    @property
    def band_height(self) -> int:
        return CELL_H + 2 * self.jitter + self.line_gap


def generate_record(seed: int, cfg: GrammarConfig, record_id: str | None = None) -> Record:
    cfg.validate()
    rng = np.random.default_rng([seed, 0])
    templates = cfg.template_tokens()
    rid = record_id if record_id is not None else f"r{seed:06d}"
    for _ in range(100):
        n_lines = int(rng.integers(cfg.min_lines, cfg.max_lines + 1))
        counts = rng.integers(cfg.min_words_per_line, cfg.max_words_per_line + 1, n_lines)
        total = int(counts.sum())
        words: list[TaggedWord] = []
        while len(words) < total:
            for tok in templates[int(rng.integers(len(templates)))]:
                slot = parse_slot(tok)
                if slot is None:
                    words.append(TaggedWord(tok))
                else:
                    lex = cfg.lexicons[slot[0]]
                    words.append(TaggedWord(lex[int(rng.integers(len(lex)))], *slot))
        words = words[:total]
        if sum(w.is_entity for w in words) >= cfg.min_entities:
            break
    else:
        raise ConfigError(f"templates cannot yield {cfg.min_entities} entities per record")
    lines, pos = [], 0
    for c in counts:
        lines.append(words[pos : pos + int(c)])
        pos += int(c)
    rec = Record.from_lines(rid, lines)
    rec.check()
    return rec


def render_record(rec: Record, seed: int, render_cfg: RenderConfig | None = None) -> GrayImage:
    rc = render_cfg or RenderConfig()
    rc.validate()
    for w in rec.words():
        for ch in w.text:
            if ch not in GLYPH_CHARS:
                raise RenderError(f"no glyph for character {ch!r} (word {w.text!r})")
    rng = np.random.default_rng([seed, 1])
    adv = rc.advance
    line_chars = [" ".join(w.text for w in line) for line in rec.lines]
    width = 2 * rc.margin + adv * max(len(s) for s in line_chars)
    band = rc.band_height
    height = band * rec.L
    ink = np.zeros((height, width), dtype=bool)
    boxes = []
    pad = max_shear(rc.max_slant)
    for li, text in enumerate(line_chars):
        top = li * band
        for ci, ch in enumerate(text):
            if ch == " ":
                continue
            dx, dy = (rng.integers(-rc.jitter, rc.jitter + 1, 2) if rc.jitter else (0, 0))
            slant = float(rng.uniform(-rc.max_slant, rc.max_slant)) if rc.max_slant else 0.0
            thick = int(rng.integers(rc.thickness[0], rc.thickness[1] + 1))
            bmp = glyph_bitmap(ch, thick, slant)
            # centre narrower (less slanted) bitmaps in the widest cell
            x0 = rc.margin + ci * adv + rc.jitter + dx + pad - max_shear(slant)
            y0 = top + rc.line_gap // 2 + rc.jitter + dy
            ink[y0 : y0 + CELL_H, x0 : x0 + bmp.shape[1]] |= bmp
        boxes.append((top, top + band))
    if rc.noise > 0:
        flip = rng.random(ink.shape) < rc.noise
        ink ^= flip
    pixels = np.where(ink, 0, 255).astype(np.uint8)
    return GrayImage(pixels, boxes)


def extract_block(rec: Record, img: GrayImage, start_line: int, k: int) -> tuple[Record, GrayImage]:
    """Cut lines ``start_line .. start_line + k - 1`` (1-based) out of a record."""
    if not (1 <= start_line <= rec.L and 1 <= k <= rec.L - start_line + 1):
        raise IndexError(f"block (start={start_line}, k={k}) outside record of {rec.L} lines")
    if len(img.line_boxes) != rec.L:
        raise ValueError("image line boxes do not match record lines")
    lo, hi = start_line - 1, start_line - 1 + k
    y_top, y_bot = img.line_boxes[lo][0], img.line_boxes[hi - 1][1]
    sub = Record(f"{rec.id}" if k == rec.L else f"{rec.id}:{start_line}+{k}", rec.lines[lo:hi])
    boxes = [(a - y_top, b - y_top) for a, b in img.line_boxes[lo:hi]]
    return sub, GrayImage(img.pixels[y_top:y_bot].copy(), boxes)


def all_blocks(L: int) -> list[tuple[int, int]]:
    """Every contiguous (start_line, k) span of an L-line record."""
    return [(s, k) for k in range(1, L + 1) for s in range(1, L - k + 2)]


@dataclass
class DatasetConfig:
    n_records: int = 100
    seed: int = 0
    splits: dict[str, float] = field(
        default_factory=lambda: {"train": 0.8, "valid": 0.1, "test": 0.1}
    )
    grammar: GrammarConfig = field(default_factory=GrammarConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        grammar = GrammarConfig(**d.pop("grammar", {}))
        render = dict(d.pop("render", {}))
        if "thickness" in render:
            render["thickness"] = tuple(render["thickness"])
        return cls(grammar=grammar, render=RenderConfig(**render), **d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.n_records < 1:
            raise ConfigError("n_records must be positive")
        if not math.isclose(sum(self.splits.values()), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions sum to {sum(self.splits.values())}, not 1")
        if any(f < 0 for f in self.splits.values()):
            raise ConfigError("negative split fraction")
        self.grammar.validate()
        self.render.validate()


@dataclass
class DatasetManifest:
    path: Path
    rows: list[ManifestRow]

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]


def split_counts(n: int, splits: dict[str, float]) -> dict[str, int]:
    names = list(splits)
    counts = {s: int(round(splits[s] * n)) for s in names[:-1]}
    counts[names[-1]] = n - sum(counts.values())
    if counts[names[-1]] < 0:
        raise ConfigError("split fractions over-allocate records")
    return counts


def build_dataset(cfg: DatasetConfig, out_dir: str | Path) -> DatasetManifest:
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    order = np.random.default_rng([cfg.seed, 2]).permutation(cfg.n_records)
    split_of = {}
    pos = 0
    for name, count in split_counts(cfg.n_records, cfg.splits).items():
        for idx in order[pos : pos + count]:
            split_of[int(idx)] = name
        pos += count

    rows = []
    for i in range(cfg.n_records):
        seed = cfg.seed + i
        rec = generate_record(seed, cfg.grammar, record_id=f"rec{i:05d}")
        img = render_record(rec, seed, cfg.render)
        rel = f"images/{rec.id}.png"
        Image.fromarray(img.pixels, mode="L").save(out / rel, optimize=False)
        rows.append(ManifestRow(rec, rel, split_of[i], tuple(img.line_boxes)))

    if cfg.n_records >= 200:
        seen = set()
        for r in rows:
            if r.split == "train":
                seen.update(r.record.text(" "))
        missing = set(cfg.grammar.charset) - seen
        if missing:
            raise ConfigError(f"charset symbols never seen in training split: {sorted(missing)}")

    manifest = out / "manifest.jsonl"
    write_manifest(manifest, rows)
    log.info("wrote %d records to %s", len(rows), manifest)
    return DatasetManifest(manifest, rows)


def load_image(path: str | Path, line_boxes=None) -> GrayImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8).copy()
    return GrayImage(arr, list(line_boxes) if line_boxes is not None else [])
