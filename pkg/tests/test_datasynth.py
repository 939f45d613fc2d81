import itertools

import numpy as np
import pytest

from htrner.datasynth import (
    ConfigError,
    DatasetConfig,
    GrammarConfig,
    RenderConfig,
    all_blocks,
    build_dataset,
    extract_block,
    generate_record,
    load_image,
    render_record,
    split_counts,
)
from htrner.glyphs import RenderError, glyph_bitmap
from htrner.records import ManifestRow, read_manifest

from conftest import make_record

PLAIN = RenderConfig(jitter=0, max_slant=0.0, thickness=(1, 1), noise=0.0)


def test_generate_is_deterministic(grammar):
    assert generate_record(0, grammar) == generate_record(0, grammar)
    assert generate_record(0, grammar) != generate_record(1, grammar)


def test_single_template_marries():
    g = GrammarConfig(
        templates=["{name:husband} marries {name:wife}"],
        min_lines=1, max_lines=1, min_words_per_line=3, max_words_per_line=3,
    )
    rec = generate_record(5, g)
    ents = [w for w in rec.words() if w.is_entity]
    assert rec.M == 2 and [w.category for w in ents] == ["name", "name"]
    assert [w.person for w in ents] == ["husband", "wife"]
    assert rec.lines[0][1].text == "marries"


def test_empty_lexicon_is_config_error():
    g = GrammarConfig(lexicons={**GrammarConfig().lexicons, "name": []})
    with pytest.raises(ConfigError, match="name"):
        generate_record(0, g)


def test_undeclared_category_in_template():
    with pytest.raises(ConfigError):
        GrammarConfig(templates=["{nobility:wife} x"]).validate()


def test_invariants_over_1000_seeds(grammar):
    lines = set()
    for seed in range(1000):
        rec = generate_record(seed, grammar)
        rec.check()
        assert rec.L == len(rec.lines) >= 1
        assert rec.N == sum(len(l) for l in rec.lines)
        assert rec.M == sum(w.is_entity for w in rec.words()) <= rec.N
        assert rec.M >= grammar.min_entities
        assert all(grammar.min_words_per_line <= len(l) <= grammar.max_words_per_line for l in rec.lines)
        assert set(rec.text(" ")) <= set(grammar.charset)
        lines.add(rec.L)
    assert lines == set(range(grammar.min_lines, grammar.max_lines + 1))


def test_render_single_line_ink_inside_box():
    rec = make_record(["ab"])
    img = render_record(rec, 3)
    (top, bottom), = img.line_boxes
    ys, _ = np.nonzero(img.pixels < 128)
    assert len(ys) > 0 and ys.min() >= top and ys.max() < bottom


def test_render_multi_line_boxes_ordered_and_contain_ink(grammar):
    for seed in range(20):
        rec = generate_record(seed, grammar)
        img = render_record(rec, seed)
        assert len(img.line_boxes) == rec.L
        for (a0, b0), (a1, b1) in zip(img.line_boxes, img.line_boxes[1:]):
            assert a0 < b0 <= a1 < b1
        covered = np.zeros(img.height, dtype=bool)
        for a, b in img.line_boxes:
            covered[a:b] = True
        ink_rows = np.nonzero((img.pixels < 128).any(axis=1))[0]
        assert covered[ink_rows].all()


def test_render_is_deterministic(grammar):
    rec = generate_record(11, grammar)
    assert np.array_equal(render_record(rec, 11).pixels, render_record(rec, 11).pixels)


def test_clean_render_ink_equals_glyph_ink():
    rec = make_record(["maria", "puig"], ["xyz"])
    img = render_record(rec, 0, PLAIN)
    expected = sum(int(glyph_bitmap(ch).sum()) for w in rec.words() for ch in w.text)
    assert int((img.pixels == 0).sum()) == expected
    assert set(np.unique(img.pixels)) <= {0, 255}


def test_render_missing_glyph_names_character():
    with pytest.raises(RenderError, match="'7'"):
        render_record(make_record(["ab7"]), 0)


def test_render_config_limits():
    for bad in (RenderConfig(jitter=3), RenderConfig(noise=0.05), RenderConfig(thickness=(1, 3))):
        with pytest.raises(ConfigError):
            bad.validate()


@pytest.fixture
def four_lines(grammar):
    g = GrammarConfig(min_lines=4, max_lines=4)
    rec = generate_record(2, g)
    return rec, render_record(rec, 2)


def test_extract_block_identity(four_lines):
    rec, img = four_lines
    sub, sub_img = extract_block(rec, img, 1, rec.L)
    assert sub == rec and sub_img == img


def test_extract_block_middle_line():
    rec = make_record(["aa"], [("bb", "name", "wife"), "cc"], ["dd"])
    img = render_record(rec, 0)
    sub, sub_img = extract_block(rec, img, 2, 1)
    assert sub.L == 1 and sub.lines[0] == rec.lines[1]
    top, bottom = img.line_boxes[1]
    assert np.array_equal(sub_img.pixels, img.pixels[top:bottom])
    assert sub_img.line_boxes == [(0, bottom - top)]


def _compositions(n):
    for cuts in itertools.product([0, 1], repeat=n - 1):
        sizes, run = [], 1
        for c in cuts:
            if c:
                sizes.append(run)
                run = 1
            else:
                run += 1
        sizes.append(run)
        yield sizes


def test_partitions_conserve_words_and_labels(four_lines):
    rec, img = four_lines
    parts = list(_compositions(rec.L))
    assert len(parts) == 2 ** (rec.L - 1)
    for sizes in parts:
        start, words = 1, []
        for k in sizes:
            sub, _ = extract_block(rec, img, start, k)
            sub.check()
            words.extend(sub.words())
            start += k
        assert len(words) == rec.N
        assert words == list(rec.words())


def test_extract_block_bounds(four_lines):
    rec, img = four_lines
    for start, k in ((0, 1), (1, 0), (2, 4), (5, 1), (4, 2)):
        with pytest.raises(IndexError):
            extract_block(rec, img, start, k)
    assert len(all_blocks(4)) == 10
    for start, k in all_blocks(4):
        extract_block(rec, img, start, k)


def test_split_counts():
    assert split_counts(100, {"train": 0.8, "valid": 0.1, "test": 0.1}) == {"train": 80, "valid": 10, "test": 10}
    assert sum(split_counts(33, {"train": 0.8, "valid": 0.1, "test": 0.1}).values()) == 33


def test_split_fractions_must_sum_to_one():
    with pytest.raises(ConfigError):
        DatasetConfig(n_records=10, splits={"train": 0.8, "test": 0.1}).validate()


def test_build_dataset_splits_roundtrip_and_rerun(tmp_path):
    cfg = DatasetConfig(n_records=100, seed=4)
    m1 = build_dataset(cfg, tmp_path / "a")
    m2 = build_dataset(cfg, tmp_path / "b")
    ids = {s: {r.record.id for r in m1.split(s)} for s in ("train", "valid", "test")}
    assert [len(ids[s]) for s in ("train", "valid", "test")] == [80, 10, 10]
    assert not (ids["train"] & ids["valid"] or ids["train"] & ids["test"] or ids["valid"] & ids["test"])

    text = m1.path.read_bytes()
    assert text == m2.path.read_bytes()
    for row in m1.rows:
        assert (tmp_path / "a" / row.image).read_bytes() == (tmp_path / "b" / row.image).read_bytes()

    parsed = read_manifest(m1.path)
    assert [r.record for r in parsed] == [r.record for r in m1.rows]
    for line in text.decode("utf-8").splitlines():
        assert ManifestRow.from_json(line).to_json() == line
    row = parsed[0]
    img = load_image(tmp_path / "a" / row.image, row.line_boxes)
    assert img == render_record(row.record, cfg.seed + 0, cfg.render)


def test_build_dataset_flags_unseen_charset_symbol(tmp_path):
    g = GrammarConfig(charset="abcdefghijklmnopqrstuvwxyz 0")
    with pytest.raises(ConfigError, match="'0'"):
        build_dataset(DatasetConfig(n_records=200, seed=0, grammar=g), tmp_path)


def test_default_corpus_covers_charset(tmp_path):
    m = build_dataset(DatasetConfig(n_records=200, seed=1), tmp_path)
    assert len(m.rows) == 200
