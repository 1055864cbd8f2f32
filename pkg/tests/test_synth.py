import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from mms.errors import LayoutError
from mms.font5x7 import CHARSET, GLYPHS, glyph
from mms.imageio import write_pnm
from mms.patches import ImageBuf
from mms.synth import (PROBE_LAYOUT, SynthConfig, capacity, column_labels, load_dataset, load_external,
                       load_images, make_dataset, make_sample, probe_config, read_manifest, render_word,
                       write_dataset)


def test_font_covers_charset():
    assert set(GLYPHS) == set(CHARSET) and len(CHARSET) == 36
    assert all(g.shape == (7, 5) and g.any() for g in GLYPHS.values())
    assert glyph("A", 3).shape == (21, 15)
    with pytest.raises(KeyError):
        glyph("a")


def test_placement_arithmetic_example():
    s = render_word("A", seed=0, scale=2, gap=2, origin=(8, 10))
    assert s.char_boxes == [(10, 8, 10 + 2 * 5, 8 + 2 * 7)]


def test_multi_char_boxes():
    s = render_word("AB7", seed=1, scale=3, gap=3, origin=(2, 5))
    assert s.char_boxes == [(5, 2, 20, 23), (23, 2, 38, 23), (41, 2, 56, 23)]


def test_zero_noise_determinism():
    cfg = SynthConfig(noise_std=0.0)
    a, b = render_word("HELLO", cfg, seed=4), render_word("HELLO", cfg, seed=4)
    assert np.array_equal(a.image.data, b.image.data)
    # without noise, pixels are exactly fg inside glyph ink and bg elsewhere
    ink = np.any(a.char_masks(), axis=0)
    assert np.allclose(a.image.data[ink], a.fg) and np.allclose(a.image.data[~ink], a.bg)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_sample_invariants(seed):
    s = make_sample(SynthConfig(), seed)
    assert 3 <= len(s.word) <= 10 and set(s.word) <= set(CHARSET)
    assert s.image.data.shape == (32, 128, 3)
    assert 0.0 <= s.image.data.min() and s.image.data.max() <= 1.0
    assert abs(np.mean(s.fg) - np.mean(s.bg)) >= 0.2
    prev_x1 = -1
    for x0, y0, x1, y1 in s.char_boxes:
        assert 0 <= x0 < x1 <= 128 and 0 <= y0 < y1 <= 32
        assert x0 >= prev_x1
        prev_x1 = x1
    for i, m in enumerate(s.char_masks()):
        assert not (m & ~s.box_mask(i)).any()


def test_layout_errors():
    with pytest.raises(LayoutError):
        render_word("ABCDEFGHIJKL", scale=3, gap=3)
    with pytest.raises(LayoutError):
        render_word("a")
    with pytest.raises(LayoutError):
        render_word("")
    with pytest.raises(LayoutError):
        render_word("AB", scale=2, gap=2, origin=(20, 0))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(min_contrast=0.1).validate()
    with pytest.raises(ValueError):
        SynthConfig(min_len=5, max_len=3).validate()
    with pytest.raises(ValueError):
        SynthConfig(fg_range=(0.3, 0.4), bg_range=(0.3, 0.5)).validate()


def test_colour_ranges_respected():
    cfg = SynthConfig(fg_range=(0.0, 0.3), bg_range=(0.6, 1.0), noise_std=0.0)
    for seed in range(20):
        s = make_sample(cfg.validate(), seed)
        assert max(s.fg) <= 0.3 and min(s.bg) >= 0.6


def test_capacity():
    assert capacity(2, 2) == 10  # 10*10 + 9*2 = 118 <= 128
    assert capacity(3, 6) == 6


def test_dataset_reproducible_by_hash():
    def digest(samples):
        h = hashlib.sha256()
        for s in samples:
            h.update(s.image.data.tobytes())
            h.update(s.word.encode())
        return h.hexdigest()
    a, man = make_dataset(200, seed=9)
    b, _ = make_dataset(200, seed=9)
    assert digest(a) == digest(b) and len(man) == 200
    assert digest(make_dataset(200, seed=10)[0]) != digest(a)


def test_first_letters_uniform():
    samples, _ = make_dataset(10000, SynthConfig(noise_std=0.0), seed=21)
    counts = np.array([sum(s.word[0] == c for s in samples) for c in CHARSET])
    assert chisquare(counts).pvalue > 0.001


def test_write_and_load(tmp_path, words):
    write_dataset(tmp_path, words[:3])
    rows = read_manifest(tmp_path)
    assert [r["word"] for r in rows] == [w.word for w in words[:3]]
    assert rows[0]["file"] == "sample_00000.ppm"
    back = load_dataset(tmp_path)
    assert back[1].char_boxes == words[1].char_boxes
    assert np.abs(back[1].image.data - words[1].image.data).max() <= 0.5 / 255 + 1e-12
    assert len(load_images(tmp_path)) == 3


def test_load_external_resizes(tmp_path):
    write_pnm(tmp_path / "b.pgm", ImageBuf(np.full((20, 60), 0.5)))
    write_pnm(tmp_path / "a.ppm", ImageBuf(np.zeros((32, 128, 3))))
    (tmp_path / "notes.txt").write_text("skip")
    imgs = load_external(tmp_path)
    assert [i.data.shape for i in imgs] == [(32, 128, 3)] * 2
    assert np.allclose(imgs[1].data, 128 / 255)
    with pytest.raises(OSError):
        load_external(tmp_path / "missing")


def test_probe_layout_column_labels():
    s = make_sample(SynthConfig(), 3, PROBE_LAYOUT)
    labels = column_labels(s)
    assert labels[0] == 0
    for i, ch in enumerate(s.word):
        first = 1 + 3 * i
        assert labels[first] == labels[first + 1] == 1 + CHARSET.index(ch)
        assert labels[first + 2] == 0


def test_probe_words_are_dark_on_light():
    for sample in make_dataset(20, probe_config(), seed=4, layout=PROBE_LAYOUT)[0]:
        img = sample.image.data
        ink = np.any(sample.char_masks(), axis=0)
        assert img[ink].mean() + 0.3 < img[~ink].mean()
