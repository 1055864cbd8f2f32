import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mms.errors import ContractViolation, GeometryError
from mms.evaluation import (PSNR_INF, EvalReport, ProbeConfig, assert_frozen, build_eval_sets,
                            char_coverage, column_features, compose_reconstruction, coverage_histogram,
                            eval_sets_from_json, eval_sets_to_json, params_hash, probe_train_eval, psnr,
                            psnr_table_csv, reconstruct, score_eval_sets, table_pattern)
from mms.masking import MaskSet, random_mask
from mms.patches import ImageBuf, depatchify, patchify
from mms.synth import PROBE_LAYOUT, make_dataset, render_word


def psnr_oracle(a, b, peak=1.0):
    """Pixel-by-pixel loop, written independently of the vectorised version."""
    total, count = 0.0, 0
    for x, y in zip(np.ravel(a).tolist(), np.ravel(b).tolist()):
        total += (x - y) ** 2
        count += 1
    mse = total / count
    return math.inf if mse == 0 else 20 * math.log10(peak) - 10 * math.log10(mse)


def test_psnr_trivial_cases(rng):
    a = rng.random((4, 4, 3))
    assert psnr(a, a) == PSNR_INF
    assert psnr(np.zeros((2, 2)), np.ones((2, 2))) == 0.0
    with pytest.raises(GeometryError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32))
def test_psnr_matches_oracle_symmetric_and_scale_consistent(seed):
    g = np.random.default_rng(seed)
    a, b = g.random((8, 16, 3)), g.random((8, 16, 3))
    v = psnr(ImageBuf(a), ImageBuf(b))
    assert abs(v - psnr_oracle(a, b)) < 1e-9
    assert v == psnr(b, a)
    assert abs(v - psnr(255 * a, 255 * b, peak=255.0)) < 1e-9


def test_compose_visible_bitwise_and_masked_denormalised(tiny_params, words):
    grid = patchify(words[0].image)
    m = random_mask(8, 32, 0.5, 1)
    out = compose_reconstruction(grid, reconstruct(tiny_params, grid, m), m)
    orig = words[0].image.data
    vis = ~m.as_bool().reshape(8, 32).repeat(4, 0).repeat(4, 1)
    assert np.array_equal(out.data[vis], orig[vis])
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_compose_extremes(words):
    grid = patchify(words[0].image)
    empty = MaskSet(8, 32, (), "random", 0.0)
    assert np.array_equal(compose_reconstruction(grid, np.zeros((256, 48)), empty).data,
                          words[0].image.data)
    # with a perfect normalised prediction, a full mask gives back the image
    full = MaskSet(8, 32, tuple(range(256)), "random", 1.0)
    x = grid.patches.data
    mean, std = x.mean(1, keepdims=True), np.sqrt(x.var(1, keepdims=True) + 1e-6)
    out = compose_reconstruction(grid, (x - mean) / std, full)
    assert np.allclose(out.data, words[0].image.data, atol=1e-12)
    with pytest.raises(GeometryError):
        compose_reconstruction(grid, np.zeros((255, 48)), empty)


def test_eval_sets_frozen_and_serialisable():
    a = build_eval_sets(5, seed=3)
    b = build_eval_sets(5, seed=3)
    assert eval_sets_to_json(a) == eval_sets_to_json(b)
    assert eval_sets_from_json(eval_sets_to_json(a)) == a
    for i in range(5):
        assert len(a["random"][i]) == 192
        assert len(a["block"][i]) >= 128 and len(a["span"][i]) > 128
    assert eval_sets_to_json(build_eval_sets(5, seed=4)) != eval_sets_to_json(a)


def test_score_and_table(tiny_params, words):
    images = [w.image for w in words[:2]]
    sets = build_eval_sets(2, seed=0)
    scores = score_eval_sets(tiny_params, images, sets)
    assert set(scores) == {"random", "block", "span"} and all(np.isfinite(list(scores.values())))
    csv = psnr_table_csv({"mms": scores})
    assert csv.splitlines()[0] == "model,random_75,block_50,span_50,avg"
    with pytest.raises(GeometryError):
        score_eval_sets(tiny_params, images[:1], sets)


def test_table_pattern():
    rows = {"random": {"random": 30, "block": 10, "span": 10},
            "block": {"random": 20, "block": 30, "span": 12},
            "span": {"random": 21, "block": 12, "span": 30},
            "mms": {"random": 25, "block": 20, "span": 20}}
    pat = table_pattern(rows)
    assert all(p["holds"] for p in pat.values())
    rows["mms"]["span"] = 5
    assert not table_pattern(rows)["span"]["holds"]


def test_coverage_geometry_oracle():
    s = render_word("AB", seed=0, scale=2, gap=6, origin=(0, 8))
    # boxes: x 8..18 and 24..34; mask columns 2..4 (pixels 8..20) cover A's box entirely
    cols = [2, 3, 4]
    m = MaskSet(8, 32, tuple(r * 32 + c for r in range(8) for c in cols), "span", 0.1)
    (fa, full_a), (fb, full_b) = char_coverage(m, s)
    assert (fa, full_a) == (1.0, True) and (fb, full_b) == (0.0, False)
    empty = MaskSet(8, 32, (), "random", 0.0)
    assert all(f == 0.0 for f, _ in char_coverage(empty, s))
    full = MaskSet(8, 32, tuple(range(256)), "random", 1.0)
    assert all(f == 1.0 and flag for f, flag in char_coverage(full, s))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.05, 0.9))
def test_coverage_monotone_under_superset(seed, r):
    s = render_word("HELLO", seed=seed % 100)
    small = random_mask(8, 32, r, seed)
    extra = random_mask(8, 32, 0.3, seed + 1)
    big = MaskSet(8, 32, tuple(set(small.masked) | set(extra.masked)), "random", r)
    for (f1, _), (f2, _) in zip(char_coverage(small, s), char_coverage(big, s)):
        assert 0.0 <= f1 <= f2 <= 1.0


def test_coverage_histogram(words):
    sets = build_eval_sets(len(words), seed=1)
    h = coverage_histogram(sets["span"], words)
    assert sum(h["counts"]) == h["characters"] == sum(len(w.word) for w in words)


def test_column_features_shape(tiny_params, words):
    f = column_features(tiny_params, [w.image for w in words[:2]])
    assert f.shape == (2, 32, 64)


def test_frozen_contract(tiny_params):
    assert_frozen({}, tiny_params)
    with pytest.raises(ContractViolation):
        assert_frozen({tiny_params["pos_embed"]: np.zeros(1)}, tiny_params)


def test_probe_leaves_encoder_untouched(tiny_params):
    train, _ = make_dataset(6, seed=1, layout=PROBE_LAYOUT)
    test, _ = make_dataset(3, seed=2, layout=PROBE_LAYOUT)
    before = params_hash(tiny_params, tiny_params.encoder_names())
    res = probe_train_eval(tiny_params, train, test, ProbeConfig(epochs=5))
    assert res.encoder_hash_before == res.encoder_hash_after == before == params_hash(tiny_params, tiny_params.encoder_names())
    assert 0.0 <= res.test_accuracy <= 1.0


def test_report_json():
    r = EvalReport(psnr={"m": {"random": np.float64(1.5)}}, metadata={"n": np.int64(3)})
    assert '"random": 1.5' in r.to_json() and '"n": 3' in r.to_json()
