import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paedid.decomposition import DecompParams, decompose
from paedid.addressing import AddressingParams, deep_image_prior
from paedid.errors import ShapeMismatchError
from paedid.evaluation import (
    TuneGrid,
    UndefinedMetricError,
    background_criterion,
    dice,
    pixel_auroc,
    select_threshold,
    tune_parameters,
)
from paedid.memory_bank import build_agg_bank, build_raw_bank
from paedid.synth import SynthConfig, sample_test_item


def dice_oracle(a, b):
    a, b = a.ravel().tolist(), b.ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    tot = sum(a) + sum(b)
    return 1.0 if tot == 0 else 2 * inter / tot


def auroc_oracle(s, t):
    s, t = s.ravel(), t.ravel()
    pos, neg = s[t], s[~t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


masks = arrays(bool, (8, 8))


@given(masks, masks)
def test_dice_matches_count_oracle(a, b):
    assert dice(a, b) == pytest.approx(dice_oracle(a, b), abs=1e-12)
    assert dice(a, b) == pytest.approx(dice(b, a), abs=1e-15)


def test_dice_examples():
    z = np.zeros((8, 8), bool)
    assert dice(z, z) == 1.0
    one = z.copy()
    one[2, 2] = True
    assert dice(one, one) == 1.0
    assert dice(z, one) == 0.0
    with pytest.raises(ShapeMismatchError):
        dice(z, np.zeros((8, 7), bool))


@given(arrays(np.float64, (8, 8), elements=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])), masks)
def test_auroc_matches_pair_oracle(s, t):
    if t.all() or not t.any():
        with pytest.raises(UndefinedMetricError):
            pixel_auroc(s, t)
    else:
        assert pixel_auroc(s, t) == pytest.approx(auroc_oracle(s, t), abs=1e-12)


def test_auroc_examples():
    t = np.zeros((8, 8), bool)
    t[:2] = True
    assert pixel_auroc(t.astype(float), t) == 1.0
    assert pixel_auroc(1.0 - t, t) == 0.0
    assert pixel_auroc(np.full((8, 8), 0.3), t) == 0.5


def test_select_threshold_picks_best_and_smallest_tie():
    truth = np.zeros((4, 4), bool)
    truth[1, 1] = True
    score = np.where(truth, 0.9, 0.2)
    # every t in [0.2, 0.9) separates perfectly; the smallest such grid value wins
    assert select_threshold([score], [truth], [0.1, 0.5, 0.3, 0.95]) == 0.3
    with pytest.raises(ValueError):
        select_threshold([score], [truth], [])


def test_background_criterion_zero_at_truth(rng):
    x = rng.random((12, 12, 1))
    s = np.zeros_like(x)
    s[3, 3] = 0.4
    assert background_criterion([x], [x - s], [s]) == pytest.approx(0.0, abs=1e-12)
    assert background_criterion([x], [x], [s]) == pytest.approx(0.4)


def test_grid_validation():
    with pytest.raises(ValueError):
        TuneGrid(lam1=())
    with pytest.raises(ValueError):
        TuneGrid(l=(4,))
    assert len(TuneGrid(l=(1, 3), k=(1, 2, 3), lam1=(1e-5,), alpha=(0.1, 0.3))) == 12


@pytest.fixture(scope="module")
def tune_setup(small_model, small_corpus):
    raw = build_raw_bank(small_model, small_corpus)
    banks = {l: (raw, build_agg_bank(raw, l)) for l in (1, 3)}
    cfg = SynthConfig(seed=3, image_size=(32, 32))
    samples = [sample_test_item(cfg, i) for i in range(2)]
    return banks, [s[1] for s in samples], [s[3] for s in samples]


def test_tune_single_point_matches_direct_pipeline(small_model, tune_setup):
    banks, images, s_true = tune_setup
    grid = TuneGrid(l=(3,), k=(2,), lam1=(1e-3,), alpha=(0.3,))
    res = tune_parameters(images, s_true, grid, small_model, banks)
    assert len(res.table) == 1
    assert res.best == {"l": 3, "k": 2, "lam1": 1e-3, "alpha": 0.3}
    raw, agg = banks[3]
    ls = [decompose(x, deep_image_prior(small_model, raw, agg, x, AddressingParams(k=2, alpha=0.3)).X_hat, DecompParams(lam1=1e-3)).L for x in images]
    assert res.table[0]["criterion"] == pytest.approx(background_criterion(images, ls, s_true), rel=1e-12)


def test_tune_table_covers_grid_and_best_is_min(small_model, tune_setup):
    banks, images, s_true = tune_setup
    grid = TuneGrid(l=(1, 3), k=(1, 3), lam1=(1e-5, 1e-2), alpha=(0.3,))
    res = tune_parameters(images, s_true, grid, small_model, banks)
    assert len(res.table) == len(grid) == 8
    keys = {(r["l"], r["k"], r["lam1"], r["alpha"]) for r in res.table}
    assert keys == set(itertools.product(grid.l, grid.k, grid.lam1, grid.alpha))
    best_row = min(res.table, key=lambda r: r["criterion"])
    assert res.best == {n: best_row[n] for n in ("l", "k", "lam1", "alpha")}


def test_tune_missing_bank(small_model, tune_setup):
    banks, images, s_true = tune_setup
    with pytest.raises(ValueError, match="no memory bank"):
        tune_parameters(images, s_true, TuneGrid(l=(5,)), small_model, banks)


def test_dice_half_overlap():
    a = np.zeros((2, 3), bool)
    b = np.zeros((2, 3), bool)
    a[0, :2] = True
    b[0, 1:3] = True
    assert dice(a, b) == 0.5


@given(masks.filter(lambda m: m.any()), masks)
def test_dice_one_iff_identical(a, b):
    assert (dice(a, b) == 1.0) == bool(np.array_equal(a, b))


def test_auroc_four_pixel_hand_case():
    s = np.array([0.9, 0.1, 0.8, 0.2])
    t = np.array([1, 0, 0, 1], bool)
    # positives 0.9, 0.2 vs negatives 0.1, 0.8: 0.9 beats both, 0.2 beats 0.1 only
    assert pixel_auroc(s, t) == 0.75 == auroc_oracle(s, t)


@given(arrays(np.int64, (8, 8), elements=st.integers(-20, 20)), masks.filter(lambda m: m.any() and not m.all()))
def test_auroc_invariant_under_increasing_map(s, t):
    # x**3 + 2x is strictly increasing and exact on small integers
    assert pixel_auroc(s**3 + 2 * s, t) == pixel_auroc(s, t)


def test_select_threshold_spec_cases():
    truth = np.zeros((4, 4), bool)
    truth[0, :2] = True
    assert select_threshold([truth.astype(float)], [truth], [0.75, 0.25, 0.5]) == 0.25
    assert select_threshold([np.zeros((4, 4))], [truth], [0.5, 0.25]) == 0.25


@given(st.integers(0, 10_000))
def test_select_threshold_matches_enumeration(seed):
    r = np.random.default_rng(seed)
    truths = [r.random((8, 8)) < 0.2 for _ in range(3)]
    scores = [np.where(g, r.choice([0.3, 0.7]), r.choice([0.1, 0.5], size=(8, 8))) for g in truths]
    grid = [0.0, 0.2, 0.4, 0.6, 0.8]
    means = [np.mean([dice_oracle(s > t, g) for s, g in zip(scores, truths)]) for t in grid]
    assert select_threshold(scores, truths, grid) == grid[int(np.argmax(means))]
