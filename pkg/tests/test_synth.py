import filecmp
import json
import os

import numpy as np
import pytest

from paedid.synth import DefectSpec, SynthConfig, gen_background, gen_corpus, inject_defect, sample_test_item
from paedid.tensor_image import load_image, read_tensor


@pytest.mark.parametrize("style", ["grain", "blotch"])
def test_background_deterministic_and_in_range(style):
    cfg = SynthConfig(seed=11, image_size=(40, 48), style=style)
    a, b = gen_background(cfg, 2), gen_background(cfg, 2)
    assert a.shape == (40, 48, 1)
    assert np.array_equal(a, b)
    assert a.min() >= 0.1 - 1e-6 and a.max() <= 0.9 + 1e-6


@pytest.mark.parametrize("style", ["grain", "blotch"])
def test_different_seeds_differ(style):
    a = gen_background(SynthConfig(seed=1, image_size=(32, 32), style=style))
    b = gen_background(SynthConfig(seed=2, image_size=(32, 32), style=style))
    assert np.mean(a != b) >= 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(style="plaid")
    with pytest.raises(ValueError):
        DefectSpec(width=(0, 2))
    with pytest.raises(ValueError):
        DefectSpec(fraction=(0.1, 0.01))


def test_defect_bookkeeping():
    cfg = SynthConfig(seed=5, image_size=(64, 64))
    for i in range(5):
        bg, x, mask, s = sample_test_item(cfg, i)
        assert np.array_equal(mask, np.any(x != bg, axis=2))
        assert np.array_equal(x, bg + s)
        assert x.min() >= 0.0 and x.max() <= 1.0


def test_defect_fraction_over_50_draws():
    cfg = SynthConfig(seed=8, image_size=(64, 64))
    fr = [sample_test_item(cfg, i)[2].mean() for i in range(50)]
    assert min(fr) >= 0.001 and max(fr) <= 0.05


def test_impossible_fraction_raises():
    cfg = SynthConfig(seed=0, image_size=(16, 16), defect=DefectSpec(width=(4, 4), fraction=(0.001, 0.002)))
    with pytest.raises(ValueError, match="retries"):
        inject_defect(gen_background(cfg), cfg)


def test_corpus_layout_and_rerun(tmp_path):
    cfg = SynthConfig(seed=4, image_size=(32, 32))
    m = gen_corpus(cfg, 3, 2, tmp_path / "a")
    gen_corpus(cfg, 3, 2, tmp_path / "b")
    assert set(m) == {"seed", "style", "n_train", "n_test", "image_size", "defect"}
    assert set(m["defect"]) == {"strokes", "width", "offset", "fraction"}
    assert json.loads((tmp_path / "a" / "manifest.json").read_text()) == m
    a = tmp_path / "a"
    assert len(os.listdir(a / "train")) == 3 and len(os.listdir(a / "test")) == 2
    for name in sorted(os.listdir(a / "test")):
        stem = name[:-4]
        assert load_image(a / "truth" / name).shape == load_image(a / "test" / name).shape
        assert read_tensor(a / "truth_s" / f"{stem}.ptf").shape == (32, 32, 1)
    for sub in ("train", "test", "truth", "truth_s"):
        cmp = filecmp.dircmp(a / sub, tmp_path / "b" / sub)
        assert not cmp.left_only and not cmp.right_only
        _, mismatch, errors = filecmp.cmpfiles(a / sub, tmp_path / "b" / sub, os.listdir(a / sub), shallow=False)
        assert not mismatch and not errors


def test_corpus_prefix_shared(tmp_path):
    cfg = SynthConfig(seed=4, image_size=(32, 32))
    small = [gen_background(cfg, i) for i in range(2)]
    gen_corpus(cfg, 4, 0, tmp_path)
    for i, img in enumerate(small):
        assert np.array_equal(load_image(tmp_path / "train" / f"train_{i:04d}.png"), img)
