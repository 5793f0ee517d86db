import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comwin import arrayio
from comwin.synthdata import SynthConfig, downscale_labels, generate_dataset, generate_sample

SMALL = SynthConfig(height=32, width=32, radius=(3, 8), samples=20, test_samples=5, seed=3)


def test_generation_is_byte_identical(tmp_path):
    generate_dataset(SMALL, tmp_path / "a")
    generate_dataset(SMALL, tmp_path / "b")
    assert arrayio.directory_digest(tmp_path / "a") == arrayio.directory_digest(tmp_path / "b")


def test_sample_content_independent_of_order():
    forward = [generate_sample(SMALL, i) for i in range(6)]
    backward = [generate_sample(SMALL, i) for i in reversed(range(6))][::-1]
    for (a, la), (b, lb) in zip(forward, backward):
        assert a.tobytes() == b.tobytes() and la.tobytes() == lb.tobytes()


def test_labeled_fraction_split():
    cfg = SynthConfig(samples=200, labeled_fraction=0.05, test_samples=40)
    from comwin.synthdata import assign_splits

    tags = assign_splits(cfg)
    assert tags.count("labeled") == 10
    assert tags.count("unlabeled") == 190
    assert tags.count("test") == 40


def test_manifest_and_dtypes(tmp_path):
    m = generate_dataset(SMALL, tmp_path)
    back = arrayio.load_manifest(tmp_path / "manifest.json")
    assert back == m
    assert back.synth_config["seed"] == 3
    for s in back.samples:
        img = back.load_image(s)
        lab = back.load_label(s)
        assert img.dtype == np.float32 and lab.dtype == np.uint8
        assert img.shape == lab.shape == (32, 32)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert lab.max() < SMALL.classes
        if s.split == "unlabeled":
            assert s.label is None and s.hidden_label is not None


def test_foreground_fraction_over_1000_samples():
    cfg = SynthConfig()
    fracs = [np.count_nonzero(generate_sample(cfg, i)[1]) / (cfg.height * cfg.width) for i in range(1000)]
    assert min(fracs) >= 0.02 and max(fracs) <= 0.5


def test_multiclass_labels_in_range():
    cfg = SynthConfig(height=32, width=32, radius=(3, 8), classes=4, intensity=(0.2, 0.4, 0.6, 0.8))
    labs = np.stack([generate_sample(cfg, i)[1] for i in range(50)])
    assert labs.max() <= 3 and len(np.unique(labs)) == 4


@pytest.mark.parametrize(
    "kwargs",
    [dict(radius=(3, 40)), dict(height=16), dict(classes=1, intensity=(0.5,)), dict(labeled_fraction=0.0)],
)
def test_degenerate_configs(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


def test_unknown_config_key():
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"heigth": 32})


# -- downscale_labels ---------------------------------------------------------


def test_downscale_constant():
    out = downscale_labels(np.full((8, 8), 3, np.uint8), 2)
    assert out.shape == (4, 4) and (out == 3).all()


def test_downscale_top_left():
    out = downscale_labels(np.array([[0, 1], [2, 3]]), 2)
    assert out.tolist() == [[0]]


def test_downscale_matches_cellwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        lab = rng.integers(0, 4, (16, 16))
        expect = np.empty((8, 8), lab.dtype)
        for i in range(8):
            for j in range(8):
                cell = lab[2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                expect[i, j] = cell[0, 0]
        assert (downscale_labels(lab, 2) == expect).all()


def test_downscale_rejects_non_divisible():
    with pytest.raises(ValueError):
        downscale_labels(np.zeros((5, 6)), 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_downscale_composes(hq, wq, seed):
    lab = np.random.default_rng(seed).integers(0, 3, (4 * hq, 4 * wq))
    assert (downscale_labels(downscale_labels(lab, 2), 2) == downscale_labels(lab, 4)).all()
