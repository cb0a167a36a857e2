import pytest
from hypothesis import given, settings, strategies as st

from weakret.config import ExperimentConfig, parse_config
from weakret.renderer import ViewPose


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.proxy.w_percep, cfg.proxy.w_geo) == (0.7, 0.3)
    assert cfg.proxy.resolution == 128
    assert (cfg.topk.sigma, cfg.topk.n_samples, cfg.topk.soft_sigma, cfg.topk.k) == (0.05, 1000, 0.005, 5)
    assert (cfg.train.batch_size, cfg.train.lr, cfg.train.epochs, cfg.train.loss) == (64, 3e-4, 50, "topk")
    assert cfg.encoder.embed_dim == 128
    assert cfg.dataset.n_families == 8


def test_text_round_trip():
    cfg = parse_config("""
        # reduced run
        dataset.n_families = 3
        degradation.noise_flip_prob = 0.05
        proxy.views = 0:0, 90:30
        proxy.resolution = 32
        train.loss = triplet
        train.holdout_families = ring, cross
        encoder.channels = 4,8
        seed = 7
    """)
    assert cfg.dataset.n_families == 3
    assert cfg.dataset.degradation.noise_flip_prob == 0.05
    assert cfg.proxy.views == (ViewPose(0, 0), ViewPose(90, 30))
    assert cfg.train.holdout_families == ("ring", "cross")
    assert cfg.encoder.channels == (4, 8)
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()
    assert again.hexdigest() == cfg.hexdigest()


def test_digests_track_content():
    a = ExperimentConfig()
    b = parse_config("train.lr = 0.001")
    assert a.hexdigest() != b.hexdigest()
    assert a.dataset_digest() == b.dataset_digest()
    assert a.dataset_digest() != parse_config("degradation.dropout_fraction = 0.5").dataset_digest()


@pytest.mark.parametrize("text", [
    "train.bogus = 1",
    "nosection.k = 1",
    "train.loss = hinge",
    "train.holdout_families = sofa",
    "just some words",
    "proxy.w_percep = 0.9",
])
def test_rejects_bad_input(text):
    with pytest.raises(ValueError):
        parse_config(text)


@settings(max_examples=40, deadline=None)
@given(lr=st.floats(1e-6, 1.0), epochs=st.integers(1, 500), sigma=st.floats(1e-4, 1.0), seed=st.integers(0, 2**31))
def test_round_trip_property(lr, epochs, sigma, seed):
    cfg = parse_config(f"train.lr = {lr!r}\ntrain.epochs = {epochs}\ntopk.sigma = {sigma!r}\nseed = {seed}")
    assert parse_config(cfg.to_text()) == cfg
