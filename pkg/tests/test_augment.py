import numpy as np
import pytest

from liversearch.augment import AugmentConfig, augment, deterministic_config, make_views
from liversearch.imaging.windows import clip_and_scale, pseudo_rgb

# crop draws 4, flip coin 1, jitter 6 (apply coin, order, 4 factors), gray coin 1
CANONICAL_DRAWS = [
    "uniform",
    "uniform",
    "integers",
    "integers",
    "random",
    "random",
    "permutation",
    "uniform",
    "uniform",
    "uniform",
    "uniform",
    "random",
]


class SpyRng:
    """Duck-typed stand-in for np.random.Generator that records every draw."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)
        self.calls = []
        self.values = []

    def _record(self, name, value):
        self.calls.append(name)
        self.values.append(value)
        return value

    def uniform(self, *args, **kwargs):
        return self._record("uniform", self._rng.uniform(*args, **kwargs))

    def integers(self, *args, **kwargs):
        return self._record("integers", self._rng.integers(*args, **kwargs))

    def random(self, *args, **kwargs):
        return self._record("random", self._rng.random(*args, **kwargs))

    def permutation(self, *args, **kwargs):
        return self._record("permutation", self._rng.permutation(*args, **kwargs))

    def spawn(self, n):
        self.calls.append(("spawn", n))
        return self._rng.spawn(n)


def _pin_crop(**kwargs):
    base = dict(
        crop_scale=(1.0, 1.0),
        aspect_range=(1.0, 1.0),
        out_size=(16, 16),
        hflip_prob=0.0,
        jitter_strength=(0.0, 0.0, 0.0, 0.0),
        jitter_apply_prob=0.0,
        grayscale_prob=0.0,
    )
    base.update(kwargs)
    return AugmentConfig(**base)


def _img(seed=0, shape=(16, 16, 3), scale=1.0):
    return (np.random.default_rng(seed).random(shape) * scale).astype(np.float32)


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(hflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(grayscale_prob=-0.1)
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.8, 0.2))
    with pytest.raises(ValueError):
        AugmentConfig(aspect_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(jitter_strength=(0.4, -0.4, 0.4, 0.1))
    with pytest.raises(ValueError):
        AugmentConfig(out_size=(0, 8))


def test_config_json_round_trip(tmp_path):
    cfg = AugmentConfig(out_size=(64, 64), grayscale_prob=0.3, crop_scale=(0.5, 0.9))
    assert AugmentConfig.from_json(cfg.to_json()) == cfg
    path = tmp_path / "aug.json"
    path.write_text(__import__("json").dumps(cfg.to_json()), encoding="utf-8")
    assert AugmentConfig.load(path) == cfg


def test_augment_rejects_bad_input():
    cfg = _pin_crop()
    with pytest.raises(ValueError):
        augment(np.zeros((8, 8), np.float32), cfg, np.random.default_rng(0))
    bad = np.zeros((8, 8, 3), np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        augment(bad, cfg, np.random.default_rng(0))


def test_output_contract():
    cfg = AugmentConfig(out_size=(24, 20))
    for seed in range(8):
        out = augment(_img(seed, (40, 56, 3)), cfg, np.random.default_rng(seed))
        assert out.shape == (24, 20, 3)
        assert out.dtype == np.float32
        assert out.flags["C_CONTIGUOUS"]
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_draw_count_invariant_across_gates_and_seeds():
    """Every call consumes the same draw sequence no matter which coins land."""
    img = _img(3)
    gate_configs = [
        _pin_crop(hflip_prob=p_flip, jitter_apply_prob=p_jit, grayscale_prob=p_gray)
        for p_flip in (0.0, 1.0)
        for p_jit in (0.0, 1.0)
        for p_gray in (0.0, 1.0)
    ]
    gate_configs.append(AugmentConfig(out_size=(16, 16)))
    for cfg in gate_configs:
        for seed in range(10):
            spy = SpyRng(seed)
            augment(img, cfg, spy)
            assert spy.calls == CANONICAL_DRAWS


def test_same_seed_same_output():
    cfg = AugmentConfig(out_size=(16, 16))
    img = _img(1, (32, 32, 3))
    a = augment(img, cfg, np.random.default_rng(42))
    b = augment(img, cfg, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)
    c = augment(img, cfg, np.random.default_rng(43))
    assert not np.array_equal(a, c)


def test_deterministic_config_is_identity():
    img = _img(2)
    out = augment(img, deterministic_config((16, 16)), np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


def test_hflip_oracle():
    img = _img(4)
    out = augment(img, _pin_crop(hflip_prob=1.0), np.random.default_rng(0))
    np.testing.assert_array_equal(out, img[:, ::-1, :])


def test_grayscale_oracle():
    img = _img(5)
    out = augment(img, _pin_crop(grayscale_prob=1.0), np.random.default_rng(0))
    lum = img.astype(np.float64) @ [0.299, 0.587, 0.114]
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], lum, atol=1e-6)
    np.testing.assert_array_equal(out[:, :, 0], out[:, :, 1])
    np.testing.assert_array_equal(out[:, :, 0], out[:, :, 2])


def test_brightness_oracle():
    # headroom keeps the clip inactive so out == img * factor
    img = _img(6, scale=0.5)
    cfg = _pin_crop(jitter_strength=(0.4, 0.0, 0.0, 0.0), jitter_apply_prob=1.0)
    for seed in range(10):
        spy = SpyRng(seed)
        out = augment(img, cfg, spy)
        brightness = spy.values[7]
        assert 0.6 <= brightness <= 1.4
        np.testing.assert_allclose(out, img * brightness, atol=1e-5)


def test_jitter_skipped_when_coin_says_no():
    img = _img(7)
    cfg = _pin_crop(jitter_strength=(0.4, 0.4, 0.4, 0.1), jitter_apply_prob=0.0)
    out = augment(img, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


def test_crop_consumes_full_image_at_scale_one():
    # scale pinned to 1 with square aspect must crop the whole (square) image
    img = _img(8, (32, 32, 3))
    cfg = AugmentConfig(
        crop_scale=(1.0, 1.0),
        aspect_range=(1.0, 1.0),
        out_size=(32, 32),
        hflip_prob=0.0,
        jitter_strength=(0.0, 0.0, 0.0, 0.0),
        jitter_apply_prob=0.0,
        grayscale_prob=0.0,
    )
    for seed in range(5):
        out = augment(img, cfg, np.random.default_rng(seed))
        np.testing.assert_array_equal(out, img)


def test_make_views_spawns_child_streams_only():
    hu = np.random.default_rng(0).integers(-300, 400, (32, 32)).astype(np.int16)
    spy = SpyRng(0)
    v1, v2 = make_views(hu, AugmentConfig(out_size=(16, 16)), spy)
    assert spy.calls == [("spawn", 2)]
    assert v1.shape == v2.shape == (16, 16, 3)


def test_make_views_reproducible():
    hu = np.random.default_rng(1).integers(-300, 400, (32, 32)).astype(np.int16)
    cfg = AugmentConfig(out_size=(16, 16))
    a1, a2 = make_views(hu, cfg, np.random.default_rng(9))
    b1, b2 = make_views(hu, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a1, b1)
    np.testing.assert_array_equal(a2, b2)


def test_make_views_windows():
    # constant 100 HU: narrow (50, 150) -> 0.5, wide (-200, 300) -> 0.6
    hu = np.full((16, 16), 100, dtype=np.int16)
    cfg = deterministic_config((16, 16))
    v1, v2 = make_views(hu, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(v1, 0.5, atol=1e-6)
    np.testing.assert_allclose(v2, 0.6, atol=1e-6)
    s1, s2 = make_views(hu, cfg, np.random.default_rng(0), single_clip=True)
    np.testing.assert_allclose(s1, 0.6, atol=1e-6)
    np.testing.assert_allclose(s2, 0.6, atol=1e-6)


def test_single_clip_shares_view2_stream():
    # same parent seed: view 2 is bitwise identical across modes, view 1 differs
    hu = np.random.default_rng(2).integers(-300, 400, (32, 32)).astype(np.int16)
    cfg = AugmentConfig(out_size=(16, 16))
    d1, d2 = make_views(hu, cfg, np.random.default_rng(7))
    s1, s2 = make_views(hu, cfg, np.random.default_rng(7), single_clip=True)
    np.testing.assert_array_equal(d2, s2)
    assert not np.array_equal(d1, s1)


def test_views_differ_from_each_other():
    hu = np.random.default_rng(3).integers(-300, 400, (48, 48)).astype(np.int16)
    v1, v2 = make_views(hu, AugmentConfig(out_size=(16, 16)), np.random.default_rng(5))
    assert not np.array_equal(v1, v2)


def test_window_order_matches_clip_and_scale():
    hu = np.random.default_rng(4).integers(-500, 600, (16, 16)).astype(np.int16)
    cfg = deterministic_config((16, 16))
    v1, v2 = make_views(hu, cfg, np.random.default_rng(0))
    np.testing.assert_allclose(v1, pseudo_rgb(clip_and_scale(hu, cfg.narrow)), atol=1e-7)
    np.testing.assert_allclose(v2, pseudo_rgb(clip_and_scale(hu, cfg.wide)), atol=1e-7)
