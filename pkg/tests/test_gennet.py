import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from changen.core import ValidationError
from changen.gennet import (NUM_LEVELS, CheckpointError, DeStyle, Generator, GeneratorConfig, MaskedTransition,
                            encode_image, group_count, level_shape, load_generator, masking, save_generator,
                            synthesize)


@pytest.fixture(scope="module")
def small_gen():
    torch.manual_seed(0)
    return Generator(GeneratorConfig(num_classes=3, width_scale=0.125)).eval()


def _inputs(h=64, w=64, seed=0, classes=3):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1, 1, (h, w, 3)).astype(np.float32)
    m0 = np.zeros((h, w), dtype=np.int64)
    m0[h // 4:h // 2, w // 4:w // 2] = 1
    m1 = m0.copy()
    m1[h // 2:, w // 2:] = classes - 1
    return img, m0, m1


def test_level_shape_formula_examples():
    assert level_shape(0, 256, 256, 1.0) == (512, 8, 8)
    assert level_shape(5, 256, 256, 1.0) == (16, 256, 256)
    assert level_shape(0, 64, 64, 1.0) == (512, 2, 2)
    assert level_shape(0, 256, 256, 0.125) == (64, 8, 8)


def test_encoder_levels_match_formula(small_gen):
    img, _, _ = _inputs(64, 96)
    feats = encode_image(img, small_gen)
    assert len(feats) == NUM_LEVELS
    for i, f in enumerate(feats):
        assert f.shape == level_shape(i, 64, 96, 0.125)
        assert np.isfinite(f).all()


def test_indivisible_size_rejected(small_gen):
    img, m0, m1 = _inputs(64, 64)
    with pytest.raises(ValidationError, match="pad"):
        synthesize(m1[:48], img[:48], m0[:48], small_gen)
    with pytest.raises(ValidationError):
        encode_image(img[:, :40], small_gen)


def test_group_count():
    assert group_count(64) == 32
    assert group_count(8) == 8
    assert group_count(48) == 24
    assert group_count(1) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 1), (2, 3), (4, 4), (8, 6)]))
def test_masking_selector(seed, hw):
    g = torch.Generator().manual_seed(seed)
    h, w = hw
    f_t = torch.randn(2, 5, h, w, generator=g)
    f_t1 = torch.randn(2, 5, h, w, generator=g)
    mask = torch.randint(0, 3, (2, h, w), generator=g)
    out = masking(f_t, f_t1, mask)
    fg = (mask > 0)[:, None].expand_as(f_t)
    ref = f_t.clone()
    ref[fg] = f_t1[fg]
    assert torch.equal(out, ref)
    assert torch.equal(masking(f_t, f_t, mask), f_t)


def test_masking_extremes():
    f_t, f_t1 = torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8)
    assert torch.equal(masking(f_t, f_t1, torch.zeros(1, 8, 8, dtype=torch.long)), f_t)
    assert torch.equal(masking(f_t, f_t1, torch.ones(1, 8, 8, dtype=torch.long)), f_t1)
    with pytest.raises(ValidationError):
        masking(f_t, f_t1[:, :2], torch.zeros(1, 8, 8, dtype=torch.long))


def test_masking_downsamples_nearest():
    mask = torch.zeros(1, 4, 4, dtype=torch.long)
    mask[0, 0, 0] = 1  # nearest 2x downsample samples the top-left of each 2x2 cell
    out = masking(torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2), mask)
    assert out[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_destyle_moments():
    torch.manual_seed(0)
    d = DeStyle(8)
    x = torch.randn(3, 8, 16, 16) * 5 + 2
    y = d.normalized(x)
    assert y.mean(dim=(2, 3)).abs().max() < 1e-4
    assert (y.var(dim=(2, 3), unbiased=False) - 1).abs().max() < 1e-3
    assert d(x).shape == x.shape


def test_destyle_zero_variance_guard():
    d = DeStyle(4)
    assert torch.equal(d.normalized(torch.full((1, 4, 5, 5), 3.0)), torch.zeros(1, 4, 5, 5))
    assert torch.equal(d.normalized(torch.randn(1, 4, 1, 1)), torch.zeros(1, 4, 1, 1))


def _transition_inputs(seed=0):
    g = torch.Generator().manual_seed(seed)
    f_t = torch.randn(1, 8, 8, 8, generator=g)
    f_t1 = torch.randn(1, 8, 8, 8, generator=g)
    m0 = torch.zeros(1, 8, 8, dtype=torch.long)
    m0[0, 2:6, 2:6] = 1
    m1 = torch.randint(0, 3, (1, 8, 8), generator=g)
    return f_t, f_t1, m0, m1


def test_transition_shape():
    torch.manual_seed(0)
    mt = MaskedTransition(8, 3, 16).eval()
    f_t, f_t1, m0, m1 = _transition_inputs()
    assert mt(f_t, f_t1, m0, m1).shape == f_t.shape


def test_no_masking_ignores_post_features():
    torch.manual_seed(0)
    mt = MaskedTransition(8, 3, 16, use_masking=False).eval()
    f_t, f_t1, m0, m1 = _transition_inputs()
    fg = (m0 > 0)[:, None].expand_as(f_t1)
    perturbed = f_t1.clone()
    perturbed[fg] += 10.0
    with torch.no_grad():
        assert torch.equal(mt(f_t, f_t1, m0, m1), mt(f_t, perturbed, m0, m1))
        assert torch.equal(mt(f_t, f_t1, m0, m1), mt(f_t, torch.randn_like(f_t1), m0, m1))


def test_masking_ignores_pre_features_on_foreground():
    f_t, f_t1, m0, _ = _transition_inputs()
    fg = (m0 > 0)[:, None].expand_as(f_t)
    perturbed = f_t.clone()
    perturbed[fg] -= 7.0
    assert torch.equal(masking(f_t, f_t1, m0), masking(perturbed, f_t1, m0))
    torch.manual_seed(0)
    mt = MaskedTransition(8, 3, 16, use_masking=True).eval()
    with torch.no_grad():
        a = mt(f_t, f_t1, m0, torch.zeros_like(m0))
        b = mt(perturbed, f_t1, m0, torch.zeros_like(m0))
    assert torch.equal(a, b)


def test_decode_step(small_gen):
    img, m0, m1 = _inputs()
    with torch.no_grad():
        _, feats = small_gen(torch.as_tensor(m1)[None], torch.as_tensor(img).permute(2, 0, 1)[None],
                             torch.as_tensor(m0)[None], generator=torch.Generator().manual_seed(0),
                             return_features=True)
        z = small_gen.sample_noise(1, 64, 64, torch.Generator().manual_seed(1))
        cond = small_gen.conditioning(torch.as_tensor(m1)[None], z)
        f0 = feats["post"][0]
        out = small_gen.decode_step(0, f0, torch.zeros_like(f0), cond)
        assert torch.equal(out, small_gen.blocks[0](f0, cond))
        assert out.shape[1:] == level_shape(1, 64, 64, 0.125)
        assert torch.isfinite(out).all()
        with pytest.raises(ValidationError):
            small_gen.decode_step(0, f0, torch.zeros(1, 1, 2, 2), cond)
    for i in range(NUM_LEVELS):
        assert feats["delta"][i].shape == feats["pre"][i].shape == feats["post"][i].shape


def test_synthesize_contract(small_gen):
    img, m0, m1 = _inputs()
    a = synthesize(m1, img, m0, small_gen, seed=3)
    b = synthesize(m1, img, m0, small_gen, seed=3)
    c = synthesize(m1, img, m0, small_gen, seed=4)
    assert a.shape == (64, 64, 3)
    assert a.min() >= -1 and a.max() <= 1
    assert np.array_equal(a, b)
    assert np.abs(a - c).mean() > 0


def test_fully_convolutional_sizes(small_gen):
    for h, w in [(32, 32), (96, 64), (256, 256)]:
        img, m0, m1 = _inputs(h, w)
        assert synthesize(m1, img, m0, small_gen).shape == (h, w, 3)


def test_spectral_norm_on_all_convs(small_gen):
    convs = [m for m in small_gen.modules() if isinstance(m, torch.nn.Conv2d)]
    assert convs
    assert all(hasattr(m, "parametrizations") and "weight" in m.parametrizations for m in convs)


def test_gradient_check_float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        torch.manual_seed(0)
        gen = Generator(GeneratorConfig(num_classes=3, width_scale=0.125)).eval()
        img, m0, m1 = _inputs(32, 32)
        x = torch.as_tensor(img, dtype=torch.float64).permute(2, 0, 1)[None]
        a, b = torch.as_tensor(m0)[None], torch.as_tensor(m1)[None]
        z = gen.sample_noise(1, 32, 32, torch.Generator().manual_seed(0))
        wts = torch.randn(1, 3, 32, 32, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

        def f():
            return (gen(b, x, a, z) * wts).sum()

        params = [p for p in gen.parameters() if p.requires_grad]
        gen.zero_grad()
        f().backward()
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 10:
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            analytic = p.grad[idx].item()
            eps = 1e-6
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                up = f().item()
                p[idx] = orig - eps
                down = f().item()
                p[idx] = orig
            numeric = (up - down) / (2 * eps)
            if max(abs(analytic), abs(numeric)) < 1e-7:
                continue
            assert abs(analytic - numeric) / max(abs(analytic), abs(numeric)) < 1e-3, (idx, analytic, numeric)
            checked += 1
    finally:
        torch.set_default_dtype(prev)


def test_checkpoint_roundtrip(tmp_path, small_gen):
    path = tmp_path / "g.pt"
    save_generator(path, small_gen, iteration=7)
    blob = torch.load(path, weights_only=False)
    assert {"format_version", "config_hash", "iteration", "state"} <= set(blob)
    assert any(k.endswith("_u") for k in blob["state"])  # spectral norm power-iteration state
    loaded = load_generator(path, expected=small_gen.cfg)
    for (k, v), (k2, v2) in zip(small_gen.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    img, m0, m1 = _inputs()
    assert np.array_equal(synthesize(m1, img, m0, small_gen, seed=1), synthesize(m1, img, m0, loaded, seed=1))


def test_checkpoint_hash_refusal(tmp_path, small_gen):
    path = tmp_path / "g.pt"
    save_generator(path, small_gen)
    other = GeneratorConfig(num_classes=3, width_scale=0.125, use_masking=False)
    with pytest.raises(CheckpointError):
        load_generator(path, expected=other)
    assert load_generator(path, expected=other, force=True).cfg == small_gen.cfg
    torch.save({"format_version": 99, "kind": "generator"}, tmp_path / "bad.pt")
    with pytest.raises(CheckpointError):
        load_generator(tmp_path / "bad.pt")


def test_ablation_flags_build():
    for masking_on in (True, False):
        for destyle_on in (True, False):
            gen = Generator(GeneratorConfig(num_classes=2, width_scale=0.0625, use_masking=masking_on,
                                            use_destyle=destyle_on))
            img, m0, m1 = _inputs(32, 32, classes=2)
            assert synthesize(m1, img, m0, gen).shape == (32, 32, 3)
