import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcumini import sampler
from lcumini.lcu import TextInstruction
from lcumini.model import ModelConfig, init_weights
from lcumini.sampler import (
    GenerationSpec,
    SampleConfig,
    cfg_combine,
    composite_masked,
    euler_integrate,
    generate,
    masked_mse,
    psnr_from_mse,
)
from lcumini.tensor import ShapeError, Tensor

SMALL = ModelConfig(model_dim=16, n_layers=1, n_heads=2, patch=4, image_size=8)


@pytest.fixture(scope="module")
def weights():
    return init_weights(SMALL, seed=0)


def _spec(rng, mask=None, refs=0):
    img = rng.random((3, 8, 8)).astype(np.float32)
    mask = (rng.random((1, 8, 8)) > 0.5).astype(np.float32) if mask is None else mask
    return GenerationSpec(TextInstruction.from_words("fill blue disk"), img, mask,
                          [rng.random((3, 8, 8)).astype(np.float32) for _ in range(refs)])


# -- guidance ---------------------------------------------------------------------

def test_cfg_combine_endpoints():
    rng = np.random.default_rng(0)
    vc, vu = rng.standard_normal(10) * 1e6, rng.standard_normal(10)
    assert np.array_equal(cfg_combine(vc, vu, 1.0), vc)
    assert np.array_equal(cfg_combine(vc, vu, 0.0), vu)
    assert np.all(cfg_combine(np.ones(3), np.zeros(3), 2.0) == 2.0)


def test_cfg_combine_tensors_and_errors():
    out = cfg_combine(Tensor(np.ones(3)), Tensor(np.zeros(3)), 0.5)
    np.testing.assert_allclose(out.data, 0.5)
    with pytest.raises(ShapeError):
        cfg_combine(np.ones(3), np.ones(4), 2.0)


# -- Euler ------------------------------------------------------------------------

def test_euler_constant_field_is_exact():
    rng = np.random.default_rng(1)
    x0, x1 = rng.standard_normal((3, 4, 4)), rng.random((3, 4, 4))
    for steps in (1, 3, 20):
        out = euler_integrate(lambda xs, t: [x1 - x0], [x0], steps)[0]
        np.testing.assert_allclose(out, x1, atol=1e-12)


def test_euler_single_step():
    out = euler_integrate(lambda xs, t: [xs[0] * 3.0 + t], [np.array([2.0])], 1)
    assert out[0][0] == 2.0 + 6.0


def test_euler_first_order_convergence():
    errs = []
    for steps in (10, 20, 40, 80, 160):
        x = euler_integrate(lambda xs, t: [xs[0]], [np.array([1.0])], steps)[0][0]
        errs.append(abs(x - math.e))
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(0.8 <= p <= 1.2 for p in orders), orders


def test_euler_rejects_non_finite():
    with pytest.raises(sampler.SamplingError):
        euler_integrate(lambda xs, t: [np.full(1, np.inf)], [np.zeros(1)], 2)
    with pytest.raises(ValueError):
        euler_integrate(lambda xs, t: xs, [np.zeros(1)], 0)


# -- compositing ------------------------------------------------------------------

def test_composite_extremes_and_checkerboard():
    rng = np.random.default_rng(2)
    gen, inp = rng.random((3, 4, 4)), rng.random((3, 4, 4))
    assert np.array_equal(composite_masked(gen, inp, np.zeros((1, 4, 4))), inp)
    assert np.array_equal(composite_masked(gen, inp, np.ones((1, 4, 4))), gen)
    board = (np.indices((4, 4)).sum(axis=0) % 2)[None].astype(float)
    out = composite_masked(gen, inp, board)
    assert np.array_equal(out, board * gen + (1 - board) * inp)


def test_composite_shape_errors():
    with pytest.raises(ShapeError):
        composite_masked(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), np.zeros((1, 4, 4)))
    with pytest.raises(ShapeError):
        composite_masked(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), np.zeros((1, 5, 4)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unmasked_pixels_preserved(seed):
    rng = np.random.default_rng(seed)
    gen = rng.standard_normal((3, 6, 6)) * 10.0 ** rng.integers(-3, 4)
    inp = rng.random((3, 6, 6)).astype(np.float32)
    mask = (rng.random((1, 6, 6)) > rng.random()).astype(np.float32)
    out = composite_masked(gen, inp, mask)
    keep = np.broadcast_to(mask == 0, inp.shape)
    assert np.array_equal(out[keep], inp[keep])


# -- generate ---------------------------------------------------------------------

def test_generate_zero_mask_returns_input(weights):
    spec = _spec(np.random.default_rng(3), mask=np.zeros((1, 8, 8), np.float32))
    out = generate(weights, spec, SampleConfig(steps=4))
    assert np.array_equal(out, spec.input_image)


def test_generate_full_mask_is_clamped_generation(weights, monkeypatch):
    rng = np.random.default_rng(5)
    spec = _spec(rng, mask=np.ones((1, 8, 8), np.float32))
    captured = {}
    real = sampler.euler_integrate

    def spy(fn, x_init, steps):
        out = real(fn, x_init, steps)
        captured["final"] = out[-1]
        return out

    monkeypatch.setattr(sampler, "euler_integrate", spy)
    out = generate(weights, spec, SampleConfig(steps=3))
    assert np.array_equal(out, np.clip(captured["final"], 0, 1))
    # the composite step itself never reads input pixels under a full mask
    other = composite_masked(captured["final"], np.zeros_like(spec.input_image), spec.mask)
    assert np.array_equal(np.clip(other, 0, 1), out)


@pytest.mark.parametrize("omega,per_step", [(1.0, 1), (0.0, 2), (3.0, 2)])
def test_generate_model_evaluations(weights, monkeypatch, omega, per_step):
    calls = []
    real = sampler.forward_batch

    def counting(*args, **kw):
        calls.append(args[3] is None)
        return real(*args, **kw)

    monkeypatch.setattr(sampler, "forward_batch", counting)
    stats = {}
    generate(weights, _spec(np.random.default_rng(6)), SampleConfig(steps=5, guidance_scale=omega), stats)
    assert len(calls) == 5 * per_step == stats["model_evals"]
    assert calls.count(True) == (0 if per_step == 1 else 5)


def test_generate_deterministic_with_references(weights):
    spec = _spec(np.random.default_rng(7), refs=1)
    a = generate(weights, spec, SampleConfig(steps=4, seed=11))
    b = generate(weights, spec, SampleConfig(steps=4, seed=11))
    c = generate(weights, spec, SampleConfig(steps=4, seed=12))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_generate_geometry_mismatch(weights):
    spec = GenerationSpec(TextInstruction.null(), np.zeros((3, 16, 16)), np.ones((1, 16, 16)))
    with pytest.raises(ShapeError):
        generate(weights, spec, SampleConfig())


def test_sample_config_validation():
    with pytest.raises(ValueError):
        SampleConfig(steps=0)


# -- metrics ----------------------------------------------------------------------

def test_psnr_conventions():
    assert psnr_from_mse(0.0) == 99.0
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    img = np.random.default_rng(8).random((3, 4, 4))
    mask = np.zeros((1, 4, 4))
    mask[0, 1, 1] = 1
    assert psnr_from_mse(masked_mse(img, img, mask)) == 99.0
    other = img.copy()
    other[:, 1, 1] += 0.1
    other[:, 0, 0] += 5.0  # outside the mask, ignored
    assert masked_mse(other, img, mask) == pytest.approx(0.01)
