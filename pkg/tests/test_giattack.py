import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from decifr import fedsim, giattack, segnet
from decifr.errors import InvalidConfigError, NonFiniteError, ProtocolError
from decifr.synthcell import LayoutMask, SemImage, SynthesisParams, generate_layout, synthesize_sem


@pytest.fixture(scope="module")
def tiny():
    return segnet.init_model(segnet.preset("tiny"), 2)


@pytest.fixture(scope="module")
def sample():
    mask = generate_layout("diffusion", "coarse", 32, 5)
    img = synthesize_sem(mask, SynthesisParams(image_size=32), 1)
    small = LayoutMask(mask.pixels[::2, ::2].copy(), "diffusion", "coarse", "t0")
    x = torch.as_tensor(SemImage(img.pixels[::2, ::2].copy(), "t0").as_unit())
    return x, small


def _single_step_target(params, x, mask, eta):
    client = fedsim.ClientState(0, x[None, None], torch.as_tensor(mask.pixels, dtype=x.dtype)[None, None], ["t0"])
    curr, _ = fedsim.local_train(params, client, fedsim.FLConfig(local_epochs=1, learning_rate=eta))
    return params, curr


def test_extract_arithmetic():
    t = giattack.extract_gradients(torch.tensor([1.0, 2.0]), torch.tensor([0.9, 2.0]), 0.01)
    assert t.grad.dtype == torch.float64
    assert torch.allclose(t.grad, torch.tensor([10.0, 0.0], dtype=torch.float64), rtol=1e-6, atol=1e-12)


def test_extract_equal_weights_zero():
    w = torch.randn(50)
    assert torch.count_nonzero(giattack.extract_gradients(w, w, 0.1).grad) == 0


def test_extract_errors():
    with pytest.raises(InvalidConfigError):
        giattack.extract_gradients(torch.zeros(2), torch.zeros(2), 0.0)
    with pytest.raises(ProtocolError):
        giattack.extract_gradients(torch.zeros(2), torch.zeros(3), 0.1)
    with pytest.raises(NonFiniteError):
        giattack.extract_gradients(torch.tensor([math.inf]), torch.zeros(1), 0.1)


def test_extract_reproduces_param_grad(tiny, sample):
    x, mask = sample
    prev, curr = _single_step_target(tiny, x, mask, 0.01)
    g = giattack.extract_gradients(prev, curr, 0.01).grad
    truth = segnet.param_grad(tiny, x, torch.as_tensor(mask.pixels, dtype=x.dtype)).to(torch.float64)
    assert float(torch.linalg.vector_norm(g - truth) / torch.linalg.vector_norm(truth)) < 1e-5


def test_grad_match_examples():
    g = torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64)
    assert float(giattack.grad_match_loss(g, g, 0.5)) == pytest.approx(0.0, abs=1e-15)
    gt = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert float(giattack.grad_match_loss(-gt, gt, 0.5)) == pytest.approx(2.0, abs=1e-12)
    assert float(giattack.grad_match_loss(2 * g, g, 0.0)) == pytest.approx(0.0, abs=1e-12)


def test_grad_match_zero_norm_drops_cosine():
    z = torch.zeros(3, dtype=torch.float64)
    g = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
    assert float(giattack.grad_match_loss(z, g, 0.0)) == 0.0
    assert float(giattack.grad_match_loss(z, g, 1.0)) == pytest.approx(14 / 3)


def test_grad_match_length_mismatch():
    with pytest.raises(ProtocolError):
        giattack.grad_match_loss(torch.zeros(2), torch.zeros(3), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(0, 1))
def test_grad_match_nonnegative(a, b, alpha):
    v = float(giattack.grad_match_loss(torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64), alpha))
    assert v >= -1e-12


def test_tv_examples():
    assert float(giattack.tv_loss(torch.full((5, 5), 0.7))) == 0.0
    assert float(giattack.tv_loss(torch.tensor([[0.0, 1.0], [0.0, 1.0]]))) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_tv_nonnegative_and_translation_invariant(seed):
    x = torch.rand((8, 8), generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    assert float(giattack.tv_loss(x)) >= 0
    assert float(giattack.tv_loss(x + 0.25)) == pytest.approx(float(giattack.tv_loss(x)), abs=1e-12)


def test_total_loss_without_regularisers_is_grad_loss(tiny, sample):
    x, mask = sample
    prev, curr = _single_step_target(tiny, x, mask, 0.01)
    target = giattack.extract_gradients(prev, curr, 0.01)
    cfg = giattack.GIAConfig(lambda_tv=0.0, lambda_dummy=0.0)
    total, parts = giattack.total_loss(torch.full_like(x, 0.5), mask, target, cfg, tiny)
    assert parts["L_total"] == parts["L_grad"]
    assert float(total.detach()) == parts["L_grad"]


def test_total_loss_dummy_clamp(tiny, sample):
    x, mask = sample
    target = giattack.extract_gradients(*_single_step_target(tiny, x, mask, 0.01), 0.01)
    cfg = giattack.GIAConfig(lambda_tv=0.0, lambda_dummy=5.0, dummy_clamp=0.01)
    _, parts = giattack.total_loss(torch.full_like(x, 0.5), mask, target, cfg, tiny)
    assert parts["L_dummy"] > 0.01
    assert parts["L_dummy_clamped"] == pytest.approx(0.01)
    assert parts["L_total"] == pytest.approx(parts["L_grad"] - 5 * 0.01, abs=1e-12)


def test_gia_config_validation():
    for kw in (dict(alpha=1.5), dict(lambda_tv=-1), dict(iterations=0), dict(init_mode="zeros"), dict(eta_grid=[])):
        with pytest.raises(InvalidConfigError):
            giattack.GIAConfig(**kw)


def test_run_gia_converges_on_exact_gradient(tiny, sample):
    x, mask = sample
    target = giattack.extract_gradients(*_single_step_target(tiny, x, mask, 0.01), 0.01)
    cfg = giattack.GIAConfig(iterations=400, step_size=0.05, lambda_tv=0.0, log_interval=10, seed=1)
    rec = giattack.run_gia(target, mask, cfg, tiny)
    assert rec.final["L_grad"] < 0.05 * rec.trace[0]["L_grad"]
    assert rec.x_prime.min() >= 0 and rec.x_prime.max() <= 1
    assert not rec.diverged and rec.iterations_run == 400


def test_run_gia_zero_target_flattens(tiny, sample):
    _, mask = sample
    target = giattack.GradientTarget(torch.zeros(tiny.num_params, dtype=torch.float64), 0.01)
    cfg = giattack.GIAConfig(iterations=60, lambda_tv=1.0, lambda_dummy=0.0, step_size=0.02)
    rec = giattack.run_gia(target, mask, cfg, tiny)
    assert rec.final["L_tv"] < rec.trace[0]["L_tv"]


def test_run_gia_divergence_flag(tiny, sample):
    x, mask = sample
    target = giattack.extract_gradients(*_single_step_target(tiny, x, mask, 0.01), 0.01)
    cfg = giattack.GIAConfig(iterations=100, divergence_factor=0.0, divergence_patience=3, log_interval=1)
    rec = giattack.run_gia(target, mask, cfg, tiny)
    assert rec.diverged and rec.iterations_run < 100


def test_run_gia_deterministic(tiny, sample):
    x, mask = sample
    target = giattack.extract_gradients(*_single_step_target(tiny, x, mask, 0.01), 0.01)
    cfg = giattack.GIAConfig(iterations=20, seed=3)
    a = giattack.run_gia(target, mask, cfg, tiny)
    b = giattack.run_gia(target, mask, cfg, tiny)
    assert np.array_equal(a.x_prime, b.x_prime) and a.trace == b.trace


def test_grid_search(tiny, sample):
    x, mask = sample
    prev, curr = _single_step_target(tiny, x, mask, 0.01)
    cfg = giattack.GIAConfig(grid_iterations=40, step_size=0.05, lambda_tv=0.0)
    eta, summary = giattack.grid_search_eta(prev, curr, [0.01], mask, cfg, tiny)
    assert eta == 0.01 and len(summary) == 1
    eta, summary = giattack.grid_search_eta(prev, curr, [0.001, 0.01, 0.1], mask, cfg, tiny)
    assert [s["eta"] for s in summary] == [0.001, 0.01, 0.1]
    assert eta == min(summary, key=lambda s: s["relative_mismatch"])["eta"]


def test_grid_search_picks_true_eta(tiny, sample):
    x, mask = sample
    prev, curr = _single_step_target(tiny, x, mask, 0.01)
    cfg = giattack.GIAConfig(grid_iterations=400, step_size=0.05, lambda_tv=0.0)
    eta, summary = giattack.grid_search_eta(prev, curr, [0.001, 0.01, 0.1], mask, cfg, tiny)
    assert eta == 0.01, summary


def test_record_roundtrip(tmp_path, tiny, sample):
    x, mask = sample
    target = giattack.extract_gradients(*_single_step_target(tiny, x, mask, 0.01), 0.01)
    rec = giattack.run_gia(target, mask, giattack.GIAConfig(iterations=12, log_interval=5), tiny)
    out = giattack.write_record(rec, tmp_path / "cell", extra_meta={"target_id": "t0"})
    back = giattack.read_x_prime(out)
    assert np.allclose(back, rec.x_prime, atol=1e-7)
    trace = giattack.read_trace(out)
    assert [r["iteration"] for r in trace] == [0, 5, 10, 12]
    assert set(giattack.TRACE_COLUMNS) <= set(trace[0])
    assert (out / "x_prime.png").exists() and (out / "meta.json").exists()
