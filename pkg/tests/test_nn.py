import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose
from torch import nn

from nn import (
    DTYPE, NonFiniteError, ShapeError, UNetConfig, adam_init, adam_step, backward, build_unet, crop_profiles,
    iter_batches, load_arrays, loss_mask, masked_mse, named_arrays, pad_profiles, parameter_count, time_embed,
    unet_forward,
)

SMALL = UNetConfig(sequence_length=10, base_width=8, depth=2, time_embed_dim=16)


def _inputs(config, batch=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn((batch, config.in_channels, config.padded_length), generator=g, dtype=DTYPE)
    t = torch.rand((batch,), generator=g, dtype=DTYPE)
    speed = torch.randint(0, config.cond_classes[0], (batch,), generator=g)
    direction = torch.randint(0, config.cond_classes[1], (batch,), generator=g)
    return x, t, speed, direction


def _randomize_output(model, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.out.weight.copy_(0.1 * torch.randn(model.out.weight.shape, generator=g, dtype=DTYPE))
        model.out.bias.copy_(0.1 * torch.randn(model.out.bias.shape, generator=g, dtype=DTYPE))
    return model


# --- padding ---

def test_padded_length_and_mask():
    assert SMALL.padded_length == 12
    assert UNetConfig().padded_length == 48
    x = torch.arange(20, dtype=DTYPE).reshape(1, 2, 10)
    padded = pad_profiles(x, SMALL)
    assert padded.shape == (1, 2, 12)
    assert torch.equal(padded[..., 10:], x[..., -1:].expand(1, 2, 2))
    assert torch.equal(crop_profiles(padded, SMALL), x)
    mask = loss_mask(SMALL)
    assert mask.sum().item() == 10
    pred = torch.zeros(1, 2, 12, dtype=DTYPE)
    target = torch.zeros(1, 2, 12, dtype=DTYPE)
    target[..., 10:] = 100.0
    assert masked_mse(pred, target, mask).item() == 0.0


def test_pad_rejects_too_long_input():
    with pytest.raises(ShapeError):
        pad_profiles(torch.zeros(1, 2, 13, dtype=DTYPE), SMALL)


def test_iter_batches_cover_range():
    assert [(s.start, s.stop) for s in iter_batches(5, 2)] == [(0, 2), (2, 4), (4, 5)]


# --- time embedding ---

def test_time_embed_at_zero_and_repeatability():
    emb = time_embed(0.0, 16)
    assert emb.shape == (16,)
    assert_allclose(emb[0::2].numpy(), 0.0)
    assert_allclose(emb[1::2].numpy(), 1.0)
    assert torch.equal(time_embed(0.37, 16), time_embed(0.37, 16))


def test_time_embed_distinguishes_a_fine_grid():
    emb = time_embed(torch.linspace(0, 1, 1000, dtype=DTYPE), 64)
    assert emb.shape == (1000, 64)
    distances = torch.cdist(emb, emb) + torch.eye(1000, dtype=DTYPE)
    assert distances.min().item() > 1e-6


def test_time_embed_rejects_odd_dimension():
    with pytest.raises(ValueError):
        time_embed(0.5, 7)


# --- forward ---

def test_fresh_network_outputs_zero():
    model = build_unet(SMALL, seed=0)
    out = unet_forward(model, *_inputs(SMALL))
    assert out.shape == (4, 2, 12)
    assert torch.count_nonzero(out).item() == 0


def test_samples_in_a_batch_are_independent():
    model = _randomize_output(build_unet(SMALL, seed=0))
    x, t, speed, direction = _inputs(SMALL, batch=3)
    together = model(x, t, speed, direction)
    for i in range(3):
        alone = model(x[i:i + 1], t[i:i + 1], speed[i:i + 1], direction[i:i + 1])
        assert_allclose(alone.detach().numpy(), together[i:i + 1].detach().numpy(), atol=1e-12)


def test_forward_rejects_bad_shape_and_non_finite_input():
    model = build_unet(SMALL, seed=0)
    x, t, speed, direction = _inputs(SMALL)
    with pytest.raises(ShapeError):
        model(x[..., :10], t, speed, direction)
    x[0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError):
        model(x, t, speed, direction)


def test_conditioning_changes_output():
    model = _randomize_output(build_unet(SMALL, seed=0))
    x, t, _, _ = _inputs(SMALL, batch=2)
    zeros = torch.zeros(2, dtype=torch.long)
    base = model(x, t, zeros, zeros)
    assert not torch.allclose(base, model(x, t, zeros + 1, zeros))
    assert not torch.allclose(base, model(x, t, zeros, zeros + 5))


def test_build_is_deterministic_per_seed():
    a, b, c = build_unet(SMALL, 3), build_unet(SMALL, 3), build_unet(SMALL, 4)
    for (name, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(pa, pb), name
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()) if pa.numel() > 8)
    assert parameter_count(a) == sum(p.numel() for p in c.parameters())


def test_arrays_round_trip_bit_exact():
    source = _randomize_output(build_unet(SMALL, seed=0))
    target = load_arrays(build_unet(SMALL, seed=9), named_arrays(source))
    inputs = _inputs(SMALL)
    assert torch.equal(source(*inputs), target(*inputs))
    with pytest.raises(ValueError):
        load_arrays(build_unet(SMALL, seed=0), {})


# --- gradients ---

class _TwoParams(nn.Module):
    def __init__(self):
        super().__init__()
        self.used = nn.Parameter(torch.arange(3, dtype=DTYPE))
        self.unused = nn.Parameter(torch.ones(2, dtype=DTYPE))


def test_backward_of_sum_and_unused_parameters():
    model = _TwoParams()
    grads = backward(model.used.sum(), model)
    assert list(grads) == ["used", "unused"]
    assert torch.equal(grads["used"], torch.ones(3, dtype=DTYPE))
    assert torch.equal(grads["unused"], torch.zeros(2, dtype=DTYPE))


def test_backward_matches_least_squares_gradient():
    layer = nn.Linear(3, 2, bias=False).to(DTYPE)
    x = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
    y = torch.tensor([0.3, 0.7], dtype=DTYPE)
    loss = 0.5 * ((layer(x) - y) ** 2).sum()
    grads = backward(loss, layer)
    expected = torch.outer(layer.weight.detach() @ x - y, x)
    assert_allclose(grads["weight"].numpy(), expected.numpy(), rtol=1e-12)


def test_backward_needs_a_recorded_graph():
    model = _TwoParams()
    with pytest.raises(RuntimeError):
        backward(torch.tensor(1.0, dtype=DTYPE), model)
    with pytest.raises(ValueError):
        backward(model.used * 2, model)


def test_unet_gradients_match_finite_differences():
    config = UNetConfig(sequence_length=16, base_width=8, depth=2, time_embed_dim=16)
    model = _randomize_output(build_unet(config, seed=2))
    inputs = _inputs(config, batch=2, seed=5)
    weights = torch.randn((2, 2, 16), generator=torch.Generator().manual_seed(6), dtype=DTYPE)

    def loss_fn():
        return (model(*inputs) * weights).sum()

    grads = backward(loss_fn(), model)
    params = dict(model.named_parameters())
    rng = np.random.default_rng(0)
    names = list(params)
    h = 1e-5
    for _ in range(50):
        name = names[rng.integers(len(names))]
        flat = params[name].data.view(-1)
        j = int(rng.integers(flat.numel()))
        original = flat[j].item()
        with torch.no_grad():
            flat[j] = original + h
            up = loss_fn().item()
            flat[j] = original - h
            down = loss_fn().item()
            flat[j] = original
        fd = (up - down) / (2 * h)
        g = grads[name].view(-1)[j].item()
        assert abs(fd - g) <= 1e-5 * max(abs(g), abs(fd)) + 1e-8, (name, j, fd, g)


# --- Adam ---

class _Vector(nn.Module):
    def __init__(self, n=3):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(n, dtype=DTYPE))


def test_adam_zero_gradient_leaves_parameters():
    model = _Vector()
    state = adam_init(model, lr=0.1)
    adam_step(state, model, {"w": torch.zeros(3, dtype=DTYPE)})
    assert torch.equal(model.w.detach(), torch.zeros(3, dtype=DTYPE))
    assert state.steps == 1


def test_adam_first_step_moves_by_learning_rate():
    model = _Vector()
    state = adam_init(model, lr=0.01)
    adam_step(state, model, {"w": torch.tensor([2.0, -0.5, 1e-3], dtype=DTYPE)})
    assert_allclose(model.w.detach().numpy(), [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_minimizes_a_quadratic_bowl():
    target = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
    model = _Vector()
    state = adam_init(model, lr=0.05)
    for _ in range(500):
        loss = ((model.w - target) ** 2).sum()
        adam_step(state, model, backward(loss, model))
    assert torch.linalg.norm(model.w.detach() - target).item() < 1e-3


def test_adam_rejects_non_finite_gradient():
    model = _Vector()
    state = adam_init(model)
    with pytest.raises(NonFiniteError, match="w"):
        adam_step(state, model, {"w": torch.tensor([0.0, float("inf"), 0.0], dtype=DTYPE)})
