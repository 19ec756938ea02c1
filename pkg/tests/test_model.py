import numpy as np
import pytest
import torch

from robust_sfda.losses import bce_loss, clamp_prob, source_loss
from robust_sfda.model import (
    Checkpoint,
    ModelDescriptor,
    clone_model,
    flat_parameters,
    forward,
    init_model,
    load_checkpoint,
)

SMALL = ModelDescriptor(base_width=4, depth=2, dropout_rate=0.3)


def image(seed=0, size=16):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


def test_deterministic_forward_and_output_ranges():
    m = init_model(0, SMALL)
    a, b = forward(m, image()), forward(m, image())
    assert all(torch.equal(x, y) for x, y in zip(a, b))
    assert a.mask_prob.shape == (2, 16, 16) and a.boundary.shape == (2, 16, 16)
    assert ((a.mask_prob > 0) & (a.mask_prob < 1)).all()
    assert ((a.boundary >= 0) & (a.boundary <= 1)).all()
    assert a.features.shape == (SMALL.base_width, 16, 16)


def test_stochastic_passes_differ():
    m = init_model(0, ModelDescriptor(base_width=4, depth=2, dropout_rate=0.5))
    a = forward(m, image(), stochastic=True).mask_prob
    b = forward(m, image(), stochastic=True).mask_prob
    assert (a - b).abs().max() > 0


def test_default_descriptor_accepts_128_and_32():
    m = init_model(0)
    for s in (32, 128):
        assert forward(m, image(size=s)).mask_prob.shape == (2, s, s)


def test_shape_error():
    m = init_model(0)
    with pytest.raises(ValueError):
        forward(m, image(size=20))
    with pytest.raises(ValueError):
        m(torch.rand(1, 1, 32, 32))


def test_init_seeds():
    assert torch.equal(flat_parameters(init_model(0, SMALL)), flat_parameters(init_model(0, SMALL)))
    assert not torch.equal(flat_parameters(init_model(0, SMALL)), flat_parameters(init_model(1, SMALL)))


def test_init_does_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    init_model(5, SMALL)
    assert torch.equal(torch.rand(3), expected)


def test_clone_semantics():
    m = init_model(0, SMALL)
    before = forward(m, image()).mask_prob
    c = clone_model(m)
    assert torch.equal(flat_parameters(c), flat_parameters(m))
    assert torch.equal(forward(c, image()).mask_prob, before)
    assert torch.equal(flat_parameters(clone_model(c)), flat_parameters(m))
    with torch.no_grad():
        for p in c.parameters():
            p.add_(0.1)
    assert torch.equal(forward(m, image()).mask_prob, before)


def test_checkpoint_roundtrip(tmp_path):
    m = init_model(3, SMALL)
    ck = Checkpoint(m, "robust_source", seed=3, config={"epochs": 1}, loss_trace=[1.0, 0.5])
    path = ck.save(tmp_path / "a.ckpt")
    back = load_checkpoint(path)
    assert torch.equal(flat_parameters(back.model), flat_parameters(m))
    assert back.role == "robust_source" and back.seed == 3 and back.loss_trace == [1.0, 0.5]
    assert back.model.descriptor == SMALL
    # deterministic bytes
    ck.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_unknown_role():
    with pytest.raises(ValueError):
        Checkpoint(init_model(0, SMALL), "teacher")


def test_parameter_gradients_match_finite_differences():
    # scalar probes on a handful of parameters, float64 end to end
    m = init_model(0, SMALL).double()
    x = image(1).double().unsqueeze(0)
    g = torch.Generator().manual_seed(2)
    y = (torch.rand(1, 2, 16, 16, generator=g) < 0.3).double()
    yb = torch.rand(1, 2, 16, 16, generator=g, dtype=torch.float64)

    def loss():
        out = m(x)
        return source_loss(clamp_prob(out.mask_prob), out.boundary, y, yb).total

    params = dict(m.named_parameters())
    probes = [("mask_head.weight", (0, 1, 0, 0)), ("encoders.0.0.weight", (1, 0, 1, 1)), ("boundary_head.bias", (1,))]
    grads = torch.autograd.grad(loss(), [params[n] for n, _ in probes])
    h = 1e-6
    for (name, idx), g_auto in zip(probes, grads):
        p = params[name]
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            fp = loss().item()
            p[idx] = old - h
            fm = loss().item()
            p[idx] = old
        fd = (fp - fm) / (2 * h)
        assert abs(g_auto[idx].item() - fd) <= 1e-4 * max(abs(fd), 1e-8)
