import math

import numpy as np
import pytest
import torch

from fsvfm.backbone import PROFILES, assemble_full
from fsvfm.errors import ConfigError, StateError
from fsvfm.id_branch import (
    MaskedRepRegressor,
    OnlineBranch,
    build_target,
    ema_momentum,
    ema_update,
    forward_online_rep,
    forward_online_variant,
    forward_target,
    forward_target_variant,
    loss_id_variant,
    loss_sim,
    reset_zero_norm_warnings,
    zero_norm_warnings,
)

MICRO = PROFILES["micro"]


def make_online(seed=0):
    torch.manual_seed(seed)
    return OnlineBranch(MICRO, 64, proj_hidden=32, proj_out=16).double()


def rand_images(batch=2, seed=1):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, 64, 64, generator=gen, dtype=torch.float64)


def test_target_is_exact_copy_without_gradients():
    online = make_online()
    target = build_target(online)
    o_params = dict(online.encoder.named_parameters())
    for name, param in target.encoder.named_parameters():
        assert torch.equal(param, o_params[name])
        assert not param.requires_grad
    assert not hasattr(target, "predictor")


def test_ema_fixed_point_and_copy():
    online = make_online()
    target = build_target(online)
    before = {n: p.clone() for n, p in target.named_parameters()}
    ema_update(target, online, tau=1.0)
    for name, param in target.named_parameters():
        assert torch.equal(param, before[name])

    with torch.no_grad():
        for p in online.parameters():
            p.add_(0.25)
    ema_update(target, online, tau=0.0)
    o_named = dict(online.named_parameters())
    for name, param in target.named_parameters():
        assert torch.equal(param, o_named[name])


def test_ema_scalar_example():
    online = make_online()
    target = build_target(online)
    with torch.no_grad():
        for p in target.parameters():
            p.zero_()
        for p in online.encoder.parameters():
            p.fill_(1.0)
        for p in online.rep_decoder.parameters():
            p.fill_(1.0)
        for p in online.projector.parameters():
            p.fill_(1.0)
    ema_update(target, online, tau=0.99)
    for param in target.parameters():
        assert torch.allclose(param, torch.full_like(param, 0.01), atol=1e-15)


def test_ema_shape_mismatch():
    online = make_online()
    target = build_target(online)
    target.projector.fc1.weight.data = torch.zeros(3, 3, dtype=torch.float64)
    with pytest.raises(StateError):
        ema_update(target, online, tau=0.5)
    with pytest.raises(StateError):
        ema_update(build_target(online), online, tau=1.5)


def test_ema_momentum_schedule():
    assert ema_momentum(0, 100, base=0.996) == pytest.approx(0.996)
    assert ema_momentum(100, 100, base=0.996) == pytest.approx(1.0)
    mid = ema_momentum(50, 100, base=0.996)
    assert 0.996 < mid < 1.0
    assert ema_momentum(5, 0, base=0.9) == 0.9


def test_loss_sim_examples():
    v = torch.tensor([[0.3, -0.7, 0.2]], dtype=torch.float64)
    assert float(loss_sim(v, v.clone())) == pytest.approx(-1.0, abs=1e-12)
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    b = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert float(loss_sim(a, b)) == pytest.approx(0.0, abs=1e-12)
    c = torch.tensor([[1.0, 1.0]], dtype=torch.float64)
    assert float(loss_sim(a, c)) == pytest.approx(-1 / math.sqrt(2), abs=1e-12)


def test_loss_sim_range_and_zero_norm_guard():
    gen = torch.Generator().manual_seed(7)
    for _ in range(50):
        a = torch.randn(4, 8, generator=gen, dtype=torch.float64) * 10
        b = torch.randn(4, 8, generator=gen, dtype=torch.float64) * 0.1
        value = float(loss_sim(a, b))
        assert -1.0 <= value <= 1.0
    reset_zero_norm_warnings()
    zero = torch.zeros(1, 4, dtype=torch.float64)
    ok = torch.ones(1, 4, dtype=torch.float64)
    value = float(loss_sim(zero, ok))
    assert math.isfinite(value)
    assert zero_norm_warnings() == 1
    reset_zero_norm_warnings()


def test_byol_mse_identity():
    gen = torch.Generator().manual_seed(3)
    a = torch.randn(6, 16, generator=gen, dtype=torch.float64)
    b = torch.randn(6, 16, generator=gen, dtype=torch.float64)
    mse = float(loss_id_variant("byol_mse", a, b))
    ncs = float(loss_sim(a, b))
    assert mse == pytest.approx(2 + 2 * ncs, abs=1e-6)


def test_infonce_sanity():
    gen = torch.Generator().manual_seed(4)
    v = torch.randn(8, 16, generator=gen, dtype=torch.float64)
    aligned = float(loss_id_variant("infonce", v, v, temperature=0.1))
    crossed = float(loss_id_variant("infonce", v, v.flip(0), temperature=0.1))
    assert aligned < crossed
    with pytest.raises(ConfigError):
        loss_id_variant("infonce", v, v, temperature=0.0)
    with pytest.raises(ConfigError):
        loss_id_variant("bogus", v, v)


def test_forward_target_is_gradient_free():
    online = make_online()
    target = build_target(online)
    v_t = forward_target(rand_images(), target)
    assert v_t.shape == (2, 16)
    assert not v_t.requires_grad


def test_online_path_shapes_and_grads():
    online = make_online()
    images = rand_images()
    mask = torch.zeros(2, 64, dtype=torch.long)
    mask[:, :48] = 1
    tokens = online.encoder.embed_visible(images, mask)
    z_v, _ = online.encoder.encode(tokens)
    mask_token = torch.zeros(64, dtype=torch.float64)
    z_f = assemble_full(z_v, mask, mask_token, online.encoder.pos_embed)
    v_o = forward_online_rep(z_f, online)
    assert v_o.shape == (2, 16)
    assert v_o.requires_grad


def test_target_view_variants():
    online = make_online()
    target = build_target(online)
    torch.manual_seed(9)
    regressor = MaskedRepRegressor(MICRO).double()
    images = rand_images()
    mask = torch.zeros(2, 64, dtype=torch.long)
    mask[:, :48] = 1
    alt = torch.zeros(2, 64, dtype=torch.long)
    alt[:, 16:] = 1
    tokens = online.encoder.embed_visible(images, mask)
    z_v, _ = online.encoder.encode(tokens)
    z_f = assemble_full(z_v, mask, torch.zeros(64, dtype=torch.float64), online.encoder.pos_embed)

    outputs = {}
    for kind in ("full", "visible_other_mask", "masked_same_mask"):
        v_t = forward_target_variant(kind, target, images, mask=mask, alt_mask=alt)
        v_o = forward_online_variant(
            kind, online, z_full=z_f, z_visible=z_v, mask=mask,
            regressor=regressor, pos_embed=online.encoder.pos_embed,
        )
        assert v_t.shape == v_o.shape == (2, 16)
        assert not v_t.requires_grad
        outputs[kind] = v_t
    assert not torch.allclose(outputs["full"], outputs["masked_same_mask"])

    with pytest.raises(StateError):
        forward_target_variant("visible_other_mask", target, images, mask=mask)
    with pytest.raises(StateError):
        forward_target_variant("masked_same_mask", target, images)
    with pytest.raises(StateError):
        forward_online_variant("masked_same_mask", online, z_full=z_f, mask=mask)
    with pytest.raises(ConfigError):
        forward_target_variant("bogus", target, images)


def test_loss_sim_gradient_check():
    online = make_online(seed=11)
    images = rand_images(batch=2, seed=12)
    mask = torch.zeros(2, 64, dtype=torch.long)
    mask[:, :48] = 1
    target = build_target(online)

    def compute_loss():
        tokens = online.encoder.embed_visible(images, mask)
        z_v, _ = online.encoder.encode(tokens)
        z_f = assemble_full(z_v, mask, torch.zeros(64, dtype=torch.float64),
                            online.encoder.pos_embed)
        v_o = forward_online_rep(z_f, online)
        v_t = forward_target(images, target)
        return loss_sim(v_o, v_t)

    loss = compute_loss()
    params = {
        "proj": online.projector.fc1.weight,
        "pred": online.predictor.fc2.weight,
        "rep": online.rep_decoder.head.weight,
    }
    grads = torch.autograd.grad(loss, list(params.values()))
    h = 1e-5
    rng = np.random.default_rng(1)
    worst = 0.0
    for (name, param), grad in zip(params.items(), grads):
        for _ in range(8):
            i = int(rng.integers(param.shape[0]))
            j = int(rng.integers(param.shape[1]))
            with torch.no_grad():
                original = float(param[i, j])
                param[i, j] = original + h
                up = float(compute_loss())
                param[i, j] = original - h
                down = float(compute_loss())
                param[i, j] = original
            fd = (up - down) / (2 * h)
            analytic = float(grad[i, j])
            worst = max(worst, abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-10))
    assert worst < 1e-4
