import numpy as np
import pytest
import torch

from gsdiff.diffusion import (NoiseSchedule, ddim_sample, ddim_step,
                              ddim_timesteps, eps_from_z0, forward_diffuse,
                              repaint_sample, v_target, z0_from_v)


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.cosine(1000)


# ---------------- schedule ----------------

def test_cosine_schedule_properties(sched):
    ab = sched.alpha_bar
    assert sched.T == 1000 and len(ab) == 1001
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] > 0
    assert ab[500] == pytest.approx(np.cos((0.5 + 0.008) / 1.008 * np.pi / 2) ** 2
                                    / np.cos(0.008 / 1.008 * np.pi / 2) ** 2, rel=1e-10)


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule([0.9, 0.5])          # must start at 1
    with pytest.raises(ValueError):
        NoiseSchedule([1.0, 0.5, 0.5])     # must strictly decrease
    with pytest.raises(ValueError):
        NoiseSchedule([1.0, 0.5, 0.0])     # endpoint must stay positive


def test_coeffs_shapes_and_torch(sched):
    sa, sb = sched.coeffs(100)
    assert sa ** 2 + sb ** 2 == pytest.approx(1.0, abs=1e-12)
    like = torch.zeros(3, dtype=torch.float64)
    sa_t, sb_t = sched.coeffs(np.array([1, 500, 1000]), like=like)
    assert sa_t.shape == (3,) and sa_t.dtype == torch.float64


# ---------------- algebra ----------------

def test_v_prediction_round_trips_numpy(sched):
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal(256)
    eps = rng.standard_normal(256)
    for t in (1, 37, 500, 999, 1000):
        z_t = forward_diffuse(z0, t, eps, sched)
        v = v_target(z0, eps, t, sched)
        np.testing.assert_allclose(z0_from_v(z_t, v, t, sched), z0, atol=1e-12)
        np.testing.assert_allclose(eps_from_z0(z_t, z0, t, sched), eps, atol=1e-12)


def test_algebra_per_sample_t_broadcast(sched):
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(4, 2, 3, 3, generator=gen, dtype=torch.float64)
    eps = torch.randn(4, 2, 3, 3, generator=gen, dtype=torch.float64)
    t = torch.as_tensor([1, 100, 500, 1000])
    z_t = forward_diffuse(z0, t, eps, sched)
    v = v_target(z0, eps, t, sched)
    assert torch.allclose(z0_from_v(z_t, v, t, sched), z0, atol=1e-12)
    # each sample matches its scalar-t counterpart
    for i, ti in enumerate(t.tolist()):
        single = forward_diffuse(z0[i:i + 1], ti, eps[i:i + 1], sched)
        assert torch.allclose(z_t[i:i + 1], single, atol=1e-14)


def test_forward_diffuse_shape_mismatch(sched):
    with pytest.raises(ValueError):
        forward_diffuse(np.zeros(3), 10, np.zeros(4), sched)


# ---------------- DDIM ----------------

def test_ddim_timesteps_properties():
    ts = ddim_timesteps(1000, 50)
    assert ts[0] == 1000 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert len(ts) == 51
    assert ddim_timesteps(10, 50) == list(range(10, -1, -1))


def test_ddim_step_validation(sched):
    with pytest.raises(ValueError):
        ddim_step(np.zeros(2), np.zeros(2), 10, 10, sched)


def test_ddim_step_with_true_v_is_exact(sched):
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal(64)
    eps = rng.standard_normal(64)
    t, t_prev = 800, 500
    z_t = forward_diffuse(z0, t, eps, sched)
    v = v_target(z0, eps, t, sched)
    out = ddim_step(z_t, v, t, t_prev, sched)
    np.testing.assert_allclose(out, forward_diffuse(z0, t_prev, eps, sched), atol=1e-12)


def test_ddim_eta_noise_term(sched):
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal(16)
    eps = rng.standard_normal(16)
    z_t = forward_diffuse(z0, 800, eps, sched)
    v = v_target(z0, eps, 800, sched)
    noise = rng.standard_normal(16)
    a = ddim_step(z_t, v, 800, 500, sched, eta=1.0, noise=noise)
    b = ddim_step(z_t, v, 800, 500, sched, eta=0.0)
    assert np.abs(a - b).max() > 1e-3
    # eta=1 with zero noise keeps the posterior mean direction finite
    c = ddim_step(z_t, v, 800, 500, sched, eta=1.0, noise=np.zeros(16))
    assert np.all(np.isfinite(c))


def _oracle_model(z0_true, sched):
    def model_v(z, t):
        eps_hat = eps_from_z0(z, z0_true, t, sched)
        return v_target(z0_true, eps_hat, t, sched)
    return model_v


def test_ddim_sample_recovers_oracle_target(sched):
    torch.manual_seed(0)
    z0 = torch.randn(2, 4, 4, dtype=torch.float32)
    gen = torch.Generator().manual_seed(3)
    out = ddim_sample(_oracle_model(z0, sched), z0.shape, sched, 50, gen)
    assert torch.allclose(out, z0, atol=1e-5)


def test_ddim_sample_deterministic(sched):
    z0 = torch.zeros(8)
    a = ddim_sample(_oracle_model(z0, sched), (8,), sched, 20,
                    torch.Generator().manual_seed(7))
    b = ddim_sample(_oracle_model(z0, sched), (8,), sched, 20,
                    torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


# ---------------- repaint ----------------

def test_repaint_keeps_known_region_bit_exact(sched):
    torch.manual_seed(0)
    z0 = torch.randn(4, 6, dtype=torch.float32)
    target = torch.randn(4, 6, dtype=torch.float32)
    mask = torch.zeros(4, 6)
    mask[:, :3] = 1.0
    gen = torch.Generator().manual_seed(5)
    out = repaint_sample(_oracle_model(target, sched), z0, mask, sched, 25, gen)
    assert torch.equal(out[:, :3], z0[:, :3])  # bit-identical kept region
    # the complement is driven to the oracle's target, not the source
    assert torch.allclose(out[:, 3:], target[:, 3:], atol=1e-4)


def test_repaint_mask_shape_mismatch(sched):
    with pytest.raises(ValueError):
        repaint_sample(lambda z, t: z, torch.zeros(4, 4), torch.zeros(2, 2),
                       sched, 10, torch.Generator())
