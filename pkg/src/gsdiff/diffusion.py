"""Noise schedule and diffusion algebra shared by the 3D latent model and the
2D refiner: forward noising, v-prediction conversions, deterministic DDIM
stepping, and repaint-style mask blending.
"""

import numpy as np
import torch


class NoiseSchedule:
    """Table of alpha_bar values; alpha_bar[0] = 1, strictly decreasing."""

    def __init__(self, alpha_bar):
        ab = np.asarray(alpha_bar, np.float64)
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if ab[-1] <= 0:
            raise ValueError("alpha_bar endpoint must stay positive")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        self.alpha_bar = ab
        self.T = len(ab) - 1

    @classmethod
    def cosine(cls, T=1000, s=0.008, floor=1e-5):
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + s) / (1 + s) * np.pi / 2.0) ** 2
        ab = np.clip(f / f[0], floor, 1.0)
        ab[0] = 1.0
        # enforce strict decrease where the floor would flatten the tail
        for i in range(1, T + 1):
            if ab[i] >= ab[i - 1]:
                ab[i] = ab[i - 1] * (1 - 1e-7)
        return cls(ab)

    def coeffs(self, t, like=None):
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) as scalars or tensors."""
        ab = self.alpha_bar[np.asarray(t)]
        sa, sb = np.sqrt(ab), np.sqrt(1.0 - ab)
        if like is not None:
            sa = torch.as_tensor(sa, dtype=like.dtype, device=like.device)
            sb = torch.as_tensor(sb, dtype=like.dtype, device=like.device)
        return sa, sb


def _bcast(c, x):
    if torch.is_tensor(c) and c.dim() > 0:
        return c.reshape((-1,) + (1,) * (x.dim() - 1))
    return c


def forward_diffuse(z0, t, eps, schedule):
    """z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError("noise shape mismatch")
    sa, sb = schedule.coeffs(t, like=z0 if torch.is_tensor(z0) else None)
    return _bcast(sa, z0) * z0 + _bcast(sb, z0) * eps


def v_target(z0, eps, t, schedule):
    """v = sqrt(ab_t) eps - sqrt(1-ab_t) z0."""
    sa, sb = schedule.coeffs(t, like=z0 if torch.is_tensor(z0) else None)
    return _bcast(sa, z0) * eps - _bcast(sb, z0) * z0


def z0_from_v(z_t, v, t, schedule):
    """z0_hat = sqrt(ab_t) z_t - sqrt(1-ab_t) v."""
    sa, sb = schedule.coeffs(t, like=z_t if torch.is_tensor(z_t) else None)
    return _bcast(sa, z_t) * z_t - _bcast(sb, z_t) * v


def eps_from_z0(z_t, z0_hat, t, schedule):
    """Implied noise (z_t - sqrt(ab_t) z0_hat) / sqrt(1-ab_t)."""
    sa, sb = schedule.coeffs(t, like=z_t if torch.is_tensor(z_t) else None)
    return (z_t - _bcast(sa, z_t) * z0_hat) / _bcast(sb, z_t)


def ddim_step(z_t, v_pred, t, t_prev, schedule, eta=0.0, noise=None):
    """One DDIM update from t to t_prev given the model's v output at t."""
    if t <= t_prev:
        raise ValueError("t must exceed t_prev")
    z0_hat = z0_from_v(z_t, v_pred, t, schedule)
    eps_hat = eps_from_z0(z_t, z0_hat, t, schedule)
    sa_p, sb_p = schedule.coeffs(t_prev, like=z_t if torch.is_tensor(z_t) else None)
    if eta == 0.0:
        return sa_p * z0_hat + sb_p * eps_hat
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    sigma = eta * np.sqrt((1 - ab_p) / (1 - ab_t) * (1 - ab_t / ab_p))
    dir_coef = np.sqrt(max(1 - ab_p - sigma ** 2, 0.0))
    if noise is None:
        noise = torch.randn_like(z_t) if torch.is_tensor(z_t) else np.random.standard_normal(z_t.shape)
    return sa_p * z0_hat + dir_coef * eps_hat + sigma * noise


def ddim_timesteps(T, steps):
    """Descending list of timesteps ending at 0, e.g. T=1000, steps=50."""
    ts = np.linspace(0, T, steps + 1).round().astype(int)
    ts = np.unique(ts)[::-1]
    return ts.tolist()


def ddim_sample(model_v, shape, schedule, steps, generator, eta=0.0, callback=None):
    """Sample by iterating ddim_step from pure noise; model_v(z_t, t) -> v."""
    z = torch.randn(shape, generator=generator, dtype=torch.float32)
    ts = ddim_timesteps(schedule.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        v = model_v(z, t)
        z = ddim_step(z, v, t, t_prev, schedule, eta=eta)
        if callback:
            callback(t_prev, z)
    return z


def repaint_sample(model_v, z0_known, keep_mask, schedule, steps, generator, eta=0.0):
    """Inpaint: blend the known region (re-noised to t) into each DDIM step.

    Output equals z0_known exactly on the kept region.
    """
    mask = torch.as_tensor(keep_mask, dtype=z0_known.dtype)
    if mask.shape != z0_known.shape:
        raise ValueError("mask shape mismatch")
    z = torch.randn(z0_known.shape, generator=generator, dtype=z0_known.dtype)
    ts = ddim_timesteps(schedule.T, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps_k = torch.randn(z0_known.shape, generator=generator, dtype=z0_known.dtype)
        z = mask * forward_diffuse(z0_known, t, eps_k, schedule) + (1 - mask) * z
        v = model_v(z, t)
        z = ddim_step(z, v, t, t_prev, schedule, eta=eta)
    return mask * z0_known + (1 - mask) * z
