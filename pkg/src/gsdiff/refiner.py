"""Pixel-space conditional video diffusion refiner.

The denoiser takes, per frame, the noisy target (3ch), the coarse render
condition (3ch) and a conditioning-frame mask channel, with an independent
timestep per frame so diffusion-forcing training and clip-chained inference
share one model.
"""

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nn as gnn
from .diffusion import (NoiseSchedule, forward_diffuse, v_target, z0_from_v,
                        ddim_step, ddim_timesteps)
from .ldm import timestep_embedding
from .gsrender import render_torch

SENTINEL_BG = (1.0, 0.0, 1.0)  # fills coarse-render background, absent from GT


@dataclass
class VideoClip:
    frames: np.ndarray      # K x h x w x 3 in [0,1]
    poses: list
    per_frame_t: np.ndarray = None


@dataclass
class RefinerConfig:
    base_ch: int = 32
    t_dim: int = 128
    T: int = 1000
    ddim_steps: int = 25
    clip_len: int = 5
    overlap: int = 1
    t_eps: int = 0
    lr: float = 2e-4
    depth_condition: bool = False  # condition on rendered depth instead of RGB

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


class FiLMResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, t_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.film = nn.Linear(t_dim, 2 * ch_out)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.conv1(x))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class TemporalAttention(nn.Module):
    """Self-attention across the frame axis at every spatial location."""

    def __init__(self, ch, heads=4):
        super().__init__()
        self.norm = nn.LayerNorm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x, k_frames):
        bk, c, h, w = x.shape
        b = bk // k_frames
        y = x.reshape(b, k_frames, c, h * w).permute(0, 3, 1, 2).reshape(b * h * w, k_frames, c)
        a, _ = self.attn(self.norm(y), self.norm(y), self.norm(y), need_weights=False)
        y = y + a
        return y.reshape(b, h * w, k_frames, c).permute(0, 2, 3, 1).reshape(bk, c, h, w)


class Denoiser2D(nn.Module):
    """Small UNet over frames with temporal attention at the bottleneck."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_ch
        td = cfg.t_dim
        self.t_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(7, c, 3, padding=1)
        self.down1 = FiLMResBlock(c, c, td)
        self.down2 = FiLMResBlock(c, 2 * c, td)
        self.mid1 = FiLMResBlock(2 * c, 3 * c, td)
        self.t_attn = TemporalAttention(3 * c)
        self.mid2 = FiLMResBlock(3 * c, 3 * c, td)
        self.up2 = FiLMResBlock(3 * c + 2 * c, 2 * c, td)
        self.up1 = FiLMResBlock(2 * c + c, c, td)
        self.conv_out = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, noisy, cond, cond_mask, t):
        """noisy/cond: (K,3,h,w); cond_mask (K,); t (K,) per-frame timesteps."""
        k = noisy.shape[0]
        emb = self.t_mlp(timestep_embedding(t, self.cfg.t_dim))
        m = cond_mask.reshape(k, 1, 1, 1).expand(-1, 1, *noisy.shape[2:])
        x = self.conv_in(torch.cat([noisy, cond, m], dim=1))
        h1 = self.down1(x, emb)
        x = F.avg_pool2d(h1, 2)
        h2 = self.down2(x, emb)
        x = F.avg_pool2d(h2, 2)
        x = self.mid1(x, emb)
        x = self.t_attn(x, k)
        x = self.mid2(x, emb)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up2(torch.cat([x, h2], dim=1), emb)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.up1(torch.cat([x, h1], dim=1), emb)
        return self.conv_out(x)


def render_coarse_frames(gaussians, poses, h, w, depth_condition=False):
    """Render the coarse condition clip with the sentinel background."""
    import torch as _t
    pos = _t.as_tensor(gaussians.positions, dtype=_t.float32)
    col = _t.as_tensor(gaussians.colors, dtype=_t.float32)
    opa = _t.as_tensor(gaussians.opacities, dtype=_t.float32)
    sca = _t.as_tensor(gaussians.scales, dtype=_t.float32)
    rot = _t.as_tensor(gaussians.rotations, dtype=_t.float32)
    frames = []
    with _t.no_grad():
        for pose in poses:
            img, alpha, depth = render_torch(pos, col, opa, sca, rot, pose, h, w, SENTINEL_BG)
            if depth_condition:
                d = (depth / 20.0).clamp(0, 1)
                img = _t.stack([d, d, d], dim=-1)
            frames.append(img.numpy())
    return np.stack(frames)


def make_training_pairs(vq_model, samples, spec, rng, n_pairs, max_clip_len=5):
    """Coarse/GT paired clips: coarse from VQ-VAE reconstruction renders."""
    pairs = []
    recon = []
    for s in samples:
        lat = vq_model.encode_grid(s.grid)
        latq, _, _ = vq_model.quantize_latent(lat)
        dec = vq_model.decode_latent(latq)
        g = vq_model.heads_to_gaussians(dec, spec, occupancy_source="predicted")
        if len(g) == 0:
            g = vq_model.heads_to_gaussians(dec, spec, "teacher", s.grid.occupancy)
        recon.append(g)
    h, w = samples[0].frames[0].image.shape[:2]
    for _ in range(n_pairs):
        si = int(rng.integers(len(samples)))
        s = samples[si]
        k = int(rng.integers(1, max_clip_len + 1))
        start = int(rng.integers(0, len(s.frames) - k + 1))
        poses = [s.frames[start + j].pose for j in range(k)]
        coarse = render_coarse_frames(recon[si], poses, h, w)
        gt = np.stack([s.frames[start + j].image for j in range(k)])
        pairs.append((VideoClip(coarse, poses), VideoClip(gt, poses)))
    return pairs


def train_step_2d(pair, model, schedule, opt, forcing, rng, generator):
    """One step of the conditional v-prediction objective on a paired clip."""
    coarse, gt = pair
    k = gt.frames.shape[0]
    z0 = torch.as_tensor(gt.frames, dtype=torch.float32).permute(0, 3, 1, 2)
    cond = torch.as_tensor(coarse.frames, dtype=torch.float32).permute(0, 3, 1, 2)
    mask = torch.zeros(k)
    if forcing:
        t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=k))
        # half the time, simulate inference: a clean conditioning prefix at t=0
        if k > 1 and rng.random() < 0.5:
            w = int(rng.integers(1, k))
            t[:w] = 0
            mask[:w] = 1.0
    else:
        t = torch.full((k,), int(rng.integers(1, schedule.T + 1)))
    eps = torch.randn(z0.shape, generator=generator, dtype=torch.float32)
    z_t = forward_diffuse(z0, t, eps, schedule)
    v_hat = model(z_t, cond, mask, t)
    z0_hat = z0_from_v(z_t, v_hat, t, schedule)
    loss = F.mse_loss(z0, z0_hat)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def sample_clip(model, schedule, cond, steps, generator, prefix=None, t_eps=0):
    """Denoise one clip; `prefix` frames are conditioning and pass through.

    cond: (K,3,h,w); prefix: (W,3,h,w) clean frames or None.
    Returns (K,3,h,w); the first W frames equal prefix exactly.
    """
    k = cond.shape[0]
    w = 0 if prefix is None else prefix.shape[0]
    z = torch.randn(cond.shape, generator=generator, dtype=torch.float32)
    mask = torch.zeros(k)
    if w:
        mask[:w] = 1.0
    ts = ddim_timesteps(schedule.T, steps)
    with torch.no_grad():
        for t, t_prev in zip(ts[:-1], ts[1:]):
            if w:
                z = torch.cat([prefix, z[w:]], dim=0)
            t_vec = torch.full((k,), int(t), dtype=torch.long)
            if w:
                t_vec[:w] = t_eps
            v = model(z, cond, mask, t_vec)
            z_new = ddim_step(z[w:], v[w:], t, t_prev, schedule)
            z = torch.cat([z[:w], z_new], dim=0) if w else z_new
    if w:
        z = torch.cat([prefix, z[w:]], dim=0)
    return z


def sample_chained(coarse_video, clip_len, overlap, model, schedule, steps, seed,
                   t_eps=0, forcing=True):
    """Refine N frames clip by clip, conditioning each clip on the previous
    `overlap` generated frames (copied through unchanged).

    coarse_video: (N,h,w,3). When forcing=False the overlap frames are still
    provided as conditioning input but at the shared noisy timestep, mimicking
    chaining with a model never trained on mixed noise levels.
    """
    f, w = int(clip_len), int(overlap)
    if not (w >= 1 and f > w):
        raise ValueError("need clip_len > overlap >= 1")
    n = coarse_video.shape[0]
    if n < f:
        raise ValueError("video shorter than one clip")
    cond_all = torch.as_tensor(coarse_video, dtype=torch.float32).permute(0, 3, 1, 2)
    generator = torch.Generator().manual_seed(seed)
    out = torch.zeros_like(cond_all)
    first = sample_clip(model, schedule, cond_all[:f], steps, generator, t_eps=t_eps)
    out[:f] = first
    pos = f
    while pos < n:
        start = pos - w
        end = min(start + f, n)
        cond = cond_all[start:end]
        prefix = out[start:start + w].clone()
        if forcing:
            clip = sample_clip(model, schedule, cond, steps, generator,
                               prefix=prefix, t_eps=t_eps)
        else:
            clip = sample_clip(model, schedule, cond, steps, generator)
            clip = torch.cat([prefix, clip[w:]], dim=0)
        out[start:end] = clip
        pos = end
    return out.permute(0, 2, 3, 1).numpy()


def train_refiner(vq_model, samples, spec, cfg, steps, forcing_steps, seed=0,
                  n_pairs=64, callback=None, log_every=100):
    """Joint training then diffusion-forcing fine-tuning."""
    gnn.seed_all(seed)
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    pairs = make_training_pairs(vq_model, samples, spec, rng, n_pairs, cfg.clip_len)
    model = Denoiser2D(cfg)
    schedule = NoiseSchedule.cosine(cfg.T)
    opt = gnn.make_adamw(model.parameters(), cfg.lr)
    model.train()
    history = []
    for step in range(steps + forcing_steps):
        pair = pairs[int(rng.integers(len(pairs)))]
        loss = train_step_2d(pair, model, schedule, opt, forcing=step >= steps,
                             rng=rng, generator=generator)
        history.append(loss)
        if callback and (step % log_every == 0 or step == steps + forcing_steps - 1):
            callback(step, loss)
    model.eval()
    return model, schedule, history


def save_refiner(path, model, step=0):
    gnn.save_checkpoint(path, gnn.state_dict_to_numpy(model), step=step,
                        config=model.cfg.to_json())


def load_refiner(path):
    tensors, manifest = gnn.load_checkpoint(path)
    model = Denoiser2D(RefinerConfig.from_json(manifest["config"]))
    gnn.load_state_dict_numpy(model, tensors)
    model.eval()
    return model, NoiseSchedule.cosine(model.cfg.T)
