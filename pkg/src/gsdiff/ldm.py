"""Latent 3D diffusion over VQ-VAE codes.

A patchified transformer denoiser with adaLN-Zero timestep conditioning
predicts v; layout conditioning is channel-concatenated at every step, text
enters through cross-attention over a closed vocabulary, and a dataset-ID
embedding is added to the timestep embedding.
"""

import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nn as gnn
from .diffusion import (NoiseSchedule, forward_diffuse, v_target, z0_from_v,
                        ddim_step, ddim_timesteps, repaint_sample)
from .vqvae import Latent3D
from .scenegen import BUILDING, ROAD, EMPTY, N_CLASSES

VOCAB = ["<null>", "a", "scene", "with", "buildings", "along", "road",
         "sunny", "overcast", "straight", "curved",
         "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}


def tokenize(text):
    ids = []
    for word in text.split():
        if word not in TOKEN_IDS:
            raise ValueError(f"word outside the closed vocabulary: {word!r}")
        ids.append(TOKEN_IDS[word])
    return ids


@dataclass
class ConditionBundle:
    layout: np.ndarray = None    # (3, H', W', D') one-hot channels at latent res
    text_tokens: list = None
    dataset_id: int = 0
    cfg_drop: bool = False


def layout_from_semantic(labels, factor=4):
    """Downsample semantic labels to latent resolution as one-hot channels.

    Any building voxel in a block wins, then road, else empty.
    """
    labels = np.asarray(labels)
    h, w, d = labels.shape
    blocks = labels.reshape(h // factor, factor, w // factor, factor, d // factor, factor)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(h // factor, w // factor, d // factor, -1)
    out = np.full(blocks.shape[:3], EMPTY, np.int64)
    out[np.any(blocks == ROAD, axis=-1)] = ROAD
    out[np.any(blocks == BUILDING, axis=-1)] = BUILDING
    onehot = np.zeros((N_CLASSES,) + out.shape, np.float32)
    for c in range(N_CLASSES):
        onehot[c] = out == c
    return onehot


@dataclass
class LDMConfig:
    latent_ch: int = 8
    layout_ch: int = 3
    dim: int = 192
    depth: int = 6
    heads: int = 6
    patch: int = 2
    use_text: bool = False
    n_datasets: int = 2
    vocab_size: int = len(VOCAB)
    T: int = 1000
    ddim_steps: int = 50
    cfg_drop_prob: float = 0.1
    lr: float = 1e-4

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def timestep_embedding(t, dim, max_period=10000):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class DiTBlock(nn.Module):
    def __init__(self, dim, heads, use_text):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)
        self.use_text = use_text
        if use_text:
            self.norm_x = nn.LayerNorm(dim)
            self.cross = nn.MultiheadAttention(dim, heads, batch_first=True)
            nn.init.zeros_(self.cross.out_proj.weight)
            nn.init.zeros_(self.cross.out_proj.bias)

    def forward(self, x, cemb, text=None):
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(F.silu(cemb))[:, None].chunk(6, dim=-1)
        h = self.norm1(x) * (1 + sc1) + sh1
        h, _ = self.attn(h, h, h, need_weights=False)
        x = x + g1 * h
        if self.use_text and text is not None:
            h, _ = self.cross(self.norm_x(x), text, text, need_weights=False)
            x = x + h
        h = self.norm2(x) * (1 + sc2) + sh2
        x = x + g2 * self.mlp(h)
        return x


class Denoiser3D(nn.Module):
    """Patchified transformer operating on (B, C+layout, H', W', D') volumes."""

    def __init__(self, cfg, latent_dims):
        super().__init__()
        self.cfg = cfg
        self.latent_dims = tuple(latent_dims)
        p = cfg.patch
        if any(d % p for d in latent_dims):
            raise ValueError("latent dims must be divisible by the patch size")
        self.tokens = (latent_dims[0] // p) * (latent_dims[1] // p) * (latent_dims[2] // p)
        self.patch_in = nn.Conv3d(cfg.latent_ch + cfg.layout_ch, cfg.dim, p, stride=p)
        self.pos = nn.Parameter(torch.zeros(1, self.tokens, cfg.dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.t_mlp = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.SiLU(), nn.Linear(cfg.dim, cfg.dim))
        self.dataset_emb = nn.Embedding(cfg.n_datasets, cfg.dim)
        self.null_layout = nn.Parameter(torch.zeros(cfg.layout_ch))
        self.blocks = nn.ModuleList([DiTBlock(cfg.dim, cfg.heads, cfg.use_text)
                                     for _ in range(cfg.depth)])
        self.final_norm = nn.LayerNorm(cfg.dim, elementwise_affine=False)
        self.final_mod = nn.Linear(cfg.dim, 2 * cfg.dim)
        self.patch_out = nn.Linear(cfg.dim, p ** 3 * cfg.latent_ch)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        nn.init.zeros_(self.patch_out.weight)
        nn.init.zeros_(self.patch_out.bias)
        if cfg.use_text:
            self.text_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
            self.text_pos = nn.Parameter(torch.zeros(1, 16, cfg.dim))
            nn.init.trunc_normal_(self.text_pos, std=0.02)

    def _layout_channels(self, conds, shape, dtype):
        b = len(conds)
        out = torch.zeros(b, self.cfg.layout_ch, *shape, dtype=dtype)
        for i, c in enumerate(conds):
            if c is None or c.layout is None or c.cfg_drop:
                out[i] = self.null_layout[:, None, None, None]
            else:
                out[i] = torch.as_tensor(c.layout, dtype=dtype)
        return out

    def _text_tokens(self, conds):
        if not self.cfg.use_text:
            return None
        seqs = []
        for c in conds:
            if c is None or c.text_tokens is None or c.cfg_drop:
                ids = [TOKEN_IDS["<null>"]]
            else:
                ids = list(c.text_tokens)[:16]
            seqs.append(ids)
        ml = max(len(s) for s in seqs)
        ids = torch.zeros(len(seqs), ml, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = torch.as_tensor(s)
        emb = self.text_emb(ids) + self.text_pos[:, :ml]
        return emb

    def forward(self, z_t, t, conds):
        """z_t (B,C,H',W',D'), t (B,) long, conds list of ConditionBundle."""
        b = z_t.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        lay = self._layout_channels(conds, z_t.shape[2:], z_t.dtype)
        x = torch.cat([z_t, lay], dim=1)
        x = self.patch_in(x).flatten(2).transpose(1, 2) + self.pos
        cemb = self.t_mlp(timestep_embedding(t, self.cfg.dim))
        ds = torch.as_tensor([0 if c is None else c.dataset_id for c in conds], dtype=torch.long)
        cemb = cemb + self.dataset_emb(ds)
        text = self._text_tokens(conds)
        for blk in self.blocks:
            x = blk(x, cemb, text)
        sh, sc = self.final_mod(F.silu(cemb))[:, None].chunk(2, dim=-1)
        x = self.patch_out(self.final_norm(x) * (1 + sc) + sh)
        p = self.cfg.patch
        hh, ww, dd = (d // p for d in self.latent_dims)
        x = x.reshape(b, hh, ww, dd, self.cfg.latent_ch, p, p, p)
        x = x.permute(0, 4, 1, 5, 2, 6, 3, 7).reshape(b, self.cfg.latent_ch, *self.latent_dims)
        return x


@dataclass
class LatentStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)

    @classmethod
    def from_latents(cls, latents):
        """latents: array (N, C, H', W', D')."""
        a = np.asarray(latents)
        mean = a.mean(axis=(0, 2, 3, 4))
        std = a.std(axis=(0, 2, 3, 4))
        return cls(mean, np.maximum(std, 1e-6))

    def normalize(self, z):
        m = torch.as_tensor(self.mean, dtype=z.dtype).reshape(1, -1, 1, 1, 1)
        s = torch.as_tensor(self.std, dtype=z.dtype).reshape(1, -1, 1, 1, 1)
        return (z - m) / s

    def denormalize(self, z):
        m = torch.as_tensor(self.mean, dtype=z.dtype).reshape(1, -1, 1, 1, 1)
        s = torch.as_tensor(self.std, dtype=z.dtype).reshape(1, -1, 1, 1, 1)
        return z * s + m


def train_step_3d(model, opt, schedule, z0, conds, rng, generator):
    """One optimization step of the clean-latent MSE objective.

    z0: (B, C, H', W', D') standardized latents. Conditions are dropped with
    probability 0.1 per sample for classifier-free guidance.
    """
    b = z0.shape[0]
    t = torch.as_tensor(rng.integers(1, schedule.T + 1, size=b))
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_diffuse(z0, t, eps, schedule)
    use = [ConditionBundle(c.layout, c.text_tokens, c.dataset_id,
                           cfg_drop=bool(rng.random() < model.cfg.cfg_drop_prob))
           if c is not None else None for c in conds]
    v_hat = model(z_t, t, use)
    z0_hat = z0_from_v(z_t, v_hat, t, schedule)
    loss = F.mse_loss(z0, z0_hat)
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def guided_v(model, z, t, cond, guidance_scale):
    """Classifier-free guidance; scale 1 is exactly the conditional branch."""
    v_c = model(z[None], t, [cond])[0]
    if guidance_scale == 1.0:
        return v_c
    null = ConditionBundle(dataset_id=cond.dataset_id if cond else 0, cfg_drop=True)
    v_u = model(z[None], t, [null])[0]
    return v_u + guidance_scale * (v_c - v_u)


def sample_latent(model, schedule, cond, steps, guidance_scale, generator, shape):
    z = torch.randn(shape, generator=generator, dtype=torch.float32)
    ts = ddim_timesteps(schedule.T, steps)
    with torch.no_grad():
        for t, t_prev in zip(ts[:-1], ts[1:]):
            v = guided_v(model, z, t, cond, guidance_scale)
            z = ddim_step(z, v, t, t_prev, schedule)
    return z


def snap_to_codebook(z, quantizer):
    """Assign each latent cell its nearest codebook vector. z: (C,H,W,D)."""
    c = z.shape[0]
    flat = z.permute(1, 2, 3, 0).reshape(-1, c)
    idx = quantizer.nearest(flat)
    quant = quantizer.codebook[idx].reshape(*z.shape[1:], c)
    return quant.permute(3, 0, 1, 2), idx.reshape(z.shape[1:])


def sample_scene(cond, steps, guidance_scale, seed, model, schedule, vqvae, spec, stats):
    """Draw a latent, snap to codes, decode, and apply the attribute heads."""
    generator = torch.Generator().manual_seed(seed)
    hh, ww, dd = (d // 4 for d in spec.dims)
    shape = (model.cfg.latent_ch, hh, ww, dd)
    with torch.no_grad():
        z = sample_latent(model, schedule, cond, steps, guidance_scale, generator, shape)
        z = stats.denormalize(z[None])[0]
        zq, idx = snap_to_codebook(z, vqvae.quantizer)
    latent = Latent3D(zq.permute(1, 2, 3, 0).numpy(), True, idx.numpy())
    scene = vqvae.decode_latent(latent)
    return vqvae.heads_to_gaussians(scene, spec, occupancy_source="predicted"), latent


def repaint_inpaint(z0_known, keep_mask, cond, model, schedule, stats, steps, seed,
                    guidance_scale=1.0):
    """Regenerate the complement of keep_mask; kept cells pass through unchanged.

    z0_known: Latent3D; keep_mask: (H',W',D') bool.
    """
    src = np.asarray(z0_known.grid)  # H' x W' x D' x C
    mask = np.asarray(keep_mask, bool)
    if mask.shape != src.shape[:3]:
        raise ValueError("mask dims must match the latent dims")
    z = torch.as_tensor(np.moveaxis(src, -1, 0), dtype=torch.float32)
    z_std = stats.normalize(z[None])[0]
    mask_c = torch.as_tensor(np.broadcast_to(mask, z.shape).copy(), dtype=torch.float32)
    generator = torch.Generator().manual_seed(seed)

    def model_v(z_t, t):
        with torch.no_grad():
            return guided_v(model, z_t, t, cond, guidance_scale)

    out = repaint_sample(model_v, z_std, mask_c, schedule, steps, generator)
    out = stats.denormalize(out[None])[0].numpy()
    result = np.moveaxis(out, 0, -1)
    result[mask] = src[mask]  # bit-exact passthrough of the kept region
    return Latent3D(result, quantized=False)


def train_ldm(latents, conds, cfg, latent_dims, steps, seed=0, batch_size=8,
              callback=None, log_every=200):
    """latents: (N, C, H', W', D') raw (unstandardized) array."""
    gnn.seed_all(seed)
    stats = LatentStats.from_latents(latents)
    z_all = stats.normalize(torch.as_tensor(np.asarray(latents), dtype=torch.float32))
    model = Denoiser3D(cfg, latent_dims)
    schedule = NoiseSchedule.cosine(cfg.T)
    opt = gnn.make_adamw(model.parameters(), cfg.lr)
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    history = []
    for step in range(steps):
        idx = rng.choice(len(latents), size=min(batch_size, len(latents)), replace=False)
        loss = train_step_3d(model, opt, schedule, z_all[idx],
                             [conds[i] for i in idx], rng, generator)
        history.append(loss)
        if callback and (step % log_every == 0 or step == steps - 1):
            callback(step, loss)
    model.eval()
    return model, schedule, stats, history


def save_ldm(path, model, stats, step=0):
    tensors = gnn.state_dict_to_numpy(model)
    tensors["__stats_mean"] = stats.mean
    tensors["__stats_std"] = stats.std
    gnn.save_checkpoint(path, tensors, step=step,
                        config={"ldm": model.cfg.to_json(),
                                "latent_dims": list(model.latent_dims)})


def load_ldm(path):
    tensors, manifest = gnn.load_checkpoint(path)
    stats = LatentStats(tensors.pop("__stats_mean"), tensors.pop("__stats_std"))
    cfg = LDMConfig.from_json(manifest["config"]["ldm"])
    model = Denoiser3D(cfg, manifest["config"]["latent_dims"])
    gnn.load_state_dict_numpy(model, tensors)
    model.eval()
    return model, NoiseSchedule.cosine(cfg.T), stats
