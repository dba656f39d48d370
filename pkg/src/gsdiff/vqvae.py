"""Voxel-to-Gaussians VQ-VAE.

Encoder compresses a colored occupancy grid by 4x per axis into a quantized
latent; the decoder emits an occupancy branch plus a feature volume from which
per-voxel MLP heads predict Gaussian attributes. Supervision is BCE on
occupancy plus masked L1/SSIM/foreground losses on rendered views.
"""

import os
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nn as gnn
from .gsrender import GaussianSet, render_torch


@dataclass
class VQConfig:
    f_latent: int = 8
    codebook_size: int = 256
    f_feat: int = 32
    base_ch: int = 12
    beta: float = 0.25            # commitment weight
    ema_decay: float = 0.99
    reseed_interval: int = 1000
    gaussians_per_voxel: int = 1
    use_bce: bool = True
    w_bce: float = 1.0
    w_vq: float = 0.25
    w_rgb: float = 0.8
    w_ssim: float = 0.2
    w_fg: float = 0.5
    m_views: int = 4
    render_hw: tuple = (64, 96)
    lr: float = 1e-4

    def to_json(self):
        d = asdict(self)
        d["render_hw"] = list(self.render_hw)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["render_hw"] = tuple(d.get("render_hw", (64, 96)))
        return cls(**d)


@dataclass
class Latent3D:
    grid: np.ndarray            # H' x W' x D' x F'
    quantized: bool = False
    code_indices: np.ndarray = None


@dataclass
class DecodedScene:
    occupancy_logits: np.ndarray  # H x W x D
    features: np.ndarray          # H x W x D x F_feat


class ResBlock3D(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv3d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv3d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = F.silu(self.conv1(F.silu(x)))
        return x + self.conv2(h)


class Encoder3D(nn.Module):
    """rgb+occupancy (4ch) -> F' channels at 1/4 resolution (two stride-2 stages).

    Full-resolution convs stay thin; capacity sits at the downsampled levels
    to keep CPU training steps cheap.
    """

    def __init__(self, cfg):
        super().__init__()
        c = cfg.base_ch
        self.net = nn.Sequential(
            nn.Conv3d(4, c, 3, padding=1),
            nn.Conv3d(c, 2 * c, 4, stride=2, padding=1), ResBlock3D(2 * c),
            nn.Conv3d(2 * c, 4 * c, 4, stride=2, padding=1), ResBlock3D(4 * c),
            nn.SiLU(), nn.Conv3d(4 * c, cfg.f_latent, 1),
        )

    def forward(self, x):
        return self.net(x)


class QuantizerEMA(nn.Module):
    """Nearest-code quantizer with straight-through gradient and EMA updates."""

    def __init__(self, n_codes, dim, beta=0.25, decay=0.99, eps=1e-5):
        super().__init__()
        if n_codes < 2:
            raise ValueError("codebook needs at least 2 codes")
        self.beta, self.decay, self.eps = beta, decay, eps
        self.register_buffer("codebook", torch.randn(n_codes, dim) * 0.5)
        self.register_buffer("ema_count", torch.zeros(n_codes))
        self.register_buffer("ema_sum", self.codebook.clone())

    def nearest(self, flat):
        d = (flat.pow(2).sum(1, keepdim=True)
             - 2 * flat @ self.codebook.t()
             + self.codebook.pow(2).sum(1))
        return d.argmin(1)

    def forward(self, z):
        # z: (B, F', H, W, D)
        b, c = z.shape[:2]
        flat = z.permute(0, 2, 3, 4, 1).reshape(-1, c)
        idx = self.nearest(flat)
        quant = self.codebook[idx].reshape(z.shape[0], *z.shape[2:], c).permute(0, 4, 1, 2, 3)
        commit = self.beta * F.mse_loss(z, quant.detach())
        if self.training:
            with torch.no_grad():
                onehot = F.one_hot(idx, self.codebook.shape[0]).to(z.dtype)
                self.ema_count.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
                self.ema_sum.mul_(self.decay).add_(onehot.t() @ flat, alpha=1 - self.decay)
                n = self.ema_count.sum()
                counts = (self.ema_count + self.eps) / (n + self.codebook.shape[0] * self.eps) * n
                self.codebook.copy_(self.ema_sum / counts[:, None])
        quant = z + (quant - z).detach()  # straight-through
        return quant, commit, idx.reshape(z.shape[0], *z.shape[2:])

    @torch.no_grad()
    def reseed_dead_codes(self, flat_batch, threshold=1e-3, generator=None):
        """Replace unused codes with random samples from the current batch."""
        dead = self.ema_count < threshold
        n_dead = int(dead.sum())
        if n_dead == 0 or flat_batch.shape[0] == 0:
            return 0
        pick = torch.randint(0, flat_batch.shape[0], (n_dead,), generator=generator)
        self.codebook[dead] = flat_batch[pick]
        self.ema_sum[dead] = flat_batch[pick]
        self.ema_count[dead] = 1.0
        return n_dead


class Decoder3D(nn.Module):
    """Quantized latent -> occupancy logits + feature volume at full resolution."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.base_ch
        self.net = nn.Sequential(
            nn.Conv3d(cfg.f_latent, 4 * c, 3, padding=1), ResBlock3D(4 * c),
            nn.ConvTranspose3d(4 * c, 2 * c, 4, stride=2, padding=1), ResBlock3D(2 * c),
            nn.ConvTranspose3d(2 * c, c, 4, stride=2, padding=1),
            nn.SiLU(), nn.Conv3d(c, c, 3, padding=1), nn.SiLU(),
        )
        self.occ_head = nn.Conv3d(c, 1, 1)
        self.feat_head = nn.Conv3d(c, cfg.f_feat, 1)

    def forward(self, zq):
        h = self.net(zq)
        return self.occ_head(h)[:, 0], self.feat_head(h)


class GaussianHeads(nn.Module):
    """Per-voxel MLP heads: color, opacity, scale+rotation, center offset."""

    def __init__(self, cfg):
        super().__init__()
        g = cfg.gaussians_per_voxel
        self.g = g
        hid = 64
        self.trunk = nn.Sequential(nn.Linear(cfg.f_feat, hid), nn.SiLU())
        self.color = nn.Linear(hid, 3 * g)
        self.opa = nn.Linear(hid, 1 * g)
        self.geo = nn.Linear(hid, 7 * g)   # scale(3) + quaternion(4)
        self.offset = nn.Linear(hid, 3 * g)
        with torch.no_grad():
            for lin in (self.color, self.opa, self.geo, self.offset):
                lin.weight.mul_(0.1)
                lin.bias.zero_()
            # start with mid-gray, ~0.8 opacity, scale ~ 0.6 voxel edge
            self.opa.bias.fill_(1.4)
            self.geo.bias.view(self.g, 7)[:, :3] = np.log(0.6)

    def forward(self, feats, centers, voxel_edge):
        """feats (N, F_feat), centers (N, 3) -> per-gaussian attribute tensors."""
        n = feats.shape[0]
        g = self.g
        h = self.trunk(feats)
        color = torch.sigmoid(self.color(h)).reshape(n * g, 3)
        opa = torch.sigmoid(self.opa(h)).reshape(n * g)
        opa = 1e-4 + (1 - 2e-4) * opa
        geo = self.geo(h).reshape(n * g, 7)
        scale = torch.clamp(voxel_edge * torch.exp(geo[:, :3]),
                            0.01 * voxel_edge, 2.0 * voxel_edge)
        base = torch.zeros_like(geo[:, 3:7])
        base[:, 0] = 1.0
        quat = F.normalize(geo[:, 3:7] + base, dim=-1)
        off = torch.tanh(self.offset(h)).reshape(n * g, 3)
        pos = centers.repeat_interleave(g, 0) + (voxel_edge / 2.0) * off
        return pos, color, opa, scale, quat


class VoxelVQVAE(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder3D(cfg)
        self.quantizer = QuantizerEMA(cfg.codebook_size, cfg.f_latent, cfg.beta, cfg.ema_decay)
        self.decoder = Decoder3D(cfg)
        self.heads = GaussianHeads(cfg)

    # ---- spec-level operations ----

    def encode_grid(self, grid):
        """VoxelGrid -> unquantized Latent3D."""
        x = grid_to_input(grid)
        z = self.encoder(x[None])
        return Latent3D(z[0].permute(1, 2, 3, 0).detach().numpy(), quantized=False)

    def quantize_latent(self, latent):
        if latent.quantized:
            raise ValueError("latent already quantized")
        z = torch.as_tensor(latent.grid, dtype=torch.float32).permute(3, 0, 1, 2)[None]
        was = self.training
        self.eval()
        quant, commit, idx = self.quantizer(z)
        self.train(was)
        out = Latent3D(quant[0].permute(1, 2, 3, 0).detach().numpy(), True,
                       idx[0].detach().numpy())
        return out, float(commit), out.code_indices

    def decode_latent(self, latent):
        if not latent.quantized:
            raise ValueError("latent must be quantized")
        zq = torch.as_tensor(latent.grid, dtype=torch.float32).permute(3, 0, 1, 2)[None]
        occ, feat = self.decoder(zq)
        return DecodedScene(occ[0].detach().numpy(), feat[0].permute(1, 2, 3, 0).detach().numpy())

    def heads_to_gaussians(self, scene, spec, occupancy_source="predicted", teacher_occupancy=None):
        """DecodedScene -> GaussianSet, spawning G gaussians per occupied voxel."""
        if occupancy_source == "teacher":
            if teacher_occupancy is None:
                raise ValueError("teacher occupancy required")
            occ = np.asarray(teacher_occupancy, bool)
        else:
            occ = scene.occupancy_logits > 0.0  # sigmoid > 0.5
        feats = torch.as_tensor(scene.features[occ], dtype=torch.float32)
        idx = np.stack(np.nonzero(occ), axis=-1)
        centers = torch.as_tensor(spec.index_to_center(idx), dtype=torch.float32)
        with torch.no_grad():
            pos, col, opa, scale, quat = self.heads(feats, centers, spec.voxel_edge)
        return GaussianSet(pos.numpy(), col.numpy(), opa.numpy(), scale.numpy(), quat.numpy())

    # ---- differentiable training path ----

    def forward_train(self, grid_input, occ_mask, centers, voxel_edge):
        """grid_input (1,4,H,W,D); occ_mask bool (H,W,D) selects voxels to spawn."""
        z = self.encoder(grid_input)
        zq, vq_loss, idx = self.quantizer(z)
        occ_logits, feat = self.decoder(zq)
        fsel = feat[0].permute(1, 2, 3, 0)[torch.as_tensor(occ_mask)]
        gauss = self.heads(fsel, centers, voxel_edge)
        return occ_logits[0], gauss, vq_loss, z, idx


def grid_to_input(grid):
    """VoxelGrid -> (4, H, W, D) float tensor: rgb (zero where empty) + occupancy."""
    occ = grid.occupancy.astype(np.float32)
    rgb = (grid.color * grid.occupancy[..., None]).astype(np.float32)
    x = np.concatenate([np.moveaxis(rgb, -1, 0), occ[None]], axis=0)
    return torch.as_tensor(x)


def reconstruction_loss(occ_logits, renders, gt_frames, masks, gt_occupancy, vq_loss, cfg):
    """Full per-scene loss; `renders` are (image, alpha) torch pairs per view."""
    occ_t = torch.as_tensor(gt_occupancy, dtype=occ_logits.dtype)
    comps = {}
    bce = F.binary_cross_entropy_with_logits(occ_logits, occ_t)
    comps["bce"] = bce
    comps["vq"] = vq_loss
    total = (cfg.w_bce * bce if cfg.use_bce else 0.0) + cfg.w_vq * vq_loss
    l1_sum = ssim_sum = fg_sum = 0.0
    for (img, alpha), frame, mask in zip(renders, gt_frames, masks):
        gt = torch.as_tensor(frame.image, dtype=img.dtype)
        if gt.shape != img.shape:
            raise ValueError("render/GT shape mismatch")
        m = torch.as_tensor(mask, dtype=img.dtype)
        denom = m.sum().clamp(min=1.0)
        l1 = (m[..., None] * (img - gt).abs()).sum() / (3 * denom)
        mi = (img * m[..., None]).permute(2, 0, 1)[None]
        mg = (gt * m[..., None]).permute(2, 0, 1)[None]
        ssim_term = 1.0 - gnn.ssim(mi, mg)
        fg = F.binary_cross_entropy(alpha.clamp(1e-6, 1 - 1e-6), m)
        l1_sum = l1_sum + l1
        ssim_sum = ssim_sum + ssim_term
        fg_sum = fg_sum + fg
    comps["l1"], comps["ssim"], comps["fg"] = l1_sum, ssim_sum, fg_sum
    total = total + cfg.w_rgb * l1_sum + cfg.w_ssim * ssim_sum + cfg.w_fg * fg_sum
    comps["total"] = total
    return total, {k: float(v.detach() if torch.is_tensor(v) else v) for k, v in comps.items()}


@dataclass
class SceneSample:
    grid: object          # VoxelGrid
    frames: list          # PosedFrame at render resolution
    masks: list           # foreground masks matching frames


def train_vqvae(samples, spec, cfg, steps, seed=0, log_every=200, callback=None):
    """Single-writer training loop over ingested scenes; returns the model."""
    gnn.seed_all(seed)
    model = VoxelVQVAE(cfg)
    opt = gnn.make_adamw(model.parameters(), cfg.lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model.train()
    prepped = []
    for s in samples:
        occ = s.grid.occupancy
        idx = np.stack(np.nonzero(occ), axis=-1)
        prepped.append((grid_to_input(s.grid)[None],
                        occ,
                        torch.as_tensor(spec.index_to_center(idx), dtype=torch.float32)))
    h, w = cfg.render_hw
    history = []
    for step in range(steps):
        i = int(rng.integers(len(samples)))
        s = samples[i]
        grid_input, occ, centers = prepped[i]
        occ_logits, gauss, vq_loss, z, _ = model.forward_train(
            grid_input, occ, centers, spec.voxel_edge)
        pos, col, opa, scale, quat = gauss
        views = rng.choice(len(s.frames), size=min(cfg.m_views, len(s.frames)), replace=False)
        renders = []
        for vi in views:
            img, alpha, _ = render_torch(pos, col, opa, scale, quat,
                                         s.frames[vi].pose, h, w, (0.0, 0.0, 0.0))
            renders.append((img, alpha))
        total, comps = reconstruction_loss(
            occ_logits, renders, [s.frames[v] for v in views],
            [s.masks[v] for v in views], occ, vq_loss, cfg)
        opt.zero_grad()
        total.backward()
        opt.step()
        if cfg.reseed_interval and (step + 1) % cfg.reseed_interval == 0:
            flat = z.detach().permute(0, 2, 3, 4, 1).reshape(-1, cfg.f_latent)
            model.quantizer.reseed_dead_codes(flat, generator=gen)
        history.append(comps["total"])
        if callback and (step % log_every == 0 or step == steps - 1):
            callback(step, comps)
    model.eval()
    return model, history


def save_vqvae(path, model, step=0):
    gnn.save_checkpoint(path, gnn.state_dict_to_numpy(model), step=step,
                        config=model.cfg.to_json())


def load_vqvae(path):
    tensors, manifest = gnn.load_checkpoint(path)
    model = VoxelVQVAE(VQConfig.from_json(manifest["config"]))
    gnn.load_state_dict_numpy(model, tensors)
    model.eval()
    return model
