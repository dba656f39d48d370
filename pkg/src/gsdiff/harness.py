"""End-to-end pipeline orchestration, metrics, and run manifests."""

import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import ingest, ldm, refiner as refiner_mod, scenegen, vqvae as vqvae_mod
from . import nn as gnn
from .gsrender import render_torch, save_gaussians


@dataclass
class PipelineConfig:
    out_dir: str = "run"
    seed: int = 0
    n_scenes: int = 8
    frames_per_scene: int = 8
    h: int = 64
    w: int = 96
    grid: dict = field(default_factory=lambda: ingest.DESK_GRID.to_json())
    noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    tau: float = 0.05
    k_min: int = 1
    vqvae_steps: int = 200
    ldm_steps: int = 200
    refiner_steps: int = 150
    refiner_forcing_steps: int = 50
    sample_guidance: float = 1.0
    ddim_steps: int = 50
    overlap_augment: bool = False
    vq: dict = field(default_factory=lambda: vqvae_mod.VQConfig().to_json())
    ldm_cfg: dict = field(default_factory=lambda: ldm.LDMConfig().to_json())
    refiner_cfg: dict = field(default_factory=lambda: refiner_mod.RefinerConfig().to_json())

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class MetricsReport:
    psnr: float = 0.0
    ssim: float = 0.0
    occupancy_iou: float = 0.0
    mask_iou: float = 0.0
    stage_losses: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    config_hash: str = ""
    seed: int = 0

    def to_json(self, include_timing=False):
        d = {"psnr": round(self.psnr, 6), "ssim": round(self.ssim, 6),
             "occupancy_iou": round(self.occupancy_iou, 6),
             "mask_iou": round(self.mask_iou, 6),
             "stage_losses": {k: round(v, 6) for k, v in self.stage_losses.items()},
             "config_hash": self.config_hash, "seed": self.seed,
             "schema_version": 1}
        if include_timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d


PSNR_CAP = 99.0


def psnr(pred, gt, mask=None, cap=PSNR_CAP):
    err = (np.asarray(pred, float) - np.asarray(gt, float)) ** 2
    if mask is not None:
        m = np.asarray(mask, bool)
        if not m.any():
            return cap
        err = err[m]
    mse = float(err.mean())
    if mse <= 10 ** (-cap / 10):
        return cap
    return min(cap, -10.0 * np.log10(mse))


def iou(a, b):
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def set_threads():
    n = os.environ.get("GSDIFF_THREADS")
    if n:
        torch.set_num_threads(int(n))


def ingest_scene(frames, spec, tau=0.05, k_min=1):
    """Returns a SceneSample ready for VQ-VAE training."""
    grid, masks, _ = ingest.fuse_frames(frames, spec, tau=tau, k_min=k_min)
    return vqvae_mod.SceneSample(grid, frames, masks)


def shifted_grid_spec(spec, offset):
    """Shift the grid window along the forward axis by `offset` meters."""
    (zl, zh), (xl, xh), (yl, yh) = spec.extents
    return ingest.GridSpec(spec.dims, ((zl, zh), (xl, xh), (yl + offset, yh + offset)))


def build_samples(dataset_dir, spec, tau=0.05, k_min=1, overlap_augment=False):
    """Ingest every scene directory; optionally add half-depth shifted windows."""
    dirs = sorted(d for d in os.listdir(dataset_dir) if d.startswith("scene_"))
    if not dirs:
        raise FileNotFoundError(f"no scene directories under {dataset_dir}")
    samples, scenes = [], []
    specs = [spec]
    if overlap_augment:
        stride = (spec.extents[2][1] - spec.extents[2][0]) / 2.0
        specs.append(shifted_grid_spec(spec, -stride / 2.0))
    for d in dirs:
        scene, frames, _ = scenegen.load_scene_dir(os.path.join(dataset_dir, d))
        for sp in specs:
            samples.append(ingest_scene(frames, sp, tau=tau, k_min=k_min))
            scenes.append(scene)
    return samples, scenes


def evaluate_reconstruction(model, samples, spec, max_views=4):
    """Foreground PSNR/SSIM, occupancy IoU and mask IoU of VQ-VAE reconstructions."""
    psnrs, ssims, oious, mious = [], [], [], []
    for s in samples:
        lat = model.encode_grid(s.grid)
        latq, _, _ = model.quantize_latent(lat)
        dec = model.decode_latent(latq)
        pred_occ = dec.occupancy_logits > 0
        oious.append(iou(pred_occ, s.grid.occupancy))
        g = model.heads_to_gaussians(dec, spec, "teacher", s.grid.occupancy)
        h, w = s.frames[0].image.shape[:2]
        pos = torch.as_tensor(g.positions, dtype=torch.float32)
        col = torch.as_tensor(g.colors, dtype=torch.float32)
        opa = torch.as_tensor(g.opacities, dtype=torch.float32)
        sca = torch.as_tensor(g.scales, dtype=torch.float32)
        rot = torch.as_tensor(g.rotations, dtype=torch.float32)
        for fr, mask in list(zip(s.frames, s.masks))[:max_views]:
            with torch.no_grad():
                img, alpha, _ = render_torch(pos, col, opa, sca, rot, fr.pose, h, w, (0, 0, 0))
            img = img.numpy()
            psnrs.append(psnr(img, fr.image, mask=np.repeat(mask[..., None], 3, -1)))
            ssims.append(gnn.ssim_hwc(img * mask[..., None], fr.image * mask[..., None]))
            mious.append(iou(alpha.numpy() > 0.5, mask))
    return (float(np.mean(psnrs)), float(np.mean(ssims)),
            float(np.mean(oious)), float(np.mean(mious)))


def write_manifest(out_dir, name, config, seed):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.manifest.json"), "w") as f:
        json.dump({"config": config, "seed": seed,
                   "config_hash": gnn.config_hash(config)}, f, indent=1, sort_keys=True)


def run_pipeline(config):
    """gen-data -> ingest -> train-vqvae -> train-ldm3d -> train-refiner ->
    sample -> refine -> eval. Returns a MetricsReport; artifacts land under
    config.out_dir."""
    set_threads()
    t0 = time.time()
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    write_manifest(out, "run", config.to_json(), config.seed)
    spec = ingest.GridSpec.from_json(config.grid)
    stage = "gen-data"
    report = MetricsReport(config_hash=gnn.config_hash(config.to_json()), seed=config.seed)
    try:
        data_dir = os.path.join(out, "data")
        scenegen.generate_dataset(data_dir, config.n_scenes, config.frames_per_scene,
                                  config.h, config.w, config.seed,
                                  noise_sigma=config.noise_sigma,
                                  outlier_rate=config.outlier_rate)

        stage = "ingest"
        samples, scenes = build_samples(data_dir, spec, tau=config.tau, k_min=config.k_min,
                                        overlap_augment=config.overlap_augment)

        stage = "train-vqvae"
        vq_cfg = vqvae_mod.VQConfig.from_json(config.vq)
        vq_cfg.render_hw = (config.h, config.w)
        model, hist = vqvae_mod.train_vqvae(samples, spec, vq_cfg, config.vqvae_steps,
                                            seed=config.seed)
        vqvae_mod.save_vqvae(os.path.join(out, "vqvae.ckpt"), model, step=config.vqvae_steps)
        report.stage_losses["vqvae"] = float(np.mean(hist[-20:]))

        stage = "train-ldm3d"
        latents, conds = [], []
        for s, scene in zip(samples, scenes):
            lat = model.encode_grid(s.grid)
            latq, _, _ = model.quantize_latent(lat)
            latents.append(np.moveaxis(latq.grid, -1, 0))
            sem = scenegen.semantic_volume(scene, spec)
            conds.append(ldm.ConditionBundle(
                layout=ldm.layout_from_semantic(sem.labels),
                text_tokens=ldm.tokenize(scene.text()),
                dataset_id=0))
        ldm_cfg = ldm.LDMConfig.from_json(config.ldm_cfg)
        denoiser, schedule, stats, lhist = ldm.train_ldm(
            np.stack(latents), conds, ldm_cfg,
            tuple(d // 4 for d in spec.dims), config.ldm_steps, seed=config.seed)
        ldm.save_ldm(os.path.join(out, "ldm.ckpt"), denoiser, stats, step=config.ldm_steps)
        report.stage_losses["ldm"] = float(np.mean(lhist[-20:]))

        stage = "train-refiner"
        ref_cfg = refiner_mod.RefinerConfig.from_json(config.refiner_cfg)
        ref_model, ref_schedule, rhist = refiner_mod.train_refiner(
            model, samples, spec, ref_cfg, config.refiner_steps,
            config.refiner_forcing_steps, seed=config.seed)
        refiner_mod.save_refiner(os.path.join(out, "refiner.ckpt"), ref_model)
        report.stage_losses["refiner"] = float(np.mean(rhist[-20:]))

        stage = "sample"
        cond = conds[0]
        gaussians, _ = ldm.sample_scene(cond, config.ddim_steps, config.sample_guidance,
                                        config.seed, denoiser, schedule, model, spec, stats)
        save_gaussians(os.path.join(out, "sampled.ply"), gaussians)

        stage = "refine"
        poses = [fr.pose for fr in samples[0].frames]
        coarse = refiner_mod.render_coarse_frames(gaussians, poses, config.h, config.w)
        if coarse.shape[0] > ref_cfg.clip_len:
            refined = refiner_mod.sample_chained(
                coarse, ref_cfg.clip_len, ref_cfg.overlap, ref_model, ref_schedule,
                ref_cfg.ddim_steps, config.seed, t_eps=ref_cfg.t_eps)
        else:
            gen = torch.Generator().manual_seed(config.seed)
            refined = refiner_mod.sample_clip(
                ref_model, ref_schedule,
                torch.as_tensor(coarse, dtype=torch.float32).permute(0, 3, 1, 2),
                ref_cfg.ddim_steps, gen).permute(0, 2, 3, 1).numpy()
        frame_dir = os.path.join(out, "refined")
        os.makedirs(frame_dir, exist_ok=True)
        for k in range(refined.shape[0]):
            scenegen.save_png(os.path.join(frame_dir, f"{k}.png"), refined[k])

        stage = "eval"
        p, s_, oi, mi = evaluate_reconstruction(model, samples[:4], spec)
        report.psnr, report.ssim, report.occupancy_iou, report.mask_iou = p, s_, oi, mi
    except Exception as e:
        raise RuntimeError(f"pipeline failed at stage '{stage}': {e}") from e

    report.wall_clock_s = time.time() - t0
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report.to_json(), f, indent=1, sort_keys=True)
    with open(os.path.join(out, "timing.json"), "w") as f:
        json.dump({"wall_clock_s": report.wall_clock_s}, f)
    return report
