"""Command-line entry points for every pipeline stage."""

import json
import os

import click
import numpy as np
import torch

from . import harness, ingest, ldm, refiner as refiner_mod, scenegen, vqvae as vqvae_mod
from . import nn as gnn
from .gsrender import load_gaussians, save_gaussians, render


@click.group()
def main():
    """Cascaded 3D-to-2D scene generation pipeline."""
    harness.set_threads()


@main.command("gen-data")
@click.option("--n-scenes", default=8, type=int)
@click.option("--frames-per-scene", default=8, type=int)
@click.option("--h", default=64, type=int)
@click.option("--w", default=96, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--noise-sigma", default=0.0, type=float)
@click.option("--outlier-rate", default=0.0, type=float)
@click.option("--out", required=True, type=click.Path())
def gen_data(n_scenes, frames_per_scene, h, w, seed, noise_sigma, outlier_rate, out):
    """Write synthetic scene directories with posed RGB-D frames."""
    paths = scenegen.generate_dataset(out, n_scenes, frames_per_scene, h, w, seed,
                                      noise_sigma=noise_sigma, outlier_rate=outlier_rate)
    harness.write_manifest(out, "gen-data",
                           {"n_scenes": n_scenes, "frames_per_scene": frames_per_scene,
                            "h": h, "w": w, "noise_sigma": noise_sigma,
                            "outlier_rate": outlier_rate}, seed)
    click.echo(f"wrote {len(paths)} scenes to {out}")


def _load_spec(grid):
    return ingest.load_grid_spec(grid) if grid else ingest.DESK_GRID


@main.command("ingest")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--grid", default=None, type=click.Path(exists=True), help="grid spec JSON")
@click.option("--scene", default=0, type=int)
@click.option("--tau", default=0.05, type=float)
@click.option("--kmin", default=1, type=int)
@click.option("--out", required=True, type=click.Path())
def ingest_cmd(dataset, grid, scene, tau, kmin, out):
    """Fuse one scene's frames into a voxel grid file."""
    spec = _load_spec(grid)
    _, frames, _ = scenegen.load_scene_dir(os.path.join(dataset, f"scene_{scene}"))
    vg, masks, merged = ingest.fuse_frames(frames, spec, tau=tau, k_min=kmin)
    ingest.save_voxel_grid(out, vg)
    click.echo(f"occupied voxels: {int(vg.occupancy.sum())}, surviving points: {len(merged)}")


@main.command("train-vqvae")
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--grid", default=None, type=click.Path(exists=True))
@click.option("--steps", default=1000, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", required=True, type=click.Path())
def train_vqvae_cmd(data, config, grid, steps, seed, out):
    """Train the voxel-to-Gaussians VQ-VAE on a scene dataset."""
    spec = _load_spec(grid)
    cfg = vqvae_mod.VQConfig.from_json(json.load(open(config))) if config else vqvae_mod.VQConfig()
    samples, _ = harness.build_samples(data, spec)
    cfg.render_hw = samples[0].frames[0].image.shape[:2]
    model, _ = vqvae_mod.train_vqvae(
        samples, spec, cfg, steps, seed=seed,
        callback=lambda s, c: click.echo(f"step {s}: loss {c['total']:.4f}"))
    vqvae_mod.save_vqvae(out, model, step=steps)
    click.echo(f"saved {out}")


@main.command("encode")
@click.option("--vqvae-ckpt", required=True, type=click.Path(exists=True))
@click.option("--grid-file", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def encode_cmd(vqvae_ckpt, grid_file, out):
    """Encode a voxel grid file into a quantized latent checkpoint."""
    model = vqvae_mod.load_vqvae(vqvae_ckpt)
    vg = ingest.load_voxel_grid(grid_file)
    lat = model.encode_grid(vg)
    latq, _, idx = model.quantize_latent(lat)
    gnn.save_checkpoint(out, {"latent": latq.grid, "indices": idx})
    click.echo(f"latent shape {latq.grid.shape} -> {out}")


@main.command("decode")
@click.option("--vqvae-ckpt", required=True, type=click.Path(exists=True))
@click.option("--latent-file", required=True, type=click.Path(exists=True))
@click.option("--grid", default=None, type=click.Path(exists=True))
@click.option("--emit-gaussians", required=True, type=click.Path())
def decode_cmd(vqvae_ckpt, latent_file, grid, emit_gaussians):
    """Decode a quantized latent into a Gaussian PLY file."""
    model = vqvae_mod.load_vqvae(vqvae_ckpt)
    spec = _load_spec(grid)
    tensors, _ = gnn.load_checkpoint(latent_file)
    lat = vqvae_mod.Latent3D(tensors["latent"], True, tensors.get("indices"))
    dec = model.decode_latent(lat)
    g = model.heads_to_gaussians(dec, spec, occupancy_source="predicted")
    save_gaussians(emit_gaussians, g)
    click.echo(f"{len(g)} gaussians -> {emit_gaussians}")


@main.command("train-ldm3d")
@click.option("--vqvae-ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--grid", default=None, type=click.Path(exists=True))
@click.option("--steps", default=1000, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--overlap-augment", is_flag=True, default=False)
@click.option("--out", required=True, type=click.Path())
def train_ldm3d_cmd(vqvae_ckpt, data, config, grid, steps, seed, overlap_augment, out):
    """Train the latent 3D diffusion model on VQ-VAE latents."""
    spec = _load_spec(grid)
    model = vqvae_mod.load_vqvae(vqvae_ckpt)
    samples, scenes = harness.build_samples(data, spec, overlap_augment=overlap_augment)
    latents, conds = [], []
    for s, scene in zip(samples, scenes):
        latq, _, _ = model.quantize_latent(model.encode_grid(s.grid))
        latents.append(np.moveaxis(latq.grid, -1, 0))
        sem = scenegen.semantic_volume(scene, spec)
        conds.append(ldm.ConditionBundle(layout=ldm.layout_from_semantic(sem.labels),
                                         text_tokens=ldm.tokenize(scene.text())))
    cfg = ldm.LDMConfig.from_json(json.load(open(config))) if config else ldm.LDMConfig()
    denoiser, _, stats, _ = ldm.train_ldm(
        np.stack(latents), conds, cfg, tuple(d // 4 for d in spec.dims), steps, seed=seed,
        callback=lambda s, l: click.echo(f"step {s}: loss {l:.4f}"))
    ldm.save_ldm(out, denoiser, stats, step=steps)
    click.echo(f"saved {out}")


def _cond_from_json(path, spec):
    if path is None:
        return ldm.ConditionBundle()
    with open(path) as f:
        d = json.load(f)
    layout = None
    if d.get("semantic_volume"):
        labels = np.load(d["semantic_volume"])
        layout = ldm.layout_from_semantic(labels)
    elif "layout_seed" in d:
        scene = scenegen.generate_scene(int(d["layout_seed"]))
        layout = ldm.layout_from_semantic(scenegen.semantic_volume(scene, spec).labels)
    tokens = None
    if d.get("text"):
        tokens = ldm.tokenize(d["text"])
    return ldm.ConditionBundle(layout=layout, text_tokens=tokens,
                               dataset_id=d.get("dataset_id", 0))


@main.command("sample")
@click.option("--ldm-ckpt", required=True, type=click.Path(exists=True))
@click.option("--vqvae-ckpt", required=True, type=click.Path(exists=True))
@click.option("--cond", default=None, type=click.Path(exists=True))
@click.option("--grid", default=None, type=click.Path(exists=True))
@click.option("--guidance", default=1.0, type=float)
@click.option("--steps", default=50, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--emit-gaussians", required=True, type=click.Path())
@click.option("--render-trajectory", default=None, type=click.Path(exists=True))
@click.option("--out-dir", default=None, type=click.Path())
def sample_cmd(ldm_ckpt, vqvae_ckpt, cond, grid, guidance, steps, seed,
               emit_gaussians, render_trajectory, out_dir):
    """Sample a scene from the latent diffusion model."""
    spec = _load_spec(grid)
    vq = vqvae_mod.load_vqvae(vqvae_ckpt)
    denoiser, schedule, stats = ldm.load_ldm(ldm_ckpt)
    bundle = _cond_from_json(cond, spec)
    g, _ = ldm.sample_scene(bundle, steps, guidance, seed, denoiser, schedule, vq, spec, stats)
    save_gaussians(emit_gaussians, g)
    click.echo(f"{len(g)} gaussians -> {emit_gaussians}")
    if render_trajectory and out_dir:
        _render_trajectory(g, render_trajectory, out_dir)


def _render_trajectory(g, traj_path, out_dir):
    with open(traj_path) as f:
        poses = json.load(f)
    os.makedirs(out_dir, exist_ok=True)
    for k, p in enumerate(poses):
        pose = scenegen.CameraPose.from_matrix4(np.asarray(p["matrix"]).reshape(4, 4),
                                                p["intrinsics"])
        out = render(g, pose, p["h"], p["w"], background=scenegen.SKY_COLOR)
        scenegen.save_png(os.path.join(out_dir, f"{k}.png"), out.image)


@main.command("render")
@click.option("--gaussians", required=True, type=click.Path(exists=True))
@click.option("--trajectory", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
def render_cmd(gaussians, trajectory, out_dir):
    """Render a Gaussian PLY along a pose trajectory."""
    _render_trajectory(load_gaussians(gaussians), trajectory, out_dir)
    click.echo(f"frames -> {out_dir}")


@main.command("inpaint")
@click.option("--ldm-ckpt", required=True, type=click.Path(exists=True))
@click.option("--vqvae-ckpt", required=True, type=click.Path(exists=True))
@click.option("--latent", required=True, type=click.Path(exists=True))
@click.option("--mask", default="first-half", help="'first-half', 'second-half' or npy path")
@click.option("--steps", default=50, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", required=True, type=click.Path())
def inpaint_cmd(ldm_ckpt, vqvae_ckpt, latent, mask, steps, seed, out):
    """Repaint the unmasked part of a scene latent."""
    denoiser, schedule, stats = ldm.load_ldm(ldm_ckpt)
    tensors, _ = gnn.load_checkpoint(latent)
    lat = vqvae_mod.Latent3D(tensors["latent"], quantized=True)
    dims = lat.grid.shape[:3]
    keep = np.zeros(dims, bool)
    if mask == "first-half":
        keep[:, :, :dims[2] // 2] = True
    elif mask == "second-half":
        keep[:, :, dims[2] // 2:] = True
    else:
        keep = np.load(mask).astype(bool)
    result = ldm.repaint_inpaint(lat, keep, ldm.ConditionBundle(), denoiser,
                                 schedule, stats, steps, seed)
    gnn.save_checkpoint(out, {"latent": result.grid})
    click.echo(f"inpainted latent -> {out}")


@main.command("train-refiner")
@click.option("--vqvae-ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--grid", default=None, type=click.Path(exists=True))
@click.option("--steps", default=500, type=int)
@click.option("--forcing-steps", default=200, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out", required=True, type=click.Path())
def train_refiner_cmd(vqvae_ckpt, data, config, grid, steps, forcing_steps, seed, out):
    """Train the conditional 2D video refiner with diffusion forcing."""
    spec = _load_spec(grid)
    vq = vqvae_mod.load_vqvae(vqvae_ckpt)
    samples, _ = harness.build_samples(data, spec)
    cfg = refiner_mod.RefinerConfig.from_json(json.load(open(config))) if config \
        else refiner_mod.RefinerConfig()
    model, _, _ = refiner_mod.train_refiner(
        vq, samples, spec, cfg, steps, forcing_steps, seed=seed,
        callback=lambda s, l: click.echo(f"step {s}: loss {l:.4f}"))
    refiner_mod.save_refiner(out, model, step=steps + forcing_steps)
    click.echo(f"saved {out}")


@main.command("refine")
@click.option("--refiner-ckpt", required=True, type=click.Path(exists=True))
@click.option("--coarse-dir", required=True, type=click.Path(exists=True))
@click.option("--clip-len", default=5, type=int)
@click.option("--overlap", default=1, type=int)
@click.option("--steps", default=25, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--out-dir", required=True, type=click.Path())
def refine_cmd(refiner_ckpt, coarse_dir, clip_len, overlap, steps, seed, out_dir):
    """Refine a directory of coarse PNG frames into a consistent video."""
    model, schedule = refiner_mod.load_refiner(refiner_ckpt)
    names = sorted((f for f in os.listdir(coarse_dir) if f.endswith(".png")),
                   key=lambda s: int(s.split(".")[0]))
    coarse = np.stack([scenegen.load_png(os.path.join(coarse_dir, n))[..., :3] for n in names])
    refined = refiner_mod.sample_chained(coarse, clip_len, overlap, model, schedule,
                                         steps, seed, t_eps=model.cfg.t_eps)
    os.makedirs(out_dir, exist_ok=True)
    for k in range(refined.shape[0]):
        scenegen.save_png(os.path.join(out_dir, f"{k}.png"), refined[k])
    click.echo(f"{refined.shape[0]} refined frames -> {out_dir}")


@main.command("eval")
@click.option("--vqvae-ckpt", required=True, type=click.Path(exists=True))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--grid", default=None, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path())
def eval_cmd(vqvae_ckpt, data, grid, out):
    """Report reconstruction metrics on a dataset."""
    spec = _load_spec(grid)
    model = vqvae_mod.load_vqvae(vqvae_ckpt)
    samples, _ = harness.build_samples(data, spec)
    p, s, oi, mi = harness.evaluate_reconstruction(model, samples, spec)
    report = harness.MetricsReport(psnr=p, ssim=s, occupancy_iou=oi, mask_iou=mi)
    click.echo(json.dumps(report.to_json(), indent=1))
    if out:
        with open(out, "w") as f:
            json.dump(report.to_json(), f, indent=1, sort_keys=True)


@main.command("run-all")
@click.option("--config", default=None, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
def run_all_cmd(config, out, seed):
    """Run the full pipeline end to end."""
    cfg = harness.PipelineConfig.from_json(json.load(open(config))) if config \
        else harness.PipelineConfig()
    if out:
        cfg.out_dir = out
    if seed is not None:
        cfg.seed = seed
    report = harness.run_pipeline(cfg)
    click.echo(json.dumps(report.to_json(), indent=1))


if __name__ == "__main__":
    main()
