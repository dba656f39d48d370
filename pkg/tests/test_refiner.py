import numpy as np
import pytest
import torch

from gsdiff import refiner as rf
from gsdiff.diffusion import NoiseSchedule
from gsdiff.refiner import (Denoiser2D, RefinerConfig, SENTINEL_BG,
                            render_coarse_frames, sample_chained, sample_clip,
                            train_step_2d)
from gsdiff.scenegen import forward_pose

from oracles import random_gaussian_scene

H, W = 16, 24


@pytest.fixture(scope="module")
def cfg():
    return RefinerConfig(base_ch=8, t_dim=32)


@pytest.fixture(scope="module")
def model(cfg):
    torch.manual_seed(0)
    return Denoiser2D(cfg)


@pytest.fixture(scope="module")
def sched(cfg):
    return NoiseSchedule.cosine(cfg.T)


def _coarse(k=5):
    rng = np.random.default_rng(0)
    return np.clip(rng.random((k, H, W, 3)), 0, 1).astype(np.float32)


# ---------------- model ----------------

def test_denoiser2d_shape_and_zero_init(model):
    noisy = torch.randn(3, 3, H, W)
    cond = torch.randn(3, 3, H, W)
    out = model(noisy, cond, torch.zeros(3), torch.tensor([5, 100, 900]))
    assert out.shape == (3, 3, H, W)
    assert out.abs().max().item() == 0.0  # zero-init output conv


def test_denoiser2d_per_frame_timesteps_differ():
    torch.manual_seed(0)
    m = Denoiser2D(RefinerConfig(base_ch=8, t_dim=32))
    opt = torch.optim.AdamW(m.parameters(), lr=1e-3)
    sched = NoiseSchedule.cosine()
    rng = np.random.default_rng(0)
    gen = torch.Generator().manual_seed(0)
    coarse = _coarse(3)
    gt = _coarse(3)
    for _ in range(10):
        train_step_2d((rf.VideoClip(coarse, []), rf.VideoClip(gt, [])), m, sched, opt,
                      forcing=True, rng=rng, generator=gen)
    noisy = torch.randn(3, 3, H, W)
    cond = torch.as_tensor(coarse).permute(0, 3, 1, 2)
    with torch.no_grad():
        a = m(noisy, cond, torch.zeros(3), torch.tensor([100, 100, 100]))
        b = m(noisy, cond, torch.zeros(3), torch.tensor([100, 900, 100]))
    # changing one frame's timestep changes that frame's output...
    assert (a[1] - b[1]).abs().max() > 1e-6
    # ...and reaches its neighbours through temporal attention
    assert (a[0] - b[0]).abs().max() > 1e-9


# ---------------- coarse rendering ----------------

def test_render_coarse_frames_sentinel_background(rng):
    gs = random_gaussian_scene(rng, 4, span=0.5, depth_range=(4.0, 6.0))
    # camera at origin looking along +y: identity-free check via forward_pose
    pose = forward_pose(-5.0, H, W, height=0.0, pitch=0.0)
    gs.positions = np.stack([gs.positions[:, 0], gs.positions[:, 2] - 5.0,
                             -gs.positions[:, 1]], axis=-1)  # put them ahead of the rig
    frames = rf.render_coarse_frames(gs, [pose], H, W)
    assert frames.shape == (1, H, W, 3)
    corner = frames[0, 0, 0]
    np.testing.assert_allclose(corner, SENTINEL_BG, atol=1e-5)


def test_render_coarse_depth_condition(rng):
    gs = random_gaussian_scene(rng, 4, span=0.5, depth_range=(4.0, 6.0))
    pose = forward_pose(-5.0, H, W, height=0.0)
    gs.positions = np.stack([gs.positions[:, 0], gs.positions[:, 2] - 5.0,
                             -gs.positions[:, 1]], axis=-1)
    d = rf.render_coarse_frames(gs, [pose], H, W, depth_condition=True)
    assert d.shape == (1, H, W, 3)
    np.testing.assert_allclose(d[0, ..., 0], d[0, ..., 1])  # grayscale
    assert d.min() >= 0 and d.max() <= 1


# ---------------- training ----------------

def test_train_step_2d_smoke(model, sched):
    opt = torch.optim.AdamW(model.parameters(), lr=1e-4)
    rng = np.random.default_rng(0)
    gen = torch.Generator().manual_seed(0)
    pair = (rf.VideoClip(_coarse(4), []), rf.VideoClip(_coarse(4), []))
    l1 = train_step_2d(pair, model, sched, opt, forcing=False, rng=rng, generator=gen)
    l2 = train_step_2d(pair, model, sched, opt, forcing=True, rng=rng, generator=gen)
    assert np.isfinite(l1) and np.isfinite(l2)


# ---------------- sampling ----------------

def test_sample_clip_prefix_copy_through(model, sched):
    cond = torch.as_tensor(_coarse(5)).permute(0, 3, 1, 2)
    prefix = torch.rand(2, 3, H, W)
    out = sample_clip(model, sched, cond, steps=6,
                      generator=torch.Generator().manual_seed(0), prefix=prefix)
    assert out.shape == (5, 3, H, W)
    assert torch.equal(out[:2], prefix)  # bit-identical pass-through


def test_sample_clip_deterministic(model, sched):
    cond = torch.as_tensor(_coarse(4)).permute(0, 3, 1, 2)
    a = sample_clip(model, sched, cond, 5, torch.Generator().manual_seed(9))
    b = sample_clip(model, sched, cond, 5, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)
    c = sample_clip(model, sched, cond, 5, torch.Generator().manual_seed(10))
    assert not torch.equal(a, c)


def test_sample_chained_overlap_bit_identical(model, sched):
    video = _coarse(9)
    out = sample_chained(video, clip_len=5, overlap=1, model=model, schedule=sched,
                         steps=5, seed=0)
    assert out.shape == (9, H, W, 3)
    # re-run: determinism across the whole chain
    out2 = sample_chained(video, 5, 1, model, sched, 5, 0)
    np.testing.assert_array_equal(out, out2)


def test_sample_chained_validation(model, sched):
    with pytest.raises(ValueError):
        sample_chained(_coarse(9), clip_len=2, overlap=2, model=model,
                       schedule=sched, steps=4, seed=0)
    with pytest.raises(ValueError):
        sample_chained(_coarse(3), clip_len=5, overlap=1, model=model,
                       schedule=sched, steps=4, seed=0)


def test_sample_chained_overlap_frames_survive_next_clip(cfg, sched):
    """The overlap frame after chaining equals the first clip's version."""
    torch.manual_seed(1)
    model = Denoiser2D(cfg)
    video = _coarse(9)
    gen = torch.Generator().manual_seed(4)
    cond_all = torch.as_tensor(video).permute(0, 3, 1, 2)
    first = sample_clip(model, sched, cond_all[:5], 5, gen)
    full = sample_chained(video, 5, 1, model, sched, 5, seed=4)
    np.testing.assert_array_equal(full[4], first.permute(0, 2, 3, 1).numpy()[4])


# ---------------- pairs + persistence ----------------

def test_make_training_pairs(fused_sample, scene_and_frames):
    from gsdiff.ingest import DESK_GRID
    from gsdiff.vqvae import SceneSample, VQConfig, VoxelVQVAE
    torch.manual_seed(0)
    grid, masks, _ = fused_sample
    _, frames = scene_and_frames
    vq = VoxelVQVAE(VQConfig(base_ch=4, f_feat=8, codebook_size=32))
    samples = [SceneSample(grid, frames, masks)]
    rng = np.random.default_rng(0)
    pairs = rf.make_training_pairs(vq, samples, DESK_GRID, rng, n_pairs=3)
    assert len(pairs) == 3
    for coarse, gt in pairs:
        assert coarse.frames.shape == gt.frames.shape
        assert 1 <= coarse.frames.shape[0] <= 5
        assert coarse.frames.shape[1:] == (32, 48, 3)


def test_save_load_refiner_round_trip(tmp_path, model, sched):
    p = str(tmp_path / "r.ckpt")
    rf.save_refiner(p, model)
    m2, sch2 = rf.load_refiner(p)
    x = torch.randn(2, 3, H, W)
    c = torch.randn(2, 3, H, W)
    t = torch.tensor([10, 700])
    with torch.no_grad():
        assert torch.equal(model(x, c, torch.zeros(2), t), m2(x, c, torch.zeros(2), t))
    np.testing.assert_array_equal(sch2.alpha_bar, sched.alpha_bar)
