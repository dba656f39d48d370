"""Shared neural-net utilities: differentiable SSIM, finite-difference gradient
checking, named-tensor checkpoints, initialization and seeding helpers.

Autograd itself is delegated to torch; the contract here is grad_check.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

CKPT_MAGIC = b"NTAR"


def seed_all(seed):
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def trunc_normal_init(module):
    for p in module.parameters():
        if p.dim() >= 2:
            torch.nn.init.trunc_normal_(p, std=0.02)
        else:
            torch.nn.init.zeros_(p)


def make_adamw(params, lr, weight_decay=0.0):
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=weight_decay)


# ---------------- SSIM ----------------

def _gaussian_window(size, sigma, dtype, device):
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-x * x / (2 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(x, y, window_size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean local SSIM between two (B,C,H,W) tensors with values in [0,1]."""
    if x.shape != y.shape:
        raise ValueError("shape mismatch")
    if x.shape[-1] < window_size or x.shape[-2] < window_size:
        raise ValueError("window larger than image")
    ch = x.shape[1]
    win = _gaussian_window(window_size, sigma, x.dtype, x.device).expand(ch, 1, window_size, window_size)
    mu_x = F.conv2d(x, win, groups=ch)
    mu_y = F.conv2d(y, win, groups=ch)
    mu_x2, mu_y2, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = F.conv2d(x * x, win, groups=ch) - mu_x2
    var_y = F.conv2d(y * y, win, groups=ch) - mu_y2
    cov = F.conv2d(x * y, win, groups=ch) - mu_xy
    num = (2 * mu_xy + c1) * (2 * cov + c2)
    den = (mu_x2 + mu_y2 + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def ssim_hwc(x, y, **kw):
    """Convenience wrapper for numpy h x w x c images."""
    tx = torch.as_tensor(x, dtype=torch.float64).permute(2, 0, 1)[None]
    ty = torch.as_tensor(y, dtype=torch.float64).permute(2, 0, 1)[None]
    return float(ssim(tx, ty, **kw))


# ---------------- gradient checking ----------------

@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)  # tensor name -> error
    tol: float = 0.0

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_error.values())

    def worst(self):
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def grad_check(module, inp, eps=1e-4, tol=1e-4, max_elements=None, seed=0):
    """Compare autograd gradients with central finite differences.

    The scalar objective is a fixed random projection of the module output.
    Runs in float64; `max_elements` caps the per-tensor number of probed
    entries (all entries when None).
    """
    module = module.double()
    inp = inp.detach().double().requires_grad_(True)
    gen = torch.Generator().manual_seed(seed)

    def objective():
        out = module(inp)
        return (out * proj).sum()

    with torch.no_grad():
        proj = torch.randn(module(inp).shape, generator=gen, dtype=torch.float64)

    loss = objective()
    named = [("input", inp)] + [(n, p) for n, p in module.named_parameters()]
    grads = torch.autograd.grad(loss, [t for _, t in named], allow_unused=True)

    report = GradCheckReport(tol=tol)
    for (name, tensor), g in zip(named, grads):
        flat = tensor.detach().view(-1)  # view, so probes mutate the real tensor
        n = flat.numel()
        probe = range(n)
        if max_elements is not None and n > max_elements:
            probe = torch.randperm(n, generator=gen)[:max_elements].tolist()
        g_flat = (g if g is not None else torch.zeros_like(tensor)).reshape(-1)
        max_err = 0.0
        for i in probe:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                lp = objective().item()
                flat[i] = orig - eps
                lm = objective().item()
                flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            an = g_flat[i].item()
            denom = max(abs(fd), abs(an), 1e-8)
            max_err = max(max_err, abs(fd - an) / denom)
        report.max_rel_error[name] = max_err
    return report


# ---------------- named-tensor checkpoint archive ----------------

def config_hash(config):
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, tensors, step=0, config=None, extra=None):
    """tensors: dict name -> numpy array / torch tensor, written little-endian."""
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        raw = np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": str(a.dtype), "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"entries": entries, "step": int(step),
                "config_hash": config_hash(config or {}), "config": config or {},
                "extra": extra or {}}
    mbytes = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (mlen,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(mlen).decode())
        blob = f.read()
    tensors = {}
    for e in manifest["entries"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")) \
            .reshape(e["shape"]).copy()
    return tensors, manifest


def state_dict_to_numpy(module):
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_dict_numpy(module, tensors):
    sd = {k: torch.as_tensor(v) for k, v in tensors.items()}
    module.load_state_dict(sd)
