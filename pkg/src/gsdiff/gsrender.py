"""Differentiable 3D Gaussian splatting.

Forward: EWA projection of each Gaussian to an image-space 2D Gaussian,
global front-to-back alpha compositing over depth-sorted primitives,
evaluated tile by tile. Backward comes from autograd on the same graph.
"""

from dataclasses import dataclass

import numpy as np
import torch

LOWPASS = 0.3          # px^2 added to the 2D covariance diagonal
WEIGHT_CLAMP = 0.99
CULL_EPS = 1.0 / 255.0
NEAR_Z = 0.05
TILE = 16


@dataclass
class GaussianPrimitive:
    position: np.ndarray  # 3
    color: np.ndarray     # 3 in [0,1]
    opacity: float        # (0,1)
    scale: np.ndarray     # 3, meters, > 0
    rotation: np.ndarray  # unit quaternion (w,x,y,z)


class GaussianSet:
    """Flat struct-of-arrays container for Gaussian primitives."""

    def __init__(self, positions, colors, opacities, scales, rotations):
        self.positions = np.asarray(positions, float).reshape(-1, 3)
        self.colors = np.asarray(colors, float).reshape(-1, 3)
        self.opacities = np.asarray(opacities, float).reshape(-1)
        self.scales = np.asarray(scales, float).reshape(-1, 3)
        self.rotations = np.asarray(rotations, float).reshape(-1, 4)

    def __len__(self):
        return self.positions.shape[0]

    def __getitem__(self, i):
        return GaussianPrimitive(self.positions[i], self.colors[i], float(self.opacities[i]),
                                 self.scales[i], self.rotations[i])

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))

    @classmethod
    def from_primitives(cls, prims):
        if not prims:
            return cls.empty()
        return cls(np.stack([p.position for p in prims]),
                   np.stack([p.color for p in prims]),
                   np.array([p.opacity for p in prims]),
                   np.stack([p.scale for p in prims]),
                   np.stack([p.rotation for p in prims]))

    def validate(self):
        if len(self) == 0:
            return
        if np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1) > 1e-6):
            raise ValueError("quaternions must be unit")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if np.any((self.opacities <= 0) | (self.opacities >= 1)):
            raise ValueError("opacities must lie strictly in (0,1)")


@dataclass
class RenderOutput:
    image: np.ndarray      # h x w x 3
    alpha_map: np.ndarray  # h x w in [0,1]
    depth_map: np.ndarray  # h x w, alpha-weighted expected depth


def quat_to_rotmat(q):
    """(N,4) unit quaternions (w,x,y,z) -> (N,3,3); torch, differentiable."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def covariance_3d(scale, rotation, tol=1e-6):
    """Sigma = R diag(s^2) R^T for a single Gaussian (numpy)."""
    q = np.asarray(rotation, float)
    if abs(np.linalg.norm(q) - 1.0) > tol:
        raise ValueError("quaternion must be unit")
    r = quat_to_rotmat(torch.as_tensor(q, dtype=torch.float64)[None]).numpy()[0]
    s = np.asarray(scale, float)
    return r @ np.diag(s * s) @ r.T


def render_torch(positions, colors, opacities, scales, rotations, pose, h, w,
                 background, tile=TILE, cull_eps=CULL_EPS, lowpass=LOWPASS,
                 weight_clamp=WEIGHT_CLAMP):
    """Differentiable forward pass. All gaussian inputs are torch tensors.

    Returns (image hxwx3, alpha hxw, depth hxw) in the input dtype.
    """
    dtype = positions.dtype
    dev = positions.device
    rot = torch.as_tensor(pose.rotation, dtype=dtype, device=dev)
    trans = torch.as_tensor(pose.translation, dtype=dtype, device=dev)
    fx, fy, cx, cy = [float(v) for v in pose.intrinsics]
    bg = torch.as_tensor(np.asarray(background, float), dtype=dtype, device=dev)

    image = torch.zeros(h, w, 3, dtype=dtype, device=dev)
    alpha = torch.zeros(h, w, dtype=dtype, device=dev)
    depth = torch.zeros(h, w, dtype=dtype, device=dev)

    n = positions.shape[0]
    if n == 0:
        return image + bg, alpha, depth

    cam = positions @ rot.T + trans
    front = cam[:, 2] > NEAR_Z
    if not bool(front.any()):
        return image + bg, alpha, depth
    idx_front = torch.nonzero(front, as_tuple=False).squeeze(1)
    cam = cam[idx_front]
    # global depth sort; stable -> ties broken by original index
    order = torch.argsort(cam[:, 2], stable=True)
    cam = cam[order]
    sel = idx_front[order]
    col = colors[sel]
    opa = opacities[sel]

    r3 = quat_to_rotmat(rotations[sel])
    s = scales[sel]
    sigma = r3 @ torch.diag_embed(s * s) @ r3.transpose(-1, -2)
    vcam = rot @ sigma @ rot.T  # camera-space covariance

    x, y, z = cam.unbind(-1)
    zero = torch.zeros_like(z)
    j = torch.stack([
        torch.stack([fx / z, zero, -fx * x / (z * z)], dim=-1),
        torch.stack([zero, fy / z, -fy * y / (z * z)], dim=-1),
    ], dim=-2)  # (m, 2, 3)
    cov2 = j @ vcam @ j.transpose(-1, -2)
    cov2 = cov2 + lowpass * torch.eye(2, dtype=dtype, device=dev)
    mean2 = torch.stack([fx * x / z + cx, fy * y / z + cy], dim=-1)

    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    inv_a, inv_b, inv_c = c / det, -b / det, a / det
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt(torch.clamp(mid * mid - det, min=1e-12))
    # beyond this radius the weight is guaranteed below cull_eps (+1 px margin)
    amp = torch.clamp(opa.detach() / cull_eps, min=1.0)
    radius = torch.sqrt(2.0 * torch.log(amp) * lam_max) + 1.0

    # tile overlap test on detached geometry (selection only, no gradient needed)
    m2 = mean2.detach()
    rad = radius.detach()
    for ty in range(0, h, tile):
        for tx in range(0, w, tile):
            y1, x1 = min(ty + tile, h), min(tx + tile, w)
            hit = ((m2[:, 0] + rad >= tx) & (m2[:, 0] - rad <= x1 - 1) &
                   (m2[:, 1] + rad >= ty) & (m2[:, 1] - rad <= y1 - 1))
            gi = torch.nonzero(hit, as_tuple=False).squeeze(1)
            if gi.numel() == 0:
                image[ty:y1, tx:x1] = bg
                continue
            py, px = torch.meshgrid(
                torch.arange(ty, y1, dtype=dtype, device=dev),
                torch.arange(tx, x1, dtype=dtype, device=dev), indexing="ij")
            pix = torch.stack([px.reshape(-1), py.reshape(-1)], dim=-1)  # (p, 2)
            d = pix[None] - mean2[gi][:, None]  # (m, p, 2)
            power = -0.5 * (inv_a[gi][:, None] * d[..., 0] ** 2
                            + 2 * inv_b[gi][:, None] * d[..., 0] * d[..., 1]
                            + inv_c[gi][:, None] * d[..., 1] ** 2)
            wgt = opa[gi][:, None] * torch.exp(power)
            wgt = torch.clamp(wgt, max=weight_clamp)
            wgt = torch.where(wgt >= cull_eps, wgt, torch.zeros_like(wgt))
            keep = 1.0 - wgt
            trans_after = torch.cumprod(keep, dim=0)
            trans_before = torch.cat([torch.ones_like(keep[:1]), trans_after[:-1]], dim=0)
            contrib = wgt * trans_before  # (m, p)
            img_t = (contrib[..., None] * col[gi][:, None]).sum(0)
            alpha_t = contrib.sum(0)
            depth_t = (contrib * z[gi][:, None]).sum(0)
            t_final = trans_after[-1]
            img_t = img_t + t_final[:, None] * bg
            th, tw = y1 - ty, x1 - tx
            image[ty:y1, tx:x1] = img_t.reshape(th, tw, 3)
            alpha[ty:y1, tx:x1] = alpha_t.reshape(th, tw)
            depth[ty:y1, tx:x1] = depth_t.reshape(th, tw)
    return image, alpha, depth


def _to_tensors(gaussians, dtype, requires_grad=False):
    mk = lambda a: torch.tensor(a, dtype=dtype, requires_grad=requires_grad)
    return (mk(gaussians.positions), mk(gaussians.colors), mk(gaussians.opacities),
            mk(gaussians.scales), mk(gaussians.rotations))


def render(gaussians, pose, h, w, background=(0.0, 0.0, 0.0), dtype=torch.float64, **kw):
    """Forward rendering of a GaussianSet to a RenderOutput (numpy)."""
    gaussians.validate()
    with torch.no_grad():
        img, alpha, depth = render_torch(*_to_tensors(gaussians, dtype), pose, h, w, background, **kw)
    return RenderOutput(img.numpy(), alpha.numpy(), depth.numpy())


def render_backward(gaussians, pose, h, w, background, grad_output, dtype=torch.float64, **kw):
    """Gradients of sum(image * grad_output) w.r.t. every Gaussian attribute."""
    tensors = _to_tensors(gaussians, dtype, requires_grad=True)
    img, _, _ = render_torch(*tensors, pose, h, w, background, **kw)
    loss = (img * torch.as_tensor(np.asarray(grad_output), dtype=dtype)).sum()
    if not loss.requires_grad:  # nothing in front of the camera
        grads = (None,) * 5
    else:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    names = ("positions", "colors", "opacities", "scales", "rotations")
    return {k: (g.numpy() if g is not None else np.zeros_like(getattr(gaussians, k)))
            for k, g in zip(names, grads)}


# ---------------- PLY-style binary import/export ----------------

_PLY_PROPS = ["x", "y", "z", "red", "green", "blue", "opacity",
              "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def save_gaussians(path, gaussians):
    n = len(gaussians)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header.append("end_header")
    data = np.concatenate([gaussians.positions, gaussians.colors,
                           gaussians.opacities[:, None], gaussians.scales,
                           gaussians.rotations], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def load_gaussians(path):
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    n = next(int(l.split()[-1]) for l in header if l.startswith("element vertex"))
    data = np.frombuffer(raw[end:], "<f4").reshape(n, len(_PLY_PROPS)).astype(np.float64)
    return GaussianSet(data[:, 0:3], data[:, 3:6], data[:, 6], data[:, 7:10], data[:, 10:14])
