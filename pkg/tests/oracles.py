"""Independent reference implementations used as test oracles.

These deliberately avoid the library's vectorized/tiled code paths: plain
numpy float64, explicit loops, no shared helpers beyond data containers.
"""

import numpy as np


def quat_rotmat_np(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def brute_force_render(gaussians, pose, h, w, background=(0.0, 0.0, 0.0),
                       lowpass=0.3, weight_clamp=0.99, cull_eps=1.0 / 255.0,
                       near_z=0.05):
    """Dense per-pixel splatting: every Gaussian evaluated at every pixel."""
    fx, fy, cx, cy = pose.intrinsics
    rot = np.asarray(pose.rotation, np.float64)
    trans = np.asarray(pose.translation, np.float64)
    bg = np.asarray(background, np.float64)

    # camera-space means, depth-sorted with index tie-break
    entries = []
    for i in range(len(gaussians)):
        m = rot @ gaussians.positions[i] + trans
        if m[2] > near_z:
            entries.append((m[2], i, m))
    entries.sort(key=lambda e: (e[0], e[1]))

    image = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    transmittance = np.ones((h, w))
    for z, i, m in entries:
        r3 = quat_rotmat_np(gaussians.rotations[i])
        s = gaussians.scales[i]
        sigma = r3 @ np.diag(s * s) @ r3.T
        vcam = rot @ sigma @ rot.T
        x, y = m[0], m[1]
        jac = np.array([[fx / z, 0.0, -fx * x / z ** 2],
                        [0.0, fy / z, -fy * y / z ** 2]])
        cov2 = jac @ vcam @ jac.T + lowpass * np.eye(2)
        inv = np.linalg.inv(cov2)
        mean2 = np.array([fx * x / z + cx, fy * y / z + cy])
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        du = uu - mean2[0]
        dv = vv - mean2[1]
        power = -0.5 * (inv[0, 0] * du ** 2 + 2 * inv[0, 1] * du * dv + inv[1, 1] * dv ** 2)
        wgt = gaussians.opacities[i] * np.exp(power)
        wgt = np.minimum(wgt, weight_clamp)
        wgt[wgt < cull_eps] = 0.0
        contrib = wgt * transmittance
        image += contrib[..., None] * gaussians.colors[i]
        alpha += contrib
        depth += contrib * z
        transmittance *= 1.0 - wgt
    image += transmittance[..., None] * bg
    return image, alpha, depth


def ssim_scalar(x, y, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Straightforward sliding-window SSIM on h x w x c images (loops)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    ax = np.arange(window) - (window - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    win = np.outer(g, g)
    h, w = x.shape[:2]
    vals = []
    for c in range(x.shape[2]):
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                px = x[i:i + window, j:j + window, c]
                py = y[i:i + window, j:j + window, c]
                mx = (win * px).sum()
                my = (win * py).sum()
                vx = (win * px * px).sum() - mx * mx
                vy = (win * py * py).sum() - my * my
                cov = (win * px * py).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cov + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def random_gaussian_scene(rng, n, span=2.0, depth_range=(3.0, 8.0)):
    """Seeded random GaussianSet in front of an identity-pose camera."""
    from gsdiff.gsrender import GaussianSet
    pos = np.stack([rng.uniform(-span, span, n), rng.uniform(-span, span, n),
                    rng.uniform(*depth_range, n)], axis=-1)
    col = rng.uniform(0.05, 0.95, (n, 3))
    opa = rng.uniform(0.2, 0.9, n)
    sca = rng.uniform(0.1, 0.5, (n, 3))
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(pos, col, opa, sca, q)
