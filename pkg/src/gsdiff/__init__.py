"""Cascaded 3D-to-2D scene generation: voxel fusion, a voxel-to-Gaussians
VQ-VAE, latent 3D diffusion, differentiable splatting, and a 2D video refiner.
"""

__version__ = "0.1.0"
