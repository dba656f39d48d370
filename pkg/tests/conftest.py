import numpy as np
import pytest

from gsdiff import ingest, scenegen

# small-but-valid grid for unit tests (same 0.4 m voxels as DESK_GRID)
TINY_GRID = ingest.GridSpec((4, 8, 8), ((0.0, 1.6), (-1.6, 1.6), (0.0, 3.2)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def scene_and_frames():
    """One procedural scene with 6 clean posed RGB-D frames at 32x48."""
    scene = scenegen.generate_scene(7)
    poses = scenegen.trajectory_poses(scene, 6, 32, 48)
    frames = [scenegen.raycast_frame(scene, p, 32, 48) for p in poses]
    return scene, frames


@pytest.fixture(scope="session")
def fused_sample(scene_and_frames):
    """The same scene ingested into the desk grid."""
    _, frames = scene_and_frames
    grid, masks, merged = ingest.fuse_frames(frames, ingest.DESK_GRID)
    return grid, masks, merged
