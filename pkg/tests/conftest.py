import pytest

from depthbev.config import RunConfig


@pytest.fixture
def desk_cfg():
    """Small, fast configuration shared by pipeline-level tests."""
    return RunConfig({
        "run": {"seed": 7},
        "grid": {"width": 16, "height": 16, "cell_size": 4.0},
        "model": {"channels": 8, "local_channels": 8, "voxel_channels": 6, "heads": 2},
        "voxel": {"xy_size": 1.0, "z_size": 0.5, "z_min": -1.0, "z_max": 3.0},
        "camera": {"count": 2, "rows": 8, "cols": 24, "height": 3.0},
        "lift": {"bins": 12, "near": 1.0, "far": 32.0},
        "scene": {"count": 2, "objects": 4, "depth_min": 8.0, "depth_max": 28.0,
                  "background_rate": 0.005},
        "proposals": {"count": 5},
        "train": {"steps": 6, "learning_rate": 0.02, "optimizer": "adam"},
    })
