import dataclasses

import numpy as np
import pytest

from mapnerf.scene import SceneConfig, build_scene_datasets
from mapnerf.trainer import TrainConfig

ACCEPTANCE_LINES = []


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion:2d}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


SMALL_SCENE = SceneConfig(image_width=24, image_height=24, focal=15.0, n_frames=10, change_frames=10,
                          n_obstacles=1, length=20.0)

TINY_TRAIN = TrainConfig(max_steps=12, rays_per_batch=64, n_samples=16, resolution=(12, 8, 6))


@pytest.fixture(scope="session")
def small_scene_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene") / "small"
    build_scene_datasets(SMALL_SCENE, 3, root)
    return root


@pytest.fixture
def tiny_config():
    return dataclasses.replace(TINY_TRAIN)


def random_field(rng, resolution=(4, 4, 4), density_scale=2.0):
    from mapnerf.field import VoxelRadianceField

    n = int(np.prod(resolution))
    return VoxelRadianceField((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), resolution,
                              density=rng.normal(0.0, density_scale, n), color=rng.normal(0.0, 1.0, (n, 3)),
                              background=rng.random(3))
