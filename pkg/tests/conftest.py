from __future__ import annotations

import functools

import pytest

from fdaclutter.harness.scene import default_scene
from fdaclutter.medium import build_reference, calibration_samples
from fdaclutter.propagation import assemble_kernels


@functools.lru_cache(maxsize=None)
def scene_setup(scene_id: str, kind: str = "B", scale: float = 1.0):
    """(scene, reference, kernels) with the scene's default perturbation at ``scale``."""
    scene = default_scene(scene_id)
    pert = scene.pert.with_scale(scale)
    cal = calibration_samples(scene, pert, 11, 64) if kind == "U" else None
    ref = build_reference(scene, kind, cal)
    return scene, ref, assemble_kernels(scene.geometry, scene.grid, ref)


@pytest.fixture(scope="session")
def s1():
    return scene_setup("S1")


@pytest.fixture(scope="session")
def s3():
    return scene_setup("S3")
