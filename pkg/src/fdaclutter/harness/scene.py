"""Scene definitions shared by the medium, propagation and harness layers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..constitutive import ColeColeParams
from ..medium import GridSpec, PerturbationSpec
from ..propagation import ArrayGeometry

FREQS_HZ = (50e6, 70e6, 90e6, 110e6, 130e6, 150e6)
TX_X = (0.25, 0.70, 1.15, 1.60, 2.05, 2.50)
RX_OFFSET = 0.10

SCALE_GRID = (0.01, 0.05, 0.10, 0.20, 0.30, 0.50, 0.70, 0.90, 1.00, 1.10)
CORR_GRID = (0.2, 0.4, 0.8, 1.6)
# S3 uses the short end of the scan: its regime split relies on every draw
# reaching the tau clamp at scale 1, which needs a rough field
DEFAULT_CORR_LENGTH = {"S1": 0.8, "S2": 0.8, "S3": 0.2}

NOMINALS = {
    "S1": ColeColeParams(eps_inf=9.0),
    "S2": ColeColeParams(eps_inf=1.919**1.8),
    "S3": ColeColeParams(eps_inf=3.16, delta_eps=88.34, tau=2.1e-5),
}

CHANNELS = {
    "S1": ("eps_inf",),
    "S2": ("eps_inf",),
    "S3": ("eps_inf", "delta_eps", "tau"),
}

# fractional std per channel, tuned so S1/S2 stay deep in the contraction
# regime while S3's relaxation time collapses somewhere in almost every draw
# at scale 1 (tau clamped at 0 switches a patch to its static permittivity)
TUNED_STD = {
    "S1": {"eps_inf": 5e-4},
    "S2": {"eps_inf": 5e-4},
    "S3": {"eps_inf": 5e-4, "delta_eps": 5e-4, "tau": 1.0},
}


@dataclass
class SceneSpec:
    scene_id: str
    nominal: ColeColeParams
    grid: GridSpec = field(default_factory=GridSpec)
    geometry: ArrayGeometry = field(default_factory=lambda: ArrayGeometry.colinear(TX_X, RX_OFFSET, FREQS_HZ))
    pert: PerturbationSpec = field(default_factory=PerturbationSpec)
    reference: str = "B"
    trials: int = 256
    master_seed: int = 20260401
    scale_grid: tuple[float, ...] = SCALE_GRID
    corr_grid: tuple[float, ...] = CORR_GRID
    channels: tuple[str, ...] = ("eps_inf",)

    @property
    def P(self) -> int:
        return self.grid.P

    @property
    def M(self) -> int:
        return self.geometry.M

    @property
    def N(self) -> int:
        return self.geometry.N

    def with_pert(self, pert: PerturbationSpec) -> "SceneSpec":
        return replace(self, pert=pert)


def default_scene(scene_id: str, **overrides) -> SceneSpec:
    if scene_id not in NOMINALS:
        raise KeyError(f"unknown scene {scene_id!r}")
    pert = PerturbationSpec(active=CHANNELS[scene_id], std=dict(TUNED_STD[scene_id]), corr_length=DEFAULT_CORR_LENGTH[scene_id])
    scene = SceneSpec(scene_id=scene_id, nominal=NOMINALS[scene_id], pert=pert, channels=CHANNELS[scene_id])
    return replace(scene, **overrides) if overrides else scene


def frequencies_hz(scene: SceneSpec) -> np.ndarray:
    return scene.geometry.omegas / (2 * np.pi)
