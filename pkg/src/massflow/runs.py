"""Run and frame containers shared by the trainer, rig and record I/O."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Frame:
    image: np.ndarray
    speed: float
    height_map: np.ndarray | None = None


@dataclass
class Run:
    """One continuous interval whose only label is the total mass.

    ``images`` holds all frames stacked along axis 0 in capture order. When
    stored as integers, ``input_scale`` maps them back to [0, 1]. ``volumes``
    is the per-frame stereo volume signal (m^3/m) when the run carries one.
    """

    id: str
    images: np.ndarray
    speeds: np.ndarray
    total_mass: float
    empty: bool = False
    regime: str = ""
    input_scale: float | None = None
    volumes: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        if len(self.images) != self.speeds.size:
            raise ValueError(f"run {self.id}: {len(self.images)} frames but {self.speeds.size} speeds")
        if not np.all(np.isfinite(self.speeds)) or np.any(self.speeds < 0):
            raise ValueError(f"run {self.id}: speeds must be finite and >= 0")
        if not np.isfinite(self.total_mass) or self.total_mass < 0:
            raise ValueError(f"run {self.id}: total mass must be finite and >= 0")
        if self.empty and self.total_mass != 0:
            raise ValueError(f"run {self.id}: empty run with nonzero mass")
        if self.volumes is not None:
            self.volumes = np.asarray(self.volumes, dtype=np.float64)

    def __len__(self) -> int:
        return self.speeds.size

    @property
    def n(self) -> int:
        return self.speeds.size

    def inputs(self, start: int = 0, stop: int | None = None, dtype=np.float32) -> np.ndarray:
        x = np.asarray(self.images[start:stop])
        if self.input_scale is not None:
            return x.astype(dtype) * dtype(self.input_scale)
        return x.astype(dtype, copy=False)

    @property
    def frames(self) -> list[Frame]:
        return [Frame(self.inputs(j, j + 1)[0], float(self.speeds[j])) for j in range(self.n)]

    def volume_run(self) -> "Run":
        """The same run with the scalar volume signal as model input."""
        if self.volumes is None:
            raise ValueError(f"run {self.id} has no volume signal")
        return Run(self.id, self.volumes[:, None], self.speeds, self.total_mass,
                   self.empty, self.regime, None, self.volumes, dict(self.meta))
