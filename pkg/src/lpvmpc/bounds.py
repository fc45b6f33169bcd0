from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class BoundSet:
    """Operating limits; defaults are the engine constraint table."""

    nox: tuple[float, float] = (0.0, 500.0)   # ppm
    fq: tuple[float, float] = (10.0, 80.0)    # mg/cycle
    soi: tuple[float, float] = (-2.0, 11.0)   # CAD aTDC
    vgt: tuple[float, float] = (70.0, 100.0)  # %

    def __post_init__(self):
        for name in ("nox", "fq", "soi", "vgt"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo < hi:
                raise ValueError(f"bound {name}: min {lo} must be < max {hi}")
            object.__setattr__(self, name, (lo, hi))

    @property
    def u_min(self) -> np.ndarray:
        return np.array([self.fq[0], self.soi[0], self.vgt[0]])

    @property
    def u_max(self) -> np.ndarray:
        return np.array([self.fq[1], self.soi[1], self.vgt[1]])

    def clip_input(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.u_min, self.u_max)

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "BoundSet":
        return cls(**{k: tuple(v) for k, v in d.items()})


DEFAULT_BOUNDS = BoundSet()
