"""World-frame state of one rigid body: pose and twist."""

from dataclasses import dataclass, field

import numpy as np


def _zeros3() -> np.ndarray:
    return np.zeros(3)


@dataclass
class Frame:
    """Position, orientation, and linear/angular velocity in world coordinates."""

    pos: np.ndarray
    rot: np.ndarray
    linvel: np.ndarray = field(default_factory=_zeros3)
    angvel: np.ndarray = field(default_factory=_zeros3)

    def __post_init__(self):
        self.pos = np.asarray(self.pos, dtype=float)
        self.rot = np.asarray(self.rot, dtype=float)
        self.linvel = np.asarray(self.linvel, dtype=float)
        self.angvel = np.asarray(self.angvel, dtype=float)

    @staticmethod
    def identity() -> "Frame":
        return Frame(pos=np.zeros(3), rot=np.eye(3))

    def copy(self) -> "Frame":
        return Frame(self.pos.copy(), self.rot.copy(), self.linvel.copy(), self.angvel.copy())
