"""Subnet shapes and the (depth, width-ratio) design grid."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tensor import Rng


@dataclass(frozen=True)
class SubnetShape:
    depth_index: int
    width_index: int
    retained_layers: tuple[int, ...]
    gate_mask: tuple[float, ...]

    def __post_init__(self):
        # an empty gate mask marks an adapter-free calibration shape
        if self.gate_mask and sum(1 for v in self.gate_mask if v) != 2:
            raise ValueError("gate_mask must carry exactly two ones")

    @property
    def depth(self) -> int:
        return int(sum(self.retained_layers))

    @property
    def key(self) -> tuple[int, int]:
        return (self.depth_index, self.width_index)

    def mask_string(self) -> str:
        return "".join(str(b) for b in self.retained_layers)


def layer_shape(retained_layers, width_index: int = 0) -> SubnetShape:
    """Shape used during calibration: layer mask only, no adapter routing."""
    return SubnetShape(-1, width_index, tuple(int(b) for b in retained_layers), ())


@dataclass(frozen=True)
class ShapeGrid:
    """Depth values (ascending) and width ratios (descending, first is 1)."""

    depths: tuple[int, ...] = (5, 6, 7, 8)
    ratios: tuple[float, ...] = (1.0, 0.75, 0.5)
    k_sample: int = 4
    _keys: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        depths = tuple(int(d) for d in self.depths)
        ratios = tuple(float(r) for r in self.ratios)
        if list(depths) != sorted(set(depths)) or depths[0] < 1:
            raise ValueError(f"depths must be strictly ascending positive ints, got {depths}")
        if list(ratios) != sorted(set(ratios), reverse=True) or ratios[0] != 1.0:
            raise ValueError(f"ratios must be strictly descending and start at 1, got {ratios}")
        if ratios[-1] <= 0:
            raise ValueError("ratios must lie in (0, 1]")
        if self.k_sample < 2:
            raise ValueError("k_sample must be >= 2")
        object.__setattr__(self, "depths", depths)
        object.__setattr__(self, "ratios", ratios)
        keys = tuple((d, w) for d in range(len(depths)) for w in range(len(ratios)))
        object.__setattr__(self, "_keys", keys)

    @property
    def mask_dim(self) -> int:
        return len(self.depths) + len(self.ratios)

    @property
    def keys(self) -> tuple[tuple[int, int], ...]:
        """All (depth_index, width_index) pairs, depth-major."""
        return self._keys

    @property
    def largest(self) -> tuple[int, int]:
        return (len(self.depths) - 1, 0)

    @property
    def smallest(self) -> tuple[int, int]:
        return (0, len(self.ratios) - 1)

    def __len__(self) -> int:
        return len(self._keys)

    def gate_mask(self, depth_index: int, width_index: int) -> tuple[float, ...]:
        m = [0.0] * self.mask_dim
        m[depth_index] = 1.0
        m[len(self.depths) + width_index] = 1.0
        return tuple(m)

    def index_of(self, depth: int, ratio: float) -> tuple[int, int]:
        try:
            di = self.depths.index(int(depth))
        except ValueError:
            raise ValueError(f"depth {depth} not in grid {self.depths}") from None
        for wi, r in enumerate(self.ratios):
            if abs(r - ratio) < 1e-6:
                return di, wi
        raise ValueError(f"width ratio {ratio} not in grid {self.ratios}")

    def shape(self, depth_index: int, width_index: int, retained_layers) -> SubnetShape:
        if not (0 <= depth_index < len(self.depths) and 0 <= width_index < len(self.ratios)):
            raise ValueError(f"shape ({depth_index}, {width_index}) outside grid")
        retained = tuple(int(b) for b in retained_layers)
        if sum(retained) != self.depths[depth_index]:
            raise ValueError(
                f"retained layers {retained} keep {sum(retained)} layers, "
                f"expected {self.depths[depth_index]}"
            )
        return SubnetShape(depth_index, width_index, retained, self.gate_mask(depth_index, width_index))

    def sandwich_sample(self, rng: Rng, k: int | None = None) -> list[tuple[int, int]]:
        """Largest, smallest, then ``k - 2`` distinct random others."""
        k = self.k_sample if k is None else k
        if k > len(self):
            raise ValueError(f"cannot sample {k} shapes from a grid of {len(self)}")
        if k < 2:
            raise ValueError("k must be >= 2")
        rest = [key for key in self._keys if key not in (self.largest, self.smallest)]
        picks = rng.choice(len(rest), k - 2, replace=False) if k > 2 else np.array([], dtype=int)
        return [self.largest, self.smallest] + [rest[int(i)] for i in picks]

    def to_dict(self) -> dict:
        return {
            "depths": list(self.depths),
            "ratios": [str(Fraction(r).limit_denominator(64)) for r in self.ratios],
            "k_sample": self.k_sample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeGrid":
        return cls(
            depths=tuple(d["depths"]),
            ratios=tuple(float(Fraction(str(r))) for r in d["ratios"]),
            k_sample=int(d.get("k_sample", 4)),
        )
