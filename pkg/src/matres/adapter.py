"""The trainable low-rank injection module.

Matcher features are bilinearly resampled onto the restorer's feature grid,
then mapped per cell by ``up @ down``.  ``up`` starts at exactly zero, so a
fresh adapter outputs zeros and leaves the frozen pipeline untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import AdamW
from .params import ParamRegistry, load_weights, save_weights
from .tensor import ShapeError, Tensor

DOWN = "adapter.down"
UP = "adapter.up"


@dataclass
class AdapterState:
    params: ParamRegistry
    c_z: int
    c_r: int
    rank: int
    s_z: int = 4
    s_r: int = 2
    seed: int = 0
    optimizer: AdamW | None = None

    @property
    def down(self):
        return self.params[DOWN]

    @property
    def up(self):
        return self.params[UP]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def names(self) -> set[str]:
        return set(self.params.names())

    def meta(self) -> dict:
        return {"c_z": self.c_z, "c_r": self.c_r, "rank": self.rank, "s_z": self.s_z, "s_r": self.s_r,
                "seed": self.seed}

    def save(self, stem) -> None:
        save_weights(self.params.arrays(), stem, {"model": "adapter", **self.meta()})

    @classmethod
    def load(cls, stem) -> AdapterState:
        arrays, meta = load_weights(stem)
        if meta.get("model") != "adapter":
            raise ValueError(f"{stem}: not an adapter weight file")
        reg = ParamRegistry.from_arrays(arrays, trainable=True)
        return cls(reg, meta["c_z"], meta["c_r"], meta["rank"], meta["s_z"], meta["s_r"], meta["seed"])


def init_adapter(c_z: int = 16, c_r: int = 16, rank: int = 4, seed: int = 0, s_z: int = 4, s_r: int = 2,
                 init_scale: float = 1.0) -> AdapterState:
    """Seeded down-projection with std ``init_scale / sqrt(c_z)``; zero up-projection."""
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    rng = np.random.default_rng([seed, 404])
    reg = ParamRegistry()
    reg.register(DOWN, rng.standard_normal((rank, c_z)) * (init_scale / np.sqrt(c_z)), trainable=True)
    reg.register(UP, np.zeros((c_r, rank)), trainable=True)
    return AdapterState(reg, c_z, c_r, rank, s_z, s_r, seed)


def apply(state: AdapterState, z, grid_hw: tuple[int, int] | None = None) -> Tensor:
    """Map a ``(C_z, h, w)`` matcher map to a ``(C_r, H_r, W_r)`` injection.

    The restorer grid defaults to ``h * s_z / s_r`` by ``w * s_z / s_r``.
    """
    z = T.as_tensor(z)
    if z.ndim != 3 or z.shape[0] != state.c_z:
        raise ShapeError("adapter", f"expected ({state.c_z}, h, w) features, got {z.shape}")
    if grid_hw is None:
        grid_hw = (z.shape[1] * state.s_z // state.s_r, z.shape[2] * state.s_z // state.s_r)
    resampled = T.bilinear_resize(z, grid_hw)
    cells = T.reshape(resampled, (state.c_z, -1))
    out = T.matmul(state.up, T.matmul(state.down, cells))
    return T.reshape(out, (state.c_r,) + tuple(grid_hw))
