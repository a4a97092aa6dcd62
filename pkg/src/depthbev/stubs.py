"""Small learnable stand-ins for the heavyweight encoders.

The full 2D/3D backbones are out of scope; each is replaced by a linear
stub so the fusion path stays end-to-end trainable. Every stub exposes
``named_parameters()`` for checkpointing and optimization.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


def dense_init(rng: np.random.Generator, d_in: int, d_out: int, scale: float | None = None) -> np.ndarray:
    if scale is None:
        scale = float(np.sqrt(2.0 / (d_in + d_out)))
    return rng.normal(0.0, scale, size=(d_in, d_out))


class Dense:
    """A weight (+ optional bias) pair used as a position-wise linear stub."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None):
        if d_in <= 0 or d_out <= 0:
            raise ConfigError(f"dense dims must be positive, got {d_in}->{d_out}")
        self.weight = Tensor(dense_init(rng, d_in, d_out, scale), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out


class VoxelPoolStub:
    """Mix pooled voxel features (3D-conv stand-in) then project to c."""

    def __init__(self, c_v: int, c_out: int, rng: np.random.Generator):
        self.mix_weight = Tensor(dense_init(rng, c_v, c_v), requires_grad=True)
        self.mix_bias = Tensor(np.zeros(c_v), requires_grad=True)
        self.out_weight = Tensor(dense_init(rng, c_v, c_out), requires_grad=True)
        self.out_bias = Tensor(np.zeros(c_out), requires_grad=True)
        # learned embedding for boxes containing no points; distinguishable from zeros
        self.empty = Tensor(rng.normal(0.0, 0.1, size=c_out), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("mix_weight", self.mix_weight), ("mix_bias", self.mix_bias),
                ("out_weight", self.out_weight), ("out_bias", self.out_bias),
                ("empty", self.empty)]


class RoiStub:
    """RoI-align bins flattened through a linear map to c channels."""

    def __init__(self, channels: int, c_out: int, rng: np.random.Generator,
                 bins: tuple[int, int] = (3, 3), samples: int = 2, with_empty: bool = False):
        self.bins = bins
        self.samples = samples
        d_in = bins[0] * bins[1] * channels
        self.weight = Tensor(dense_init(rng, d_in, c_out), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.empty = Tensor(rng.normal(0.0, 0.1, size=c_out), requires_grad=True) if with_empty else None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("weight", self.weight), ("bias", self.bias)]
        if self.empty is not None:
            out.append(("empty", self.empty))
        return out


def prefix_params(prefix: str, named: list[tuple[str, Tensor]]) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{name}", t) for name, t in named]
