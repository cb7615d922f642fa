"""Gaussian random Fourier feature encoding of 2D map coordinates."""

from dataclasses import dataclass

import numpy as np

from fedmap.seeding import substream


@dataclass(frozen=True)
class EncoderConfig:
    input_dims: int = 2
    mapping_size: int = 128
    scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.input_dims != 2:
            raise ValueError(f"input_dims must be 2, got {self.input_dims}")
        if self.mapping_size < 1:
            raise ValueError(f"mapping_size must be >= 1, got {self.mapping_size}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.seed < 0:
            raise ValueError(f"seed must be unsigned, got {self.seed}")

    @property
    def out_features(self) -> int:
        return 2 * self.mapping_size


class FourierEncoder:
    """Frozen frequency matrix ``B`` of shape ``(mapping_size, input_dims)``.

    ``B`` is regenerated from the seed by every party, so it never needs to be
    transmitted. Entries are standard normal draws multiplied by ``scale``.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        self.config = config
        rng = substream(config.seed, "encoder")
        self.B = rng.standard_normal((config.mapping_size, config.input_dims)) * config.scale
        self.B.setflags(write=False)

    @property
    def out_features(self) -> int:
        return self.config.out_features

    def __call__(self, coords, dtype=np.float32) -> np.ndarray:
        return encode(coords, self, dtype=dtype)


def encode(coords, encoder: FourierEncoder, dtype=np.float32) -> np.ndarray:
    """Map ``(N, 2)`` coordinates to ``(N, 2 * mapping_size)`` features.

    Row ``i`` is ``[cos(2 pi B v_i), sin(2 pi B v_i)]``. The projection is done
    in float64 and cast to ``dtype`` at the end.
    """
    v = np.asarray(coords, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != encoder.B.shape[1]:
        raise ValueError(
            f"coords must have shape (N, {encoder.B.shape[1]}), got {v.shape}"
        )
    if not np.all(np.isfinite(v)):
        raise ValueError("coords must be finite")
    proj = 2.0 * np.pi * (v @ encoder.B.T)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=1).astype(dtype, copy=False)


def cell_centers(width: int, height: int) -> np.ndarray:
    """Normalized cell-center coordinates ``((x + 0.5) / W, (y + 0.5) / H)``.

    Rows are ordered row-major (y outer, x inner) to match ``GridMap.values``.
    """
    if width < 1 or height < 1:
        raise ValueError(f"width and height must be >= 1, got {width}x{height}")
    xs = (np.arange(width) + 0.5) / width
    ys = (np.arange(height) + 0.5) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)
