from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PEConfig:
    """Sinusoidal coordinate encoding.

    ``indexing='standard'`` uses the frequencies 2^k pi for both axes;
    ``'literal'`` uses 2^(k+1) pi for the v axis.
    """

    bands: int = 6
    include_raw: bool = True
    indexing: str = "standard"

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError("need at least one frequency band")
        if self.indexing not in ("standard", "literal"):
            raise ValueError(f"unknown indexing {self.indexing!r}")

    @property
    def dim(self) -> int:
        return 4 * self.bands + (2 if self.include_raw else 0)


def positional_encoding(coords: np.ndarray, cfg: PEConfig) -> np.ndarray:
    """Encode (u, v) on the channel axis (axis -3): 2 x H x W -> D x H x W, batched or not."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape[-3] != 2:
        raise ValueError(f"coords need 2 channels on axis -3, got shape {coords.shape}")
    if np.any(np.abs(coords) > 1.0 + 1e-9):
        raise ValueError("coordinates must lie in [-1, 1]")
    u = coords[..., 0:1, :, :]
    v = coords[..., 1:2, :, :]
    feats = [u, v] if cfg.include_raw else []
    vshift = 1 if cfg.indexing == "literal" else 0
    for k in range(cfg.bands):
        fu = (2.0 ** k) * np.pi
        fv = (2.0 ** (k + vshift)) * np.pi
        feats += [np.sin(fu * u), np.cos(fu * u), np.sin(fv * v), np.cos(fv * v)]
    return np.concatenate(feats, axis=-3)


def raw_encoding(coords: np.ndarray) -> np.ndarray:
    """Encoding used when positional encoding is ablated: the bare (u, v)."""
    coords = np.asarray(coords, dtype=float)
    if np.any(np.abs(coords) > 1.0 + 1e-9):
        raise ValueError("coordinates must lie in [-1, 1]")
    return coords.copy()
