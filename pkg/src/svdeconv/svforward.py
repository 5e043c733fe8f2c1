"""Low-rank shift-variant forward model and multi-aperture multiplexing.

Each microlens ``l`` maps an object ``x`` to a lens image

    y_l = sum_r h_r * (w_r . x)

with ``R`` small kernels ``h_r`` and coefficient maps ``w_r`` living on the
object grid. The nine lens images are then shifted by their chief-ray
offsets, summed on a padded canvas and cropped to the sensor.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .ndauto import fft_conv2d_same

NUM_LENSES = 9


def _grid_chief_rays(pad: Tuple[int, int], subview: Tuple[int, int]) -> Tuple[Tuple[int, int], ...]:
    sr = (pad[0] - subview[0]) // 2
    sc = (pad[1] - subview[1]) // 2
    return tuple((i * sr, j * sc) for i in (-1, 0, 1) for j in (-1, 0, 1))


@dataclass(frozen=True)
class Geometry:
    """Spatial bookkeeping shared by synthesis, training and inference.

    Chief rays are (row, col) offsets of the sub-view centres relative to the
    centre of the padded canvas, ordered row-major over the 3x3 lattice.
    """

    sensor_size: Tuple[int, int] = (360, 360)
    pad_size: Tuple[int, int] = (420, 420)
    subview_size: Tuple[int, int] = (240, 240)
    patch_size: int = 48
    stride: int = 24
    chief_rays: Tuple[Tuple[int, int], ...] = field(default=())
    scale_factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "sensor_size", tuple(int(v) for v in self.sensor_size))
        object.__setattr__(self, "pad_size", tuple(int(v) for v in self.pad_size))
        object.__setattr__(self, "subview_size", tuple(int(v) for v in self.subview_size))
        if not self.chief_rays:
            object.__setattr__(self, "chief_rays", _grid_chief_rays(self.pad_size, self.subview_size))
        else:
            object.__setattr__(self, "chief_rays", tuple((int(r), int(c)) for r, c in self.chief_rays))
        self.validate()

    @classmethod
    def scaled(cls, scale_factor: float = 10.0, **overrides) -> "Geometry":
        """Full-instrument proportions divided by ``scale_factor``.

        Full scale (factor 1) is pad 4200, sub-view 2400, patch 480, stride 240.
        """
        s = float(scale_factor)
        kw = dict(
            sensor_size=(round(3600 / s),) * 2,
            pad_size=(round(4200 / s),) * 2,
            subview_size=(round(2400 / s),) * 2,
            patch_size=round(480 / s),
            stride=round(240 / s),
            scale_factor=s,
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, **overrides) -> "Geometry":
        return cls.scaled(10.0, **overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "Geometry":
        return cls.scaled(1.0, **overrides)

    def validate(self) -> None:
        hs, ws = self.sensor_size
        hp, wp = self.pad_size
        hv, wv = self.subview_size
        if min(hs, ws, hp, wp, hv, wv, self.patch_size, self.stride) <= 0:
            raise ValueError("geometry sizes must be positive")
        if hs > hp or ws > wp:
            raise ValueError(f"sensor {self.sensor_size} larger than padded frame {self.pad_size}")
        if self.patch_size > hv or self.patch_size > wv:
            raise ValueError(f"patch size {self.patch_size} exceeds sub-view {self.subview_size}")
        if self.stride > self.patch_size:
            raise ValueError(f"stride {self.stride} exceeds patch size {self.patch_size}")
        if len(self.chief_rays) != NUM_LENSES:
            raise ValueError(f"need {NUM_LENSES} chief rays, got {len(self.chief_rays)}")
        for lens in range(NUM_LENSES):
            r0, c0 = self.window_origin(lens)
            if r0 + hv <= 0 or c0 + wv <= 0 or r0 >= hp or c0 >= wp:
                raise ValueError(f"sub-view window of lens {lens} lies entirely outside the padded frame")

    @property
    def canvas_center(self) -> Tuple[int, int]:
        return self.pad_size[0] // 2, self.pad_size[1] // 2

    @property
    def sensor_origin(self) -> Tuple[int, int]:
        """Top-left corner of the sensor inside the padded canvas."""
        return ((self.pad_size[0] - self.sensor_size[0]) // 2,
                (self.pad_size[1] - self.sensor_size[1]) // 2)

    def window_origin(self, lens: int) -> Tuple[int, int]:
        """Top-left corner of lens ``lens``'s sub-view window on the canvas."""
        cr, cc = self.canvas_center
        dr, dc = self.chief_rays[lens]
        return cr + dr - self.subview_size[0] // 2, cc + dc - self.subview_size[1] // 2

    def windows_inside(self) -> bool:
        hp, wp = self.pad_size
        hv, wv = self.subview_size
        return all(0 <= r and 0 <= c and r + hv <= hp and c + wv <= wp
                   for r, c in (self.window_origin(i) for i in range(NUM_LENSES)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chief_rays"] = [list(c) for c in self.chief_rays]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        d = dict(d)
        d["chief_rays"] = tuple(tuple(c) for c in d.get("chief_rays", ()))
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SVBasis:
    """Rank-R shift-variant PSF of one lens: kernels (R, k, k) and coefficient maps (R, H, W)."""

    kernels: np.ndarray
    coeff_maps: np.ndarray
    lens_id: int = 0

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=float)
        self.coeff_maps = np.asarray(self.coeff_maps, dtype=float)
        if self.kernels.ndim != 3 or self.coeff_maps.ndim != 3:
            raise ValueError("kernels must be (R, k, k) and coeff_maps (R, H, W)")
        if self.kernels.shape[0] != self.coeff_maps.shape[0]:
            raise ValueError("kernel count and coefficient-map count differ")
        if self.kernels.shape[1] % 2 == 0 or self.kernels.shape[2] % 2 == 0:
            raise ValueError("kernel size must be odd")
        if not np.all(np.isfinite(self.coeff_maps)) or np.any(self.coeff_maps < 0):
            raise ValueError("coefficient maps must be finite and nonnegative")
        if not 0 <= self.lens_id < NUM_LENSES:
            raise ValueError(f"lens_id {self.lens_id} outside [0, {NUM_LENSES})")

    @property
    def rank(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[1]

    @property
    def object_shape(self) -> Tuple[int, int]:
        return self.coeff_maps.shape[1:]


def _gaussian_kernel(k: int, sigma: float, dr: float, dc: float) -> np.ndarray:
    ax = np.arange(k) - k // 2
    rr, cc = np.meshgrid(ax, ax, indexing="ij")
    g = np.exp(-((rr - dr) ** 2 + (cc - dc) ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def synth_basis(geometry: Geometry, rank: int = 3, seed: int = 0, kernel_size: int = 9,
                vignetting: float = 0.7, constant_maps: bool = False) -> List[SVBasis]:
    """Synthetic low-rank bases for the nine lenses.

    Component ``r`` is a Gaussian blob that gets wider and shifts further off
    axis as ``r`` grows. Its coefficient map is a radial bump centred on
    normalised field radius ``r / (R - 1)``, measured from each lens's own
    optical axis, times a quadratic vignetting falloff. The PSF therefore
    broadens and dims toward the field edge.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {kernel_size}")
    rng = np.random.default_rng(seed)
    h, w = geometry.subview_size
    v = np.linspace(-1.0, 1.0, h)[:, None]
    u = np.linspace(-1.0, 1.0, w)[None, :]
    bases = []
    for lens in range(NUM_LENSES):
        li, lj = divmod(lens, 3)
        axis_v, axis_u = 0.25 * (li - 1), 0.25 * (lj - 1)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        jitter = rng.uniform(0.9, 1.1)
        kernels = []
        for r in range(rank):
            sigma = (0.7 + 0.9 * r) * jitter
            shift = min(0.6 * r, kernel_size // 2 - 1)
            kernels.append(_gaussian_kernel(kernel_size, sigma, shift * np.sin(angle), shift * np.cos(angle)))
        if constant_maps:
            maps = np.ones((rank, h, w))
        else:
            rho = np.sqrt(((u - axis_u) ** 2 + (v - axis_v) ** 2) / 2.0)
            rho = np.clip(rho, 0.0, 1.0)
            if rank == 1:
                bumps = np.ones((1, h, w))
            else:
                centres = np.linspace(0.0, 1.0, rank)
                width = 0.6 / (rank - 1)
                bumps = np.exp(-((rho[None] - centres[:, None, None]) ** 2) / (2.0 * width ** 2))
                bumps /= bumps.sum(axis=0, keepdims=True)
            falloff = np.clip(1.0 - vignetting * rho ** 2, 0.05, None)
            maps = bumps * falloff[None]
        bases.append(SVBasis(np.stack(kernels), maps, lens))
    return bases


def sv_forward(x: np.ndarray, basis: SVBasis) -> np.ndarray:
    """Lens image ``sum_r h_r * (w_r . x)`` (zero-padded linear convolution)."""
    x = np.asarray(x, dtype=float)
    if x.shape != basis.object_shape:
        raise ValueError(f"object shape {x.shape} does not match coefficient maps {basis.object_shape}")
    y = np.zeros_like(x)
    for h_r, w_r in zip(basis.kernels, basis.coeff_maps):
        y += fft_conv2d_same(w_r * x, h_r)
    return y


def sv_forward_bruteforce(x: np.ndarray, basis: SVBasis) -> np.ndarray:
    """Superpose the local PSF of every source pixel explicitly."""
    x = np.asarray(x, dtype=float)
    if x.shape != basis.object_shape:
        raise ValueError(f"object shape {x.shape} does not match coefficient maps {basis.object_shape}")
    h, w = x.shape
    k = basis.kernel_size
    c = k // 2
    out = np.zeros((h + 2 * c, w + 2 * c))
    for i in range(h):
        for j in range(w):
            if x[i, j] == 0.0:
                continue
            psf = np.zeros((k, k))
            for r in range(basis.rank):
                psf += basis.coeff_maps[r, i, j] * basis.kernels[r]
            out[i:i + k, j:j + k] += x[i, j] * psf
    return out[c:c + h, c:c + w]


def reconstruct_local_psf(basis: SVBasis, t: Tuple[int, int]) -> np.ndarray:
    """Local kernel ``sum_r w_r(t) h_r`` seen by a point source at pixel ``t``."""
    i, j = t
    h, w = basis.object_shape
    if not (0 <= i < h and 0 <= j < w):
        raise IndexError(f"pixel {t} outside object of shape {basis.object_shape}")
    return np.tensordot(basis.coeff_maps[:, i, j], basis.kernels, axes=1)


def psf_second_moment(psf: np.ndarray) -> float:
    """Intensity-weighted mean squared distance from the centroid."""
    k = psf.shape[0]
    ax = np.arange(k, dtype=float)
    rr, cc = np.meshgrid(ax, ax, indexing="ij")
    m = psf.sum()
    cr, cc0 = (psf * rr).sum() / m, (psf * cc).sum() / m
    return float((psf * ((rr - cr) ** 2 + (cc - cc0) ** 2)).sum() / m)


def multiplex(lens_images: Sequence[np.ndarray], geometry: Geometry) -> np.ndarray:
    """Place each lens image at its chief ray, sum on the padded canvas, crop to the sensor."""
    if not lens_images:
        raise ValueError("no lens images")
    shape = np.shape(lens_images[0])
    if any(np.shape(im) != shape for im in lens_images):
        raise ValueError("lens images must share one size")
    if len(lens_images) > len(geometry.chief_rays):
        raise ValueError("more lens images than chief rays")
    hp, wp = geometry.pad_size
    canvas = np.zeros((hp, wp))
    cr, cc = geometry.canvas_center
    h, w = shape
    for lens, img in enumerate(lens_images):
        dr, dc = geometry.chief_rays[lens]
        r0, c0 = cr + dr - h // 2, cc + dc - w // 2
        a0, b0 = max(r0, 0), max(c0, 0)
        a1, b1 = min(r0 + h, hp), min(c0 + w, wp)
        if a0 >= a1 or b0 >= b1:
            raise ValueError(f"lens {lens} image falls entirely outside the canvas")
        canvas[a0:a1, b0:b1] += np.asarray(img, dtype=float)[a0 - r0:a1 - r0, b0 - c0:b1 - c0]
    sr, sc = geometry.sensor_origin
    hs, ws = geometry.sensor_size
    return canvas[sr:sr + hs, sc:sc + ws].copy()


def save_bases(path, bases: Sequence[SVBasis]) -> None:
    from .container import write_container
    records = {}
    for b in bases:
        records[f"lens{b.lens_id}/kernels"] = b.kernels
        records[f"lens{b.lens_id}/coeff_maps"] = b.coeff_maps
    write_container(path, records)


def load_bases(path) -> List[SVBasis]:
    from .container import read_container
    rec = read_container(path)
    ids = sorted({int(k.split("/")[0][4:]) for k in rec})
    return [SVBasis(rec[f"lens{i}/kernels"], rec[f"lens{i}/coeff_maps"], i) for i in ids]
