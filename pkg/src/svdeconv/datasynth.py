"""Physics-based training data: preprocessing, simulation, noise, sub-views, patches."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .container import encode_meta, read_container, write_container
from .svforward import NUM_LENSES, Geometry, SVBasis, multiplex, sv_forward


def preprocess_gt(img: np.ndarray, percentile: float = 5.0) -> np.ndarray:
    """Subtract the background percentile, clamp at zero and scale the max to one."""
    img = np.asarray(img, dtype=float)
    out = np.clip(img - np.percentile(img, percentile), 0.0, None)
    peak = out.max() if out.size else 0.0
    if peak > 0:
        out = out / peak
    return out


@dataclass(frozen=True)
class NoiseModel:
    """Mixed Poisson-Gaussian sensor noise. ``gain`` is photons per count."""

    gain: float = 1000.0
    read_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.read_sigma < 0:
            raise ValueError("read_sigma must be nonnegative")


def add_noise(y: np.ndarray, model: NoiseModel, seed: Optional[int] = None) -> np.ndarray:
    """``Poisson(y * g) / g + N(0, sigma^2)``; ``seed`` overrides the model seed."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("add_noise needs a nonnegative image")
    rng = np.random.default_rng(model.seed if seed is None else seed)
    out = rng.poisson(y * model.gain) / model.gain
    if model.read_sigma > 0:
        out = out + rng.normal(0.0, model.read_sigma, size=y.shape)
    return out


@dataclass
class SubviewStack:
    views: np.ndarray  # 9 x Hv x Wv, lens order 0..8
    geometry: Geometry


def partition_subviews(measurement: np.ndarray, geometry: Geometry) -> SubviewStack:
    """Zero-pad the sensor image to the canvas and cut one window per chief ray."""
    measurement = np.asarray(measurement, dtype=float)
    if measurement.shape != geometry.sensor_size:
        raise ValueError(f"measurement {measurement.shape} does not match sensor {geometry.sensor_size}")
    hp, wp = geometry.pad_size
    hv, wv = geometry.subview_size
    canvas = np.zeros((hp, wp))
    sr, sc = geometry.sensor_origin
    canvas[sr:sr + measurement.shape[0], sc:sc + measurement.shape[1]] = measurement
    views = np.zeros((NUM_LENSES, hv, wv))
    for lens in range(NUM_LENSES):
        r0, c0 = geometry.window_origin(lens)
        a0, b0 = max(r0, 0), max(c0, 0)
        a1, b1 = min(r0 + hv, hp), min(c0 + wv, wp)
        if a0 < a1 and b0 < b1:
            views[lens, a0 - r0:a1 - r0, b0 - c0:b1 - c0] = canvas[a0:a1, b0:b1]
    return SubviewStack(views, geometry)


def patch_starts(length: int, patch: int, stride: int) -> List[int]:
    """Origins 0, S, 2S, ... plus a flush final patch when the stride does not land on the edge."""
    if patch > length:
        raise ValueError(f"patch size {patch} exceeds extent {length}")
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def patch_origins(geometry: Geometry) -> List[Tuple[int, int]]:
    hv, wv = geometry.subview_size
    p, s = geometry.patch_size, geometry.stride
    return [(r, c) for r in patch_starts(hv, p, s) for c in patch_starts(wv, p, s)]


def patch_coords(origin: Tuple[int, int], patch: int, subview_size: Tuple[int, int]) -> np.ndarray:
    """Global normalised coordinates of a patch: channel 0 is u (column), 1 is v (row)."""
    hv, wv = subview_size
    r0, c0 = origin
    rows = 2.0 * (r0 + np.arange(patch)) / (hv - 1) - 1.0
    cols = 2.0 * (c0 + np.arange(patch)) / (wv - 1) - 1.0
    u = np.broadcast_to(cols[None, :], (patch, patch))
    v = np.broadcast_to(rows[:, None], (patch, patch))
    return np.stack([u, v])


def full_coords(subview_size: Tuple[int, int]) -> np.ndarray:
    hv, wv = subview_size
    v = np.broadcast_to(np.linspace(-1.0, 1.0, hv)[:, None], (hv, wv))
    u = np.broadcast_to(np.linspace(-1.0, 1.0, wv)[None, :], (hv, wv))
    return np.stack([u, v])


def tile_patches(stack: SubviewStack, geometry: Geometry):
    """List of (9 x P x P input, 2 x P x P coords, origin) over the sub-view frame."""
    p = geometry.patch_size
    out = []
    for r, c in patch_origins(geometry):
        out.append((stack.views[:, r:r + p, c:c + p].copy(),
                    patch_coords((r, c), p, geometry.subview_size), (r, c)))
    return out


# ---------------------------------------------------------------- phantoms

def particle_phantom(shape, rng: np.random.Generator, density: float = 3e-3,
                     radius: Tuple[float, float] = (1.0, 3.0),
                     intensity: Tuple[float, float] = (0.3, 1.0)) -> np.ndarray:
    """Random fluorescent disks; ``density`` is particles per pixel."""
    h, w = shape
    img = np.zeros((h, w))
    n = rng.poisson(density * h * w) if density > 0 else 0
    rr, cc = np.mgrid[0:h, 0:w]
    for _ in range(n):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(*radius)
        amp = rng.uniform(*intensity)
        lo_r, hi_r = int(max(r0 - rad - 1, 0)), int(min(r0 + rad + 2, h))
        lo_c, hi_c = int(max(c0 - rad - 1, 0)), int(min(c0 + rad + 2, w))
        sub_r, sub_c = rr[lo_r:hi_r, lo_c:hi_c], cc[lo_r:hi_r, lo_c:hi_c]
        d = np.hypot(sub_r + 0.5 - r0, sub_c + 0.5 - c0)
        # soft edge over ~1 px keeps the disks band-limited
        img[lo_r:hi_r, lo_c:hi_c] += amp * np.clip(rad + 0.5 - d, 0.0, 1.0)
    return img


def cell_phantom(shape, rng: np.random.Generator, n_cells: int = 40) -> np.ndarray:
    """Cell-cluster stand-in: elliptical bodies with bright rims, nuclei and fine texture."""
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros((h, w))
    for _ in range(n_cells):
        r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
        a, b = rng.uniform(4, 12), rng.uniform(3, 9)
        th = rng.uniform(0, np.pi)
        dr, dc = rr - r0, cc - c0
        x1 = dr * np.cos(th) + dc * np.sin(th)
        x2 = -dr * np.sin(th) + dc * np.cos(th)
        q = (x1 / a) ** 2 + (x2 / b) ** 2
        body = np.exp(-q ** 2) * rng.uniform(0.2, 0.5)
        rim = np.exp(-((np.sqrt(q) - 1.0) / 0.12) ** 2) * rng.uniform(0.3, 0.8)
        nuc = np.exp(-q / 0.08) * rng.uniform(0.3, 1.0)
        img += body + rim + nuc
    texture = rng.random((h, w)) < 0.01
    img += 0.5 * texture * rng.random((h, w))
    return img


def make_sources(count: int, shape, seed: int = 0) -> List[np.ndarray]:
    """Alternating cell-like and particle phantoms, deterministic in ``seed``."""
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        if i % 2 == 0:
            out.append(cell_phantom(shape, rng))
        else:
            out.append(particle_phantom(shape, rng, density=rng.uniform(1e-3, 6e-3)))
    return out


# ---------------------------------------------------------------- simulation and storage

@dataclass
class PatchSample:
    input: np.ndarray      # 9 x P x P
    coords: np.ndarray     # 2 x P x P
    gt_demix: np.ndarray   # 9 x P x P
    gt_recon: np.ndarray   # P x P
    origin: Tuple[int, int]
    source: int = 0

    def to_records(self, dtype=np.float32) -> dict:
        return {
            "input": self.input.astype(dtype),
            "coords": self.coords.astype(np.float64),
            "gt_demix": self.gt_demix.astype(dtype),
            "gt_recon": self.gt_recon.astype(dtype),
            "origin": np.asarray(self.origin, dtype=np.int64),
            "source": np.asarray([self.source], dtype=np.int64),
        }

    @classmethod
    def from_records(cls, rec: dict) -> "PatchSample":
        return cls(rec["input"], rec["coords"], rec["gt_demix"], rec["gt_recon"],
                   tuple(int(v) for v in rec["origin"]), int(rec["source"][0]))


@dataclass
class Simulation:
    obj: np.ndarray           # Hv x Wv preprocessed object
    measurement: np.ndarray   # noisy sensor image
    views: np.ndarray         # 9 x Hv x Wv noisy multiplexed sub-views
    demix_views: np.ndarray   # 9 x Hv x Wv crosstalk-free targets


def simulate(obj: np.ndarray, geometry: Geometry, bases: Sequence[SVBasis],
             noise: Optional[NoiseModel], seed: Optional[int] = None) -> Simulation:
    """Forward-simulate one preprocessed object through all nine lenses."""
    # FFT round-off leaves ~1e-17 negatives; the physical image is nonnegative
    lens_images = [np.clip(sv_forward(obj, b), 0.0, None) for b in bases]
    clean = multiplex(lens_images, geometry)
    meas = add_noise(clean, noise, seed) if noise is not None else clean
    views = partition_subviews(meas, geometry).views
    zero = np.zeros_like(lens_images[0])
    demix = np.empty_like(views)
    for lens in range(NUM_LENSES):
        only = [lens_images[i] if i == lens else zero for i in range(NUM_LENSES)]
        demix[lens] = partition_subviews(multiplex(only, geometry), geometry).views[lens]
    return Simulation(obj, meas, views, demix)


def _fit_to(img: np.ndarray, shape) -> np.ndarray:
    """Centre-crop or zero-pad to ``shape``."""
    out = np.zeros(shape)
    h, w = img.shape
    H, W = shape
    sh, sw = min(h, H), min(w, W)
    ih, iw = (h - sh) // 2, (w - sw) // 2
    oh, ow = (H - sh) // 2, (W - sw) // 2
    out[oh:oh + sh, ow:ow + sw] = img[ih:ih + sh, iw:iw + sw]
    return out


INDEX_NAME = "index.txt"


def build_dataset(gt_images: Iterable[np.ndarray], geometry: Geometry, bases: Sequence[SVBasis],
                  noise: NoiseModel, out, phantoms: int = 0, phantom_density: float = 3e-3,
                  dtype=np.float32, keep_measurements: bool = False) -> "PatchDataset":
    """Simulate, tile and write every source image (plus ``phantoms`` particle phantoms).

    With ``keep_measurements`` each full noisy measurement and its object are
    also written to ``measurements/source_NNNN.svc``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sources = [np.asarray(g, dtype=float) for g in gt_images]
    for i in range(phantoms):
        rng = np.random.default_rng(np.random.SeedSequence([noise.seed, 7919, i]))
        sources.append(particle_phantom(geometry.subview_size, rng, density=phantom_density))
    lines = ["# file origin_row origin_col source_id"]
    count = 0
    for src_id, img in enumerate(sources):
        obj = preprocess_gt(_fit_to(img, geometry.subview_size))
        seed = int(np.random.SeedSequence([noise.seed, src_id]).generate_state(1)[0])
        sim = simulate(obj, geometry, bases, noise, seed)
        if keep_measurements:
            (out / "measurements").mkdir(exist_ok=True)
            write_container(out / "measurements" / f"source_{src_id:04d}.svc", {
                "measurement": sim.measurement, "object": obj,
                "meta": encode_meta({"geometry": geometry.to_dict(), "geometry_fp": geometry.fingerprint(),
                                     "source": src_id})})
        p = geometry.patch_size
        for r, c in patch_origins(geometry):
            sample = PatchSample(
                sim.views[:, r:r + p, c:c + p],
                patch_coords((r, c), p, geometry.subview_size),
                sim.demix_views[:, r:r + p, c:c + p],
                obj[r:r + p, c:c + p],
                (r, c), src_id)
            name = f"patch_{count:06d}.svc"
            write_container(out / name, sample.to_records(dtype))
            lines.append(f"{name} {r} {c} {src_id}")
            count += 1
    (out / INDEX_NAME).write_text("\n".join(lines) + "\n")
    return PatchDataset(out)


class PatchDataset:
    """Read-only view of a dataset directory written by :func:`build_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        index = self.root / INDEX_NAME
        try:
            text = index.read_text()
        except OSError as exc:
            raise OSError(f"reading dataset index {index}: {exc}") from exc
        self.files: List[str] = []
        self.origins: List[Tuple[int, int]] = []
        self.sources: List[int] = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"{index}:{lineno}: expected 4 fields, got {len(parts)}")
            self.files.append(parts[0])
            self.origins.append((int(parts[1]), int(parts[2])))
            self.sources.append(int(parts[3]))

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, i: int) -> PatchSample:
        return PatchSample.from_records(read_container(self.root / self.files[i]))

    def source_ids(self) -> List[int]:
        return sorted(set(self.sources))


class MemoryDataset:
    """In-memory list of PatchSamples with the PatchDataset interface."""

    def __init__(self, samples: Sequence[PatchSample]):
        self.samples = list(samples)
        self.sources = [s.source for s in self.samples]
        self.origins = [s.origin for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> PatchSample:
        return self.samples[i]

    def source_ids(self) -> List[int]:
        return sorted(set(self.sources))


def tiling_count(geometry: Geometry) -> int:
    return len(patch_origins(geometry))


def expected_total_patches(n_images: int, geometry: Geometry) -> int:
    return n_images * tiling_count(geometry)
