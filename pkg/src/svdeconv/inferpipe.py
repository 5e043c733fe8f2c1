"""Patchwise inference with precomputed coordinate masks and central-crop stitching."""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .codenet import CoDeNet
from .container import decode_meta, encode_meta, read_container, write_container
from .datasynth import partition_subviews, patch_coords, patch_origins, patch_starts
from .svforward import Geometry

FrameKey = Tuple[str, int, Tuple[int, int]]  # (gated conv, scale, phase)


class CacheMismatch(ValueError):
    pass


def _frame_coords(geometry: Geometry, scale: int, phase: Tuple[int, int]) -> np.ndarray:
    """Global coordinates on the strided grid rows phase_r + s*i, cols phase_c + s*j."""
    s = 2 ** scale
    hv, wv = geometry.subview_size
    rows = np.arange(phase[0], hv, s)
    cols = np.arange(phase[1], wv, s)
    v = 2.0 * rows / (hv - 1) - 1.0
    u = 2.0 * cols / (wv - 1) - 1.0
    return np.stack([np.broadcast_to(u[None, :], (rows.size, cols.size)),
                     np.broadcast_to(v[:, None], (rows.size, cols.size))])


class MaskCache:
    """Masks for every (gated conv, patch origin, scale).

    Masks are pointwise in the global coordinates, so each one is stored once
    as a frame over the strided global grid of its scale; a lookup returns
    the patch window of that frame (a view, no MLP evaluation).
    """

    def __init__(self, frames: Dict[FrameKey, np.ndarray], keys: List[Tuple[str, Tuple[int, int], int]],
                 patch_size: int, geometry_fp: str, model_fp: str):
        self.frames = frames
        self.keys = keys
        self.patch_size = patch_size
        self.geometry_fp = geometry_fp
        self.model_fp = model_fp
        self.hits = 0

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, block: str, origin: Tuple[int, int], scale: int) -> np.ndarray:
        s = 2 ** scale
        r0, c0 = origin
        phase = (r0 % s, c0 % s)
        try:
            frame = self.frames[(block, scale, phase)]
        except KeyError:
            raise KeyError(f"no cached mask for block {block!r} at origin {origin}, scale {scale}") from None
        n = self.patch_size // s
        i0, j0 = (r0 - phase[0]) // s, (c0 - phase[1]) // s
        self.hits += 1
        return frame[:, i0:i0 + n, j0:j0 + n]

    def check(self, model: CoDeNet, geometry: Geometry) -> None:
        if self.geometry_fp != geometry.fingerprint():
            raise CacheMismatch(f"mask cache geometry {self.geometry_fp} != active geometry {geometry.fingerprint()}")
        if self.model_fp != model.mask_fingerprint():
            raise CacheMismatch(f"mask cache model {self.model_fp} != active model {model.mask_fingerprint()}")

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.frames, key=repr):
            h.update(repr(key).encode())
            h.update(np.ascontiguousarray(self.frames[key]).tobytes())
        return h.hexdigest()[:16]

    def save(self, path) -> None:
        records = {}
        index = []
        for i, (key, frame) in enumerate(self.frames.items()):
            name = f"frame{i:05d}"
            records[name] = frame
            index.append([name, key[0], key[1], list(key[2])])
        records["meta"] = encode_meta({
            "index": index,
            "keys": [[b, list(o), s] for b, o, s in self.keys],
            "patch_size": self.patch_size,
            "geometry_fp": self.geometry_fp,
            "model_fp": self.model_fp,
            "content": self.content_hash(),
        })
        write_container(path, records)

    @classmethod
    def load(cls, path) -> "MaskCache":
        rec = read_container(path)
        meta = decode_meta(rec["meta"])
        frames = {(block, scale, tuple(phase)): rec[name] for name, block, scale, phase in meta["index"]}
        keys = [(b, tuple(o), s) for b, o, s in meta["keys"]]
        cache = cls(frames, keys, meta["patch_size"], meta["geometry_fp"], meta["model_fp"])
        if cache.content_hash() != meta["content"]:
            raise CacheMismatch(f"{path}: stored masks do not match the recorded content hash")
        return cache


def precompute_masks(model: CoDeNet, geometry: Geometry, path=None) -> MaskCache:
    """Evaluate every MaskMLP once per (scale, phase) over the global grid.

    With ``path`` the cache is also written to disk; an existing file with the
    same fingerprints but different content is refused.
    """
    p = geometry.patch_size
    if p % model.cfg.patch_multiple:
        raise ValueError(f"patch size {p} not divisible by {model.cfg.patch_multiple}")
    origins = patch_origins(geometry)
    convs = [g for g in model.gated_convs() if g.use_cg]
    frames: Dict[FrameKey, np.ndarray] = {}
    enc_cache: Dict[Tuple[int, Tuple[int, int]], np.ndarray] = {}
    keys = []
    for g in convs:
        s = 2 ** g.scale
        for o in origins:
            keys.append((g.name, o, g.scale))
        for phase in sorted({(r % s, c % s) for r, c in origins}):
            ek = (g.scale, phase)
            if ek not in enc_cache:
                enc_cache[ek] = model.encode(_frame_coords(geometry, g.scale, phase))[None].astype(model.dtype)
            frames[(g.name, g.scale, phase)] = g.mlp(enc_cache[ek]).data[0]
    cache = MaskCache(frames, keys, p, geometry.fingerprint(), model.mask_fingerprint())
    if path is not None:
        path = Path(path)
        if path.exists():
            try:
                old = MaskCache.load(path)
            except Exception:
                old = None
            if (old is not None and old.geometry_fp == cache.geometry_fp and old.model_fp == cache.model_fp
                    and old.content_hash() != cache.content_hash()):
                raise CacheMismatch(f"{path}: fingerprint collision with different mask content")
        cache.save(path)
    return cache


# ---------------------------------------------------------------- stitching

def _owned_intervals(length: int, patch: int, stride: int) -> List[Tuple[int, int]]:
    starts = patch_starts(length, patch, stride)
    margin = (patch - stride) // 2
    out = []
    for i, s in enumerate(starts):
        lo = 0 if i == 0 else s + margin
        hi = length if i == len(starts) - 1 else s + margin + stride
        out.append((lo, hi))
    return out


def ownership_map(geometry: Geometry) -> np.ndarray:
    """Index (into ``patch_origins``) of the patch that owns each output pixel."""
    hv, wv = geometry.subview_size
    p, s = geometry.patch_size, geometry.stride
    rows, cols = _owned_intervals(hv, p, s), _owned_intervals(wv, p, s)
    own = np.full((hv, wv), -1, dtype=np.int64)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            own[r0:r1, c0:c1] = i * len(cols) + j
    return own


def stitch(patches: Sequence[Tuple[np.ndarray, Tuple[int, int]]], geometry: Geometry) -> np.ndarray:
    """Central-crop stitching: each patch keeps its central stride x stride region,
    border patches also keep their outer margins, every pixel is written once."""
    hv, wv = geometry.subview_size
    p, s = geometry.patch_size, geometry.stride
    if (p - s) % 2:
        raise ValueError("central-crop stitching needs patch - stride to be even")
    rows = dict(zip(patch_starts(hv, p, s), _owned_intervals(hv, p, s)))
    cols = dict(zip(patch_starts(wv, p, s), _owned_intervals(wv, p, s)))
    out = np.zeros((hv, wv))
    writes = np.zeros((hv, wv), dtype=np.int64)
    for arr, (r, c) in patches:
        if r not in rows or c not in cols:
            raise ValueError(f"patch origin {(r, c)} is not on the tiling grid")
        (r0, r1), (c0, c1) = rows[r], cols[c]
        out[r0:r1, c0:c1] = np.asarray(arr)[r0 - r:r1 - r, c0 - c:c1 - c]
        writes[r0:r1, c0:c1] += 1
    if writes.min() != 1 or writes.max() != 1:
        gaps, doubles = int((writes == 0).sum()), int((writes > 1).sum())
        raise AssertionError(f"stitching ownership violated: {gaps} uncovered, {doubles} multiply written pixels")
    return out


# ---------------------------------------------------------------- full-frame reconstruction

def reconstruct_full(measurement: np.ndarray, model: CoDeNet, geometry: Geometry,
                     cache: Optional[MaskCache] = None, batch: int = 9, threads: int = 1,
                     return_demix: bool = False):
    """Partition, tile, run both networks per patch and stitch the recon patches."""
    if cache is not None:
        cache.check(model, geometry)
    p = geometry.patch_size
    stack = partition_subviews(measurement, geometry)
    origins = patch_origins(geometry)
    inputs = np.stack([stack.views[:, r:r + p, c:c + p] for r, c in origins]).astype(model.dtype)
    coords = np.stack([patch_coords(o, p, geometry.subview_size) for o in origins])

    def run(lo):
        sl = slice(lo, lo + batch)
        d, r = model(inputs[sl], coords[sl], cache=cache,
                     origins=origins[sl] if cache is not None else None)
        return d.data, r.data

    starts = list(range(0, len(origins), batch))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, starts))
    else:
        results = [run(lo) for lo in starts]
    dem = np.concatenate([d for d, _ in results]).astype(np.float64)
    rec = np.concatenate([r for _, r in results]).astype(np.float64)
    recon = stitch([(rec[i, 0], o) for i, o in enumerate(origins)], geometry)
    if not return_demix:
        return recon
    demixed = np.stack([stitch([(dem[i, v], o) for i, o in enumerate(origins)], geometry)
                        for v in range(dem.shape[1])])
    return recon, demixed


def save_preview(path, img: np.ndarray) -> None:
    """8-bit PNG with per-image min-max scaling (non-authoritative)."""
    from PIL import Image
    img = np.asarray(img, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path)
