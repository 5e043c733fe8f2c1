"""Demixing-Net, Recon-Net and the joint model."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import ndauto as nd
from ..ndauto import DTYPES, Parameter, Tensor
from .encoding import PEConfig, positional_encoding, raw_encoding
from .layers import CoDeBlock, GatedConv, MaskMLP, Module, const_param, uniform_param

NUM_VIEWS = 9


@dataclass(frozen=True)
class ModelConfig:
    lens_width: int = 4
    unet_width: int = 16
    unet_depth: int = 3
    mlp_hidden: int = 32
    mlp_layers: int = 2
    attn_hidden: int = 16
    pe: PEConfig = field(default_factory=PEConfig)
    use_cg: bool = True
    use_pe: bool = True
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        if self.unet_depth < 1:
            raise ValueError("unet_depth must be >= 1")
        if self.lens_width % 2 or self.unet_width % 2:
            raise ValueError("block widths must be even")
        if self.precision not in DTYPES:
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def mask_in_dim(self) -> int:
        return self.pe.dim if self.use_pe else 2

    @property
    def patch_multiple(self) -> int:
        return 2 ** (self.unet_depth - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["pe"] = PEConfig(**d.get("pe", {}))
        return cls(**d)

    def variant(self, name: str) -> "ModelConfig":
        """Ablation variants: 'full', 'wo_cg', 'wo_pe'."""
        if name == "full":
            return replace(self, use_cg=True, use_pe=True)
        if name == "wo_cg":
            return replace(self, use_cg=False, use_pe=True)
        if name == "wo_pe":
            return replace(self, use_cg=True, use_pe=False)
        raise ValueError(f"unknown variant {name!r}")


class MaskSource:
    """Hands each gated convolution its mask for the current batch.

    Masks come from the MaskMLPs (evaluated on the positional encoding of the
    batch's global coordinates) or, when a cache is attached, from the cache
    keyed by (block, patch origin, scale).
    """

    def __init__(self, model: "CoDeNet", coords: Optional[np.ndarray], cache=None,
                 origins: Optional[Sequence[Tuple[int, int]]] = None):
        self.model = model
        self.coords = coords
        self.cache = cache
        self.origins = origins
        self._enc: Dict[int, Tensor] = {}
        if cache is not None and origins is None:
            raise ValueError("cached masks need patch origins")

    def encoding(self, scale: int) -> Tensor:
        if scale not in self._enc:
            step = 2 ** scale
            c = self.coords[..., ::step, ::step]
            self._enc[scale] = Tensor(self.model.encode(c), dtype=self.model.dtype)
        return self._enc[scale]

    def mask(self, gconv: GatedConv) -> Optional[Tensor]:
        if not gconv.use_cg:
            return None
        if self.cache is not None:
            arr = np.stack([self.cache.lookup(gconv.name, o, gconv.scale) for o in self.origins])
            return Tensor(arr)
        return gconv.mlp(self.encoding(gconv.scale))


class LensStage(Module):
    """One lens-specific gated lift + CoDe block per view; outputs are concatenated."""

    def __init__(self, name: str, width: int, mcfg):
        self.lifts = [GatedConv(f"{name}.lens{i}.lift", 1, width, 3, 0, mcfg) for i in range(NUM_VIEWS)]
        self.blocks = [CoDeBlock(f"{name}.lens{i}.block", width, 0, mcfg) for i in range(NUM_VIEWS)]

    def __call__(self, x, masks) -> Tensor:
        views = nd.split_channels(x, NUM_VIEWS)
        outs = [blk(lift(v, masks), masks) for v, lift, blk in zip(views, self.lifts, self.blocks)]
        return nd.concat_channels(outs)


class ViewAttention(Module):
    """Pool each view's channel group, 2-layer MLP, 2*sigmoid scaling per view.

    The output layer starts at zero so every view weight is exactly 1 at init.
    """

    def __init__(self, name: str, group: int, hidden: int, seed: int):
        self.group = group
        self.fc1_w = uniform_param(f"{name}.fc1.weight", (hidden, NUM_VIEWS, 1, 1), NUM_VIEWS, seed)
        self.fc1_b = uniform_param(f"{name}.fc1.bias", (hidden,), NUM_VIEWS, seed)
        self.fc2_w = const_param(f"{name}.fc2.weight", (NUM_VIEWS, hidden, 1, 1), 0.0)
        self.fc2_b = const_param(f"{name}.fc2.bias", (NUM_VIEWS,), 0.0)
        c = group * NUM_VIEWS
        pool = np.zeros((NUM_VIEWS, c, 1, 1))
        expand = np.zeros((c, NUM_VIEWS, 1, 1))
        for v in range(NUM_VIEWS):
            pool[v, v * group:(v + 1) * group] = 1.0 / group
            expand[v * group:(v + 1) * group, v] = 1.0
        self._pool = pool
        self._expand = expand

    def weights(self, x) -> Tensor:
        """Per-view weights, N x 9 x 1 x 1."""
        dt = self.fc1_w.dtype
        pooled = nd.conv2d_same(nd.global_avg_pool(x), Tensor(self._pool, dtype=dt))
        h = nd.gelu(nd.conv2d_same(pooled, self.fc1_w, self.fc1_b))
        return 2.0 * nd.sigmoid(nd.conv2d_same(h, self.fc2_w, self.fc2_b))

    def __call__(self, x) -> Tensor:
        dt = self.fc1_w.dtype
        scale = nd.conv2d_same(self.weights(x), Tensor(self._expand, dtype=dt))
        return x * scale


class UNet(Module):
    """Encoder-decoder of shared CoDe blocks.

    Down: 2x average pool + gated 1x1. Up: nearest 2x + gated 1x1, skip by
    concatenation, gated 1x1 fuse. One block per scale per side.
    """

    def __init__(self, name: str, cin: int, cout: int, width: int, depth: int, mcfg):
        self.depth = depth
        w = [width * 2 ** i for i in range(depth)]
        self.intro = GatedConv(f"{name}.intro", cin, w[0], 3, 0, mcfg)
        self.enc = [CoDeBlock(f"{name}.enc{i}", w[i], i, mcfg) for i in range(depth - 1)]
        self.down = [GatedConv(f"{name}.down{i}", w[i], w[i + 1], 1, i + 1, mcfg) for i in range(depth - 1)]
        self.mid = CoDeBlock(f"{name}.mid", w[-1], depth - 1, mcfg)
        self.up = [GatedConv(f"{name}.up{i}", w[i + 1], w[i], 1, i, mcfg) for i in range(depth - 1)]
        self.fuse = [GatedConv(f"{name}.fuse{i}", 2 * w[i], w[i], 1, i, mcfg) for i in range(depth - 1)]
        self.dec = [CoDeBlock(f"{name}.dec{i}", w[i], i, mcfg) for i in range(depth - 1)]
        self.outro = GatedConv(f"{name}.outro", w[0], cout, 3, 0, mcfg)

    def __call__(self, x, masks) -> Tensor:
        h = self.intro(x, masks)
        skips = []
        for i in range(self.depth - 1):
            h = self.enc[i](h, masks)
            skips.append(h)
            h = self.down[i](nd.avg_pool2(h), masks)
        h = self.mid(h, masks)
        for i in reversed(range(self.depth - 1)):
            h = self.up[i](nd.upsample2(h), masks)
            h = self.fuse[i](nd.concat_channels([h, skips[i]]), masks)
            h = self.dec[i](h, masks)
        return self.outro(h, masks)


def _check_views(x: Tensor, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != NUM_VIEWS:
        raise ValueError(f"{what} expects N x {NUM_VIEWS} x P x P input, got {x.shape}")


class DemixNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.lens = LensStage("demix.lens", cfg.lens_width, cfg)
        self.unet = UNet("demix.unet", NUM_VIEWS * cfg.lens_width, NUM_VIEWS,
                         cfg.unet_width, cfg.unet_depth, cfg)

    def __call__(self, x, masks) -> Tensor:
        _check_views(x, "Demixing-Net")
        return x + self.unet(self.lens(x, masks), masks)


class ReconNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.lens = LensStage("recon.lens", cfg.lens_width, cfg)
        self.attn = ViewAttention("recon.attn", cfg.lens_width, cfg.attn_hidden, cfg.seed)
        self.unet = UNet("recon.unet", NUM_VIEWS * cfg.lens_width, 1,
                         cfg.unet_width, cfg.unet_depth, cfg)

    def __call__(self, x, masks) -> Tensor:
        _check_views(x, "Recon-Net")
        return self.unet(self.attn(self.lens(x, masks)), masks)


class CoDeNet(Module):
    """Demixing-Net followed by Recon-Net, trained jointly."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.demix = DemixNet(cfg)
        self.recon = ReconNet(cfg)
        self.set_precision(cfg.precision)

    @property
    def dtype(self):
        return DTYPES[self.cfg.precision]

    def set_precision(self, precision: str) -> None:
        dt = DTYPES[precision]
        for p in self.parameters():
            p.data = p.data.astype(dt)
            p.grad = np.zeros_like(p.data)
        self.cfg = replace(self.cfg, precision=precision)

    def gated_convs(self) -> List[GatedConv]:
        return [m for m in self.modules() if isinstance(m, GatedConv)]

    def mask_mlps(self) -> List[MaskMLP]:
        return [g.mlp for g in self.gated_convs()]

    def trainable(self) -> List[Parameter]:
        """Everything except the MaskMLPs when gating is switched off."""
        if self.cfg.use_cg:
            return self.parameters()
        frozen = {id(p) for m in self.mask_mlps() for p in m.parameters()}
        return [p for p in self.parameters() if id(p) not in frozen]

    def encode(self, coords: np.ndarray) -> np.ndarray:
        return positional_encoding(coords, self.cfg.pe) if self.cfg.use_pe else raw_encoding(coords)

    def mask_source(self, coords, cache=None, origins=None) -> MaskSource:
        return MaskSource(self, coords, cache, origins)

    def _prep(self, x, coords):
        x = nd.as_tensor(x)
        coords = np.asarray(coords)
        if x.ndim == 3:
            x = nd.reshape(x, (1,) + x.shape)
            coords = coords[None]
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        p = x.shape[-1]
        if p % self.cfg.patch_multiple or x.shape[-2] % self.cfg.patch_multiple:
            raise ValueError(f"patch size {x.shape[-2:]} not divisible by {self.cfg.patch_multiple}")
        return x, coords

    def __call__(self, x, coords, cache=None, origins=None) -> Tuple[Tensor, Tensor]:
        x, coords = self._prep(x, coords)
        masks = self.mask_source(coords, cache, origins)
        demixed = self.demix(x, masks)
        return demixed, self.recon(demixed, masks)

    def demix_forward(self, x, coords, cache=None, origins=None) -> Tensor:
        x, coords = self._prep(x, coords)
        return self.demix(x, self.mask_source(coords, cache, origins))

    def recon_forward(self, demixed, coords, cache=None, origins=None) -> Tensor:
        x, coords = self._prep(demixed, coords)
        return self.recon(x, self.mask_source(coords, cache, origins))

    # ------------------------------------------------------------ persistence

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype)
            p.grad = np.zeros_like(p.data)

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()[:16]

    def mask_fingerprint(self) -> str:
        """Hash of everything the masks depend on (encoding config and MaskMLP weights)."""
        d = self.cfg.to_dict()
        h = hashlib.sha256(json.dumps({"pe": d["pe"], "use_pe": d["use_pe"], "use_cg": d["use_cg"],
                                       "precision": d["precision"]}, sort_keys=True).encode())
        for m in self.mask_mlps():
            for p in m.parameters():
                h.update(p.name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()[:16]


def demix_forward(x, coords, model: CoDeNet) -> Tensor:
    return model.demix_forward(x, coords)


def recon_forward(demixed, coords, model: CoDeNet) -> Tensor:
    return model.recon_forward(demixed, coords)
