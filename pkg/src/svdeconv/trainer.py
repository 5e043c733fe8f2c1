"""Joint training of Demixing-Net and Recon-Net, plus the ablation harness."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ndauto as nd
from .codenet import CoDeNet, ModelConfig, composite_loss
from .container import decode_meta, encode_meta, read_container, write_container
from .metrics import highpass, psnr, ssim

logger = logging.getLogger(__name__)

VARIANTS = ("full", "wo_cg", "wo_pe")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 1e-3
    final_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sample_fraction: float = 1.0 / 3.0
    seed: int = 0
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    val_every: int = 1
    checkpoint_every: int = 0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``base_lr`` at step 0 to ``final_lr`` at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[nd.Parameter], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)


def clip_gradients(params: Sequence[nd.Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


# ---------------------------------------------------------------- data handling

@dataclass
class Arrays:
    """Samples stacked for fast batching."""

    inputs: np.ndarray
    coords: np.ndarray
    gt_demix: np.ndarray
    gt_recon: np.ndarray
    origins: List[tuple]
    sources: List[int]
    names: List[str]

    def __len__(self) -> int:
        return len(self.inputs)


def load_arrays(dataset, indices: Sequence[int], dtype) -> Arrays:
    samples = [dataset[i] for i in indices]
    files = getattr(dataset, "files", None)
    names = [files[i] if files else f"sample{i}" for i in indices]
    if not samples:
        empty = np.zeros((0,))
        return Arrays(empty, empty, empty, empty, [], [], [])
    return Arrays(
        np.stack([s.input for s in samples]).astype(dtype),
        np.stack([s.coords for s in samples]).astype(np.float64),
        np.stack([s.gt_demix for s in samples]).astype(dtype),
        np.stack([s.gt_recon[None] for s in samples]).astype(dtype),
        [s.origin for s in samples], [s.source for s in samples], names)


def split_by_source(sources: Sequence[int], val_fraction: float, seed: int):
    """Hold out whole source images: returns (train indices, val indices)."""
    ids = sorted(set(sources))
    n_val = 0
    if len(ids) > 1 and val_fraction > 0:
        n_val = max(1, int(round(val_fraction * len(ids))))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    held = set(rng.permutation(ids)[:n_val].tolist())
    train = [i for i, s in enumerate(sources) if s not in held]
    val = [i for i, s in enumerate(sources) if s in held]
    return train, val


def predict(model: CoDeNet, inputs: np.ndarray, coords: np.ndarray, batch: int = 8,
            cache=None, origins=None):
    """Forward pass without a tape; returns (demixed, recon) numpy arrays."""
    dem, rec = [], []
    for lo in range(0, len(inputs), batch):
        sl = slice(lo, lo + batch)
        o = None if origins is None else origins[sl]
        d, r = model(inputs[sl], coords[sl], cache=cache, origins=o)
        dem.append(d.data)
        rec.append(r.data)
    return np.concatenate(dem), np.concatenate(rec)


def evaluate(model: CoDeNet, data: Arrays, batch: int = 8) -> Dict[str, float]:
    """Held-out metrics for both stages. PSNR uses the pooled MSE over all patches."""
    if len(data) == 0:
        return {}
    dem, rec = predict(model, data.inputs, data.coords, batch)
    gd, gr = data.gt_demix.astype(np.float64), data.gt_recon.astype(np.float64)
    dem, rec = dem.astype(np.float64), rec.astype(np.float64)
    return {
        "demix_psnr": psnr(dem, gd),
        "demix_ssim": ssim(dem, gd),
        "recon_psnr": psnr(rec, gr),
        "recon_ssim": ssim(rec, gr),
        "recon_mse": float(np.mean((rec - gr) ** 2)),
        "recon_hp_mse": float(np.mean((highpass(rec) - highpass(gr)) ** 2)),
    }


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: CoDeNet, state: AdamState, epoch: int, rng: np.random.Generator,
                    cfg: TrainConfig, extra: Optional[dict] = None) -> None:
    records = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k in sorted(state.m):
        records[f"adam_m/{k}"] = state.m[k]
        records[f"adam_v/{k}"] = state.v[k]
    meta = {
        "epoch": epoch,
        "adam_t": state.t,
        "rng_state": rng.bit_generator.state,
        "model": model.cfg.to_dict(),
        "train": asdict(cfg),
        "fingerprint": model.fingerprint(),
    }
    if extra:
        meta.update(extra)
    records["meta"] = encode_meta(meta)
    write_container(path, records)


@dataclass
class Checkpoint:
    model: CoDeNet
    state: AdamState
    epoch: int
    rng_state: dict
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    rec = read_container(path)
    if "meta" not in rec:
        raise ValueError(f"{path}: not a checkpoint (no meta record)")
    meta = decode_meta(rec["meta"])
    model = CoDeNet(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict({k[6:]: v for k, v in rec.items() if k.startswith("param/")})
    state = AdamState(t=meta["adam_t"])
    for k, v in rec.items():
        if k.startswith("adam_m/"):
            state.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            state.v[k[7:]] = v
    return Checkpoint(model, state, meta["epoch"], meta["rng_state"], meta)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: CoDeNet
    history: List[dict]
    checkpoints: List[Path]
    state: AdamState
    steps: int


def steps_per_epoch(n_train: int, cfg: TrainConfig) -> int:
    n = math.ceil(cfg.sample_fraction * n_train)
    return math.ceil(n / cfg.batch_size)


def epoch_sample(n: int, fraction: float, epoch: int, seed: int) -> np.ndarray:
    """Indices drawn in ``epoch``: ceil(fraction * n) distinct patches.

    Epochs are grouped in cycles of ceil(1 / fraction); each cycle walks
    through one seeded permutation, so a cycle visits every patch. The
    final chunk of a cycle is taken flush with the end of the permutation.
    """
    size = math.ceil(fraction * n)
    per_cycle = math.ceil(n / size)
    cycle, pos = divmod(epoch, per_cycle)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 15485863, cycle])).permutation(n)
    lo = min(pos * size, n - size)
    return perm[lo:lo + size]


def train(dataset, model_cfg: ModelConfig, cfg: TrainConfig, out_dir=None, resume=None,
          stop_after: Optional[int] = None, log_path=None,
          on_epoch: Optional[Callable[[dict], None]] = None, extra_meta: Optional[dict] = None) -> TrainResult:
    """Train on ``dataset`` (PatchDataset or MemoryDataset).

    ``resume`` is a checkpoint path; ``stop_after`` ends the run after that
    many total epochs while keeping the schedule of ``cfg.epochs``.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    train_idx, val_idx = split_by_source(dataset.sources, cfg.val_fraction, cfg.seed)
    if resume is not None:
        ck = load_checkpoint(resume)
        model, state, start_epoch = ck.model, ck.state, ck.epoch
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
    else:
        model = CoDeNet(model_cfg)
        state = AdamState()
        start_epoch = 0
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 15485863]))
    dtype = model.dtype
    tr = load_arrays(dataset, train_idx, dtype)
    va = load_arrays(dataset, val_idx, dtype)
    params = model.trainable()
    per_epoch = steps_per_epoch(len(tr), cfg)
    total = max(1, cfg.epochs * per_epoch)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    history, ckpts = [], []
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    for epoch in range(start_epoch, last):
        chosen = epoch_sample(len(tr), cfg.sample_fraction, epoch, cfg.seed)
        losses = []
        for b in range(per_epoch):
            idx = np.sort(chosen[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            step = epoch * per_epoch + b
            lr = lr_at(step, total, cfg)
            for p in params:
                p.zero_grad()
            with nd.Tape() as tape:
                dem, rec = model(tr.inputs[idx], tr.coords[idx])
                loss = composite_loss(dem, tr.gt_demix[idx], rec, tr.gt_recon[idx], cfg.alpha, cfg.beta)
            value = float(loss.data)
            if not math.isfinite(value):
                prov = ", ".join(f"{tr.names[i]}@{tr.origins[i]} (source {tr.sources[i]})" for i in idx)
                raise TrainingError(f"non-finite loss at epoch {epoch} step {b}: {prov}")
            tape.backward(loss)
            clip_gradients(params, cfg.clip_norm)
            adam_step(params, state, lr, cfg)
            losses.append(value)
        row = {"epoch": epoch + 1, "lr": lr_at(min((epoch + 1) * per_epoch, total), total, cfg),
               "train_loss": float(np.mean(losses))}
        if len(va) and cfg.val_every and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == last):
            m = evaluate(model, va)
            row["val_psnr"], row["val_ssim"] = m["recon_psnr"], m["recon_ssim"]
        history.append(row)
        logger.info("epoch %d loss %.5f", epoch + 1, row["train_loss"])
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(f"{row['epoch']} {row['lr']:.6e} {row['train_loss']:.6f} "
                         f"{row.get('val_psnr', float('nan')):.4f} {row.get('val_ssim', float('nan')):.5f}\n")
        if on_epoch is not None:
            on_epoch(row)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            path = out_dir / f"ckpt_epoch{epoch + 1:04d}.svc"
            save_checkpoint(path, model, state, epoch + 1, rng, cfg, extra_meta)
            ckpts.append(path)
    if out_dir is not None:
        path = out_dir / "final.svc"
        save_checkpoint(path, model, state, last, rng, cfg, extra_meta)
        ckpts.append(path)
    return TrainResult(model, history, ckpts, state, state.t)


# ---------------------------------------------------------------- ablation

def run_ablation(dataset, model_cfg: ModelConfig, cfg: TrainConfig, variants: Sequence[str] = VARIANTS,
                 out_dir=None, extra_meta: Optional[dict] = None) -> List[dict]:
    """Train each variant with the same seed and report held-out metrics per stage."""
    _, val_idx = split_by_source(dataset.sources, cfg.val_fraction, cfg.seed)
    rows = []
    for name in variants:
        vcfg = model_cfg.variant(name)
        sub = Path(out_dir) / name if out_dir is not None else None
        res = train(dataset, vcfg, cfg, out_dir=sub, extra_meta=extra_meta)
        va = load_arrays(dataset, val_idx, res.model.dtype)
        m = evaluate(res.model, va)
        m["variant"] = name
        m["final_train_loss"] = res.history[-1]["train_loss"] if res.history else float("nan")
        rows.append(m)
        logger.info("variant %s: %s", name, m)
    return rows


def format_report(rows: Sequence[dict]) -> str:
    cols = ["variant", "demix_psnr", "demix_ssim", "recon_psnr", "recon_ssim", "recon_hp_mse"]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join([r["variant"]] + [f"{r[c]:.6g}" for c in cols[1:]]))
    return "\n".join(lines) + "\n"
