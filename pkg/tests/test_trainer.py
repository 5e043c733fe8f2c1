import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svdeconv import ndauto as nd
from svdeconv.codenet import CoDeNet
from svdeconv.container import read_container
from svdeconv.datasynth import MemoryDataset, NoiseModel, PatchSample, build_dataset, make_sources
from svdeconv.trainer import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    clip_gradients,
    epoch_sample,
    evaluate,
    format_report,
    load_arrays,
    load_checkpoint,
    lr_at,
    run_ablation,
    split_by_source,
    steps_per_epoch,
    train,
)

from conftest import TOY_GEOMETRY, small_model_cfg
from oracles import adam_reference


@pytest.fixture(scope="module")
def tiny_ds(tmp_path_factory, toy_bases):
    """12 patches from 3 source images (4 each)."""
    root = tmp_path_factory.mktemp("tiny")
    full = build_dataset(make_sources(3, TOY_GEOMETRY.subview_size, seed=4), TOY_GEOMETRY, toy_bases,
                         NoiseModel(seed=1), root, dtype=np.float64)
    picks = [i for s in range(3) for i in [j for j, src in enumerate(full.sources) if src == s][20:24]]
    return MemoryDataset([full[i] for i in picks])


TINY_MODEL = small_model_cfg(unet_depth=2)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, base_lr=1e-3, final_lr=1e-5, sample_fraction=1.0, seed=3,
                val_fraction=0.34, val_every=1)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- schedule

def test_lr_schedule_points():
    cfg = TrainConfig(base_lr=1e-3, final_lr=0.0)
    assert lr_at(0, 100, cfg) == pytest.approx(1e-3, abs=1e-18)
    assert lr_at(100, 100, cfg) == pytest.approx(0.0, abs=1e-18)
    assert lr_at(50, 100, cfg) == pytest.approx(5e-4, abs=1e-15)
    assert lr_at(100, 100, TrainConfig()) == pytest.approx(1e-6)


def test_lr_schedule_monotone_and_errors():
    cfg = TrainConfig()
    vals = [lr_at(s, 40, cfg) for s in range(41)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_at(41, 40, cfg)
    with pytest.raises(ValueError):
        lr_at(0, 0, cfg)


@pytest.mark.parametrize("kw", [dict(sample_fraction=0.0), dict(sample_fraction=1.5), dict(batch_size=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_published_training_defaults():
    cfg = TrainConfig()
    assert cfg.batch_size == 4
    assert cfg.sample_fraction == pytest.approx(1 / 3)
    assert (cfg.alpha, cfg.beta) == (1.0, 1.0)
    assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)


# ---------------------------------------------------------------- Adam

def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = nd.Parameter("p", np.array([1.0, -2.0]))
    st = AdamState(m={"p": np.array([0.5, 0.5])}, v={"p": np.array([0.1, 0.1])}, t=3)
    adam_step([p], st, 1e-2, TrainConfig())
    assert np.allclose(st.m["p"], 0.45) and np.allclose(st.v["p"], 0.0999)
    q = nd.Parameter("q", np.array([3.0]))
    st2 = AdamState()
    adam_step([q], st2, 1e-2, TrainConfig())
    assert q.data[0] == 3.0


def test_adam_first_step_is_lr():
    p = nd.Parameter("p", np.array([0.0]))
    p.grad = np.array([1.0])
    adam_step([p], AdamState(), 1e-3, TrainConfig())
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_matches_reference_sequence():
    grads = [0.3, -1.2, 0.7, 2.0, -0.1]
    p = nd.Parameter("p", np.array([0.5]))
    st = AdamState()
    for g in grads:
        p.grad = np.array([g])
        adam_step([p], st, 1e-2, TrainConfig())
    assert p.data[0] == pytest.approx(adam_reference(0.5, grads, 1e-2), abs=1e-15)


def test_adam_rejects_non_finite_naming_parameter():
    p = nd.Parameter("demix.bad", np.zeros(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingError, match="demix.bad"):
        adam_step([p], AdamState(), 1e-3, TrainConfig())


def test_clip_gradients():
    a, b = nd.Parameter("a", np.zeros(2)), nd.Parameter("b", np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_gradients([a, b], 1.0) == pytest.approx(5.0)
    assert math.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)) == pytest.approx(1.0, rel=1e-9)
    a.grad = np.array([0.1, 0.0])
    b.grad = np.array([0.0])
    clip_gradients([a, b], 1.0)
    assert np.array_equal(a.grad, [0.1, 0.0])


# ---------------------------------------------------------------- splitting and sampling

def test_split_by_source_no_leakage():
    sources = [i // 10 for i in range(200)]
    tr, va = split_by_source(sources, 0.1, seed=0)
    assert sorted(tr + va) == list(range(200))
    held = {sources[i] for i in va}
    assert len(held) == 2 and not held & {sources[i] for i in tr}
    assert split_by_source(sources, 0.1, 0) == (tr, va)
    assert split_by_source([0, 0, 0], 0.1, 0) == ([0, 1, 2], [])


def test_steps_per_epoch_arithmetic():
    assert steps_per_epoch(12, TrainConfig(batch_size=4, sample_fraction=1.0)) == 3
    assert steps_per_epoch(10, TrainConfig(batch_size=4)) == 1


def test_one_epoch_twelve_patches_three_steps(tiny_ds):
    res = train(tiny_ds, TINY_MODEL, tiny_cfg(epochs=1, val_fraction=0.0))
    assert res.steps == 3


def test_epoch_sampling_without_replacement_and_covering():
    n, frac = 300, 1 / 3
    coverage = []
    for seed in range(20):
        seen = set()
        for epoch in range(math.ceil(1 / frac)):
            chosen = epoch_sample(n, frac, epoch, seed)
            assert len(chosen) == 100 and len(set(chosen.tolist())) == 100
            seen.update(chosen.tolist())
        coverage.append(len(seen) / n)
    assert np.mean(coverage) >= 0.95
    assert not np.array_equal(epoch_sample(n, frac, 3, 0), epoch_sample(n, frac, 0, 0))
    assert np.array_equal(epoch_sample(n, frac, 4, 2), epoch_sample(n, frac, 4, 2))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 60), frac=st.floats(0.05, 1.0), seed=st.integers(0, 100))
def test_epoch_sampling_cycle_visits_every_patch(n, frac, seed):
    size = math.ceil(frac * n)
    cycle = math.ceil(n / size)
    seen = set()
    for e in range(cycle):
        chosen = epoch_sample(n, frac, e, seed)
        assert len(chosen) == size == len(set(chosen.tolist()))
        seen.update(chosen.tolist())
    assert seen == set(range(n))


# ---------------------------------------------------------------- training loop

def test_training_reduces_loss():
    rng = np.random.default_rng(0)
    from svdeconv.datasynth import patch_coords
    samples = []
    for i in range(8):
        gt = rng.random((16, 16)) * 0.5
        inp = np.repeat(gt[None], 9, axis=0) * 0.6 + 0.1
        samples.append(PatchSample(inp, patch_coords((0, 8 * (i % 4)), 16, (64, 64)),
                                   np.repeat(gt[None], 9, axis=0), gt, (0, 8 * (i % 4)), i % 2))
    ds = MemoryDataset(samples)
    res = train(ds, TINY_MODEL, TrainConfig(epochs=30, batch_size=4, base_lr=3e-3, sample_fraction=1.0,
                                            val_fraction=0.0, seed=0))
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]


def test_log_and_checkpoint_contents(tiny_ds, tmp_path):
    log = tmp_path / "train.log"
    res = train(tiny_ds, TINY_MODEL, tiny_cfg(epochs=2, checkpoint_every=1), out_dir=tmp_path, log_path=log)
    lines = log.read_text().splitlines()
    assert len(lines) == 2
    fields = lines[1].split()
    assert len(fields) == 5 and int(fields[0]) == 2
    assert all(math.isfinite(float(f)) for f in fields[1:])
    assert [p.name for p in res.checkpoints] == ["ckpt_epoch0001.svc", "ckpt_epoch0002.svc", "final.svc"]
    ck = load_checkpoint(tmp_path / "final.svc")
    assert ck.epoch == 2 and ck.state.t == res.steps
    assert ck.model.fingerprint() == res.model.fingerprint()
    assert set(ck.state.m) == {p.name for p in res.model.trainable()}


def test_training_is_deterministic(tiny_ds, tmp_path):
    train(tiny_ds, TINY_MODEL, tiny_cfg(), out_dir=tmp_path / "a")
    train(tiny_ds, TINY_MODEL, tiny_cfg(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "final.svc").read_bytes() == (tmp_path / "b" / "final.svc").read_bytes()


def test_resume_reproduces_trajectory(tiny_ds, tmp_path):
    cfg = tiny_cfg(epochs=3, sample_fraction=0.5)
    full = train(tiny_ds, TINY_MODEL, cfg, out_dir=tmp_path / "full")
    train(tiny_ds, TINY_MODEL, cfg, out_dir=tmp_path / "part", stop_after=1)
    resumed = train(tiny_ds, TINY_MODEL, cfg, out_dir=tmp_path / "res", resume=tmp_path / "part" / "final.svc")
    assert resumed.model.fingerprint() == full.model.fingerprint()
    a = read_container(tmp_path / "full" / "final.svc")
    b = read_container(tmp_path / "res" / "final.svc")
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_nan_loss_aborts_with_provenance(tiny_ds):
    bad = MemoryDataset([PatchSample(np.full_like(s.input, np.nan), s.coords, s.gt_demix, s.gt_recon,
                                     s.origin, s.source) for s in tiny_ds.samples])
    with pytest.raises(TrainingError, match=r"non-finite loss.*source"):
        train(bad, TINY_MODEL, tiny_cfg(epochs=1, val_fraction=0.0))


def test_empty_dataset_rejected():
    with pytest.raises(TrainingError):
        train(MemoryDataset([]), TINY_MODEL, tiny_cfg())


def test_both_stages_receive_gradients(tiny_ds):
    res = train(tiny_ds, TINY_MODEL, tiny_cfg(epochs=1, val_fraction=0.0))
    init = CoDeNet(TINY_MODEL).named_parameters()
    moved = {n for n, p in res.model.named_parameters().items() if not np.array_equal(p.data, init[n].data)}
    assert any(n.startswith("demix.") for n in moved) and any(n.startswith("recon.") for n in moved)


def test_wo_cg_keeps_mask_mlps_frozen(tiny_ds):
    res = train(tiny_ds, TINY_MODEL.variant("wo_cg"), tiny_cfg(epochs=1, val_fraction=0.0))
    init = CoDeNet(TINY_MODEL.variant("wo_cg"))
    for a, b in zip(res.model.mask_mlps(), init.mask_mlps()):
        for p, q in zip(a.parameters(), b.parameters()):
            assert np.array_equal(p.data, q.data)


def test_ablation_at_epoch_zero_is_identical(tiny_ds):
    rows = run_ablation(tiny_ds, TINY_MODEL, tiny_cfg(epochs=0), variants=["full", "wo_cg"])
    full, wo = rows
    for k in ("demix_psnr", "recon_psnr", "recon_ssim"):
        assert abs(full[k] - wo[k]) <= 1e-6
    report = format_report(rows)
    assert report.splitlines()[0].split("\t")[:5] == ["variant", "demix_psnr", "demix_ssim", "recon_psnr",
                                                       "recon_ssim"]
    assert len(report.splitlines()) == 3


def test_evaluate_perfect_prediction_metrics(tiny_ds):
    arr = load_arrays(tiny_ds, range(4), np.float64)
    m = evaluate(CoDeNet(TINY_MODEL), arr)
    assert set(m) == {"demix_psnr", "demix_ssim", "recon_psnr", "recon_ssim", "recon_mse", "recon_hp_mse"}
    assert all(math.isfinite(v) for v in m.values())
