import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from svdeconv.codenet import ModelConfig, PEConfig  # noqa: E402
from svdeconv.datasynth import NoiseModel, build_dataset, make_sources  # noqa: E402
from svdeconv.svforward import Geometry, synth_basis  # noqa: E402
from svdeconv.trainer import TrainConfig, train  # noqa: E402

# 64 x 64 sub-views, 16 px patches: small enough to train inside the test run
TOY_GEOMETRY = Geometry(sensor_size=(96, 96), pad_size=(112, 112), subview_size=(64, 64),
                        patch_size=16, stride=8)
TOY_MODEL = ModelConfig(lens_width=4, unet_width=8, unet_depth=2, mlp_hidden=8, mlp_layers=1,
                        attn_hidden=8, pe=PEConfig(bands=4), seed=0, precision="double")
# PASS/FAIL lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []

TOY_TRAIN = TrainConfig(epochs=40, batch_size=4, base_lr=3e-3, final_lr=1e-5, seed=0, val_every=0)


def small_model_cfg(**kw) -> ModelConfig:
    base = dict(lens_width=2, unet_width=2, unet_depth=1, mlp_hidden=4, mlp_layers=1, attn_hidden=4,
                pe=PEConfig(bands=1), seed=0, precision="double")
    base.update(kw)
    return ModelConfig(**base)


def perturb(model, scale=0.1, seed=0):
    """Move every parameter off its initial value so masks and attention are non-trivial."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return model


@pytest.fixture(scope="session")
def toy_bases():
    return synth_basis(TOY_GEOMETRY, 3, seed=0, kernel_size=5)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory, toy_bases):
    root = tmp_path_factory.mktemp("toy_ds")
    sources = make_sources(3, TOY_GEOMETRY.subview_size, seed=0)
    return build_dataset(sources, TOY_GEOMETRY, toy_bases, NoiseModel(gain=1000.0, read_sigma=0.005, seed=0),
                         root, phantoms=5, phantom_density=4e-3, dtype=np.float64)


@pytest.fixture(scope="session")
def toy_trained(toy_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("toy_run")
    res = train(toy_dataset, TOY_MODEL, TOY_TRAIN, out_dir=out,
                extra_meta={"geometry": TOY_GEOMETRY.to_dict(), "geometry_fp": TOY_GEOMETRY.fingerprint()})
    return res


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
