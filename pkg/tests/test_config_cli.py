import numpy as np
import pytest

from svdeconv.cli import main
from svdeconv.config import DEFAULTS, ConfigError, format_defaults, load_config, parse_config
from svdeconv.container import read_container, write_container

TOY_CONFIG = """\
# toy geometry that trains in seconds
geometry.sensor_size = 96
geometry.pad_size = 112
geometry.subview_size = 64x64
geometry.patch_size = 16
geometry.stride = 8
basis.kernel_size = 5
data.num_images = 1
data.precision = double
model.lens_width = 2
model.unet_width = 2
model.unet_depth = 1
model.mlp_hidden = 4
model.mlp_layers = 1
model.attn_hidden = 4
pe.bands = 1
train.epochs = 1
train.sample_fraction = 0.1
train.val_fraction = 0.5
paths.dataset = {ds}
paths.run = {run}
"""


def write_cfg(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "toy.cfg", TOY_CONFIG.format(ds=root / "ds", run=root / "run")
                    + "data.phantoms = 1\n")
    assert main(["simulate", cfg]) == 0
    assert main(["train", cfg]) == 0
    return root, cfg


# ---------------------------------------------------------------- config parsing

def test_unknown_key_rejected_with_line_number(tmp_path):
    with pytest.raises(ConfigError, match=r":3: unknown key 'geometry\.patchsize'"):
        parse_config("# c\ngeometry.patch_size = 48\ngeometry.patchsize = 48\n", "x.cfg")


@pytest.mark.parametrize("line, msg", [("model.use_cg = maybe", "bad value"), ("train.epochs", "key = value"),
                                       ("pe.indexing = other", "bad value")])
def test_bad_lines_rejected(line, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(line + "\n", "x.cfg")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("train.epochs = 1\ntrain.epochs = 2\n", "x.cfg")


def test_defaults_documented_and_parse_back():
    assert all(doc for _, _, doc in DEFAULTS.values())
    cfg = parse_config(format_defaults(), "defaults")
    for key, (default, _, _) in DEFAULTS.items():
        if default is not None:
            assert cfg[key] == default, key


def test_builders_produce_consistent_objects():
    cfg = parse_config("geometry.subview_size = 64\ngeometry.patch_size = 16\ngeometry.stride = 8\n"
                       "geometry.sensor_size = 96\ngeometry.pad_size = 112\ntrain.alpha = 1.0\n", "x")
    assert cfg.geometry().subview_size == (64, 64)
    assert cfg.train().alpha == 1.0 and cfg.train().beta == 1.0
    with pytest.raises(ConfigError):
        parse_config("geometry.patch_size = 400\n", "x").geometry()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")


# ---------------------------------------------------------------- exit codes

def test_missing_dataset_path_is_usage_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", "data.num_images = 1\n")
    assert main(["simulate", cfg]) == 2
    assert "paths.dataset" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["nonsense"]) == 2
    assert main(["infer", "a.svc"]) == 2
    cfg = write_cfg(tmp_path / "bad.cfg", "what = 1\n")
    assert main(["simulate", cfg]) == 2
    assert "bad.cfg:1" in capsys.readouterr().err


def test_runtime_error_exit_1(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "no.svc"), str(tmp_path / "no.svc")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_defaults_command(capsys):
    assert main(["defaults"]) == 0
    assert "geometry.patch_size = 48" in capsys.readouterr().out


# ---------------------------------------------------------------- simulate

@pytest.mark.parametrize("n, expected", [(1, 81), (3, 243)])
def test_simulate_desk_patch_counts(tmp_path, capsys, n, expected):
    cfg = write_cfg(tmp_path / "d.cfg", f"data.num_images = {n}\npaths.dataset = {tmp_path / 'ds'}\n")
    assert main(["simulate", cfg]) == 0
    out = capsys.readouterr().out
    assert f"patches: {expected} (81 per source image x {n} source images)" in out
    assert len((tmp_path / "ds" / "index.txt").read_text().split("\n#")[0].splitlines()) >= expected


def test_simulate_is_deterministic(tmp_path):
    for name in ("a", "b"):
        cfg = write_cfg(tmp_path / f"{name}.cfg", TOY_CONFIG.format(ds=tmp_path / name, run=tmp_path / "r"))
        assert main(["simulate", cfg, "--seed", "4"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").rglob("*.svc"))
    assert files
    for f in files:
        a = next((tmp_path / "a").rglob(f)).read_bytes()
        b = next((tmp_path / "b").rglob(f)).read_bytes()
        assert a == b, f


# ---------------------------------------------------------------- train / infer / eval

def test_train_writes_log_and_checkpoint(toy_run):
    root, _ = toy_run
    assert (root / "run" / "final.svc").exists()
    lines = (root / "run" / "train.log").read_text().splitlines()
    assert len(lines) == 1 and len(lines[0].split()) == 5


def test_infer_twice_bitwise_identical(toy_run, tmp_path, capsys):
    root, _ = toy_run
    meas = root / "ds" / "measurements" / "source_0000.svc"
    ck = root / "run" / "final.svc"
    assert main(["infer", str(ck), str(meas), "--out", str(tmp_path / "a.svc")]) == 0
    assert main(["infer", str(ck), str(meas), "--out", str(tmp_path / "b.svc"), "--cache",
                 str(tmp_path / "m.svc"), "--preview", str(tmp_path / "p.png")]) == 0
    assert main(["infer", str(ck), str(meas), "--out", str(tmp_path / "c.svc"), "--cache",
                 str(tmp_path / "m.svc")]) == 0
    assert (tmp_path / "a.svc").read_bytes() == (tmp_path / "b.svc").read_bytes()
    assert (tmp_path / "b.svc").read_bytes() == (tmp_path / "c.svc").read_bytes()
    assert read_container(tmp_path / "a.svc")["recon"].shape == (64, 64)
    assert (tmp_path / "p.png").exists()


def test_eval_identical_is_inf_and_one(toy_run, capsys):
    root, _ = toy_run
    meas = root / "ds" / "measurements" / "source_0000.svc"
    capsys.readouterr()
    assert main(["eval", str(meas), str(meas)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "psnr\tinf"
    assert out[1] == "ssim\t1.000000"


def test_eval_reports_finite_psnr(tmp_path, capsys):
    a = np.full((32, 32), 0.5)
    write_container(tmp_path / "a.svc", {"recon": a})
    write_container(tmp_path / "b.svc", {"object": a + 0.1})
    assert main(["eval", str(tmp_path / "a.svc"), str(tmp_path / "b.svc")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "psnr\t20.000000"


def test_infer_refuses_geometry_mismatch(toy_run, tmp_path, capsys):
    root, cfg = toy_run
    other = write_cfg(tmp_path / "o.cfg", TOY_CONFIG.format(ds=root / "ds", run=root / "run")
                      .replace("geometry.stride = 8", "geometry.stride = 4"))
    meas = root / "ds" / "measurements" / "source_0000.svc"
    capsys.readouterr()
    code = main(["infer", str(root / "run" / "final.svc"), str(meas), "--out", str(tmp_path / "x.svc"),
                 "--config", other])
    err = capsys.readouterr().err
    assert code == 1 and "fingerprint mismatch" in err
    assert load_config(cfg).geometry().fingerprint() in err
    assert load_config(other).geometry().fingerprint() in err


def test_train_refuses_dataset_geometry_mismatch(toy_run, tmp_path, capsys):
    root, _ = toy_run
    other = write_cfg(tmp_path / "o.cfg", TOY_CONFIG.format(ds=root / "ds", run=tmp_path / "run")
                      .replace("geometry.stride = 8", "geometry.stride = 4"))
    assert main(["train", other]) == 1
    assert "fingerprint mismatch" in capsys.readouterr().err


def test_ablate_reports_three_rows(toy_run, tmp_path, capsys):
    root, cfg = toy_run
    capsys.readouterr()
    assert main(["ablate", cfg, "--out", str(tmp_path / "abl")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4
    header = lines[0].split("\t")
    assert "recon_psnr" in header and "recon_ssim" in header
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["full", "wo_cg", "wo_pe"]
    assert (tmp_path / "abl" / "ablation.tsv").read_text().splitlines() == lines
