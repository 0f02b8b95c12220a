import json
import os

import numpy as np
import pytest

from geosplat360.cli import EXIT_DIVERGED, EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, main, read_cloud
from geosplat360.gaussians import read_gaussians
from geosplat360.panorama import read_pfm, write_pfm


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "roomA", str(out), "--width", "64", "--height", "32", "--density", "20"]) == EXIT_OK
    return out


def files(d, pattern):
    return sorted(f for f in os.listdir(d) if f.startswith(pattern))


def test_synth_writes_the_expected_files(synth_dir):
    assert len(files(synth_dir, "rgb_")) == 3
    assert len(files(synth_dir, "depth_")) == 3
    assert len(files(synth_dir, "normal_")) == 3
    assert (synth_dir / "cloud.xyz").exists()
    assert read_pfm(synth_dir / "depth_0.pfm").shape == (32, 64)
    assert read_cloud(str(synth_dir / "cloud.xyz")).shape[1] == 3


def test_synth_is_deterministic(synth_dir, tmp_path):
    main(["synth", "roomA", str(tmp_path), "--width", "64", "--height", "32", "--density", "20"])
    for name in os.listdir(synth_dir):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_corrupt_config_names_the_field(tmp_path, capsys):
    cfg = tmp_path / "room.json"
    cfg.write_text(json.dumps({"preset": "roomA", "extents": [1, "x", 3]}))
    assert main(["synth", str(cfg), str(tmp_path / "o")]) == EXIT_USAGE
    assert "extents" in capsys.readouterr().err


def test_unwritable_output_is_an_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "roomA", str(blocker / "sub"), "--width", "16", "--height", "8"]) == EXIT_IO


def sweep_args(d, out, *extra):
    views = [str(d / f"rgb_{i}.png") for i in range(3)]
    return ["sweep", "--views", *views, "--poses", str(d / "poses.txt"), "--out", str(out), *extra]


def test_sweep_writes_prior(synth_dir, tmp_path):
    assert main(sweep_args(synth_dir, tmp_path, "--K", "16", "--window", "3", "--save-volume")) == EXIT_OK
    depth = read_pfm(tmp_path / "prior_depth.pfm")
    conf = read_pfm(tmp_path / "prior_confidence.pfm")
    assert depth.shape == conf.shape == (32, 64)
    assert (tmp_path / "cost_volume.bin").exists()


def test_sweep_with_two_hypotheses(synth_dir, tmp_path):
    assert main(sweep_args(synth_dir, tmp_path, "--K", "2", "--near", "1", "--far", "4")) == EXIT_OK
    depth = read_pfm(tmp_path / "prior_depth.pfm")
    assert depth.min() >= 1 - 1e-6 and depth.max() <= 4 + 1e-6


def test_sweep_missing_poses(synth_dir, tmp_path):
    args = sweep_args(synth_dir, tmp_path)
    args[args.index("--poses") + 1] = str(tmp_path / "missing.txt")
    assert main(args) != EXIT_OK


def fit_args(d, out, *extra):
    targets = [str(d / f"rgb_{i}.png") for i in range(3)]
    depths = [str(d / f"depth_{i}.pfm") for i in range(3)]
    return ["fit", "--init", str(d / "depth_0.pfm"), "--targets", *targets, "--depths", *depths,
            "--poses", str(d / "poses.txt"), "--stride", "4", "--out", str(out), *extra]


def test_fit_descends_and_writes_outputs(synth_dir, tmp_path):
    assert main(fit_args(synth_dir, tmp_path, "--iters", "15", "--perturb", "0.03",
                         "--gt-cloud", str(synth_dir / "cloud.xyz"))) == EXIT_OK
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert len(lines) == 16
    first, last = json.loads(lines[0]), json.loads(lines[-1])
    assert last["total"] < first["total"]
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["chamfer_m"] == pytest.approx(metrics["accuracy_m"] + metrics["completeness_m"], abs=1e-12)


def test_fit_with_zero_iterations_keeps_the_init(synth_dir, tmp_path):
    assert main(fit_args(synth_dir, tmp_path / "a", "--iters", "0")) == EXIT_OK
    init = tmp_path / "a" / "gaussians.gs"
    args = fit_args(synth_dir, tmp_path / "b", "--iters", "0")
    args[args.index("--init") + 1] = str(init)
    assert main(args) == EXIT_OK
    a, b = read_gaussians(init), read_gaussians(tmp_path / "b" / "gaussians.gs")
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.quats, b.quats)


def test_fit_ablation_emits_both_runs(synth_dir, tmp_path):
    assert main(fit_args(synth_dir, tmp_path, "--iters", "3", "--ablate",
                         "--gt-cloud", str(synth_dir / "cloud.xyz"))) == EXIT_OK
    summary = json.loads((tmp_path / "ablation.json").read_text())
    assert set(summary) == {"full", "no_dn"}
    assert summary["no_dn"]["lambda3"] == 0.0
    assert "chamfer_m" in summary["full"]


def test_fit_divergence_exit_code(synth_dir, tmp_path, monkeypatch):
    from geosplat360 import cli
    from geosplat360._validation import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("loss blew up", [])

    monkeypatch.setattr(cli, "fit", boom)
    assert main(fit_args(synth_dir, tmp_path, "--iters", "2")) == EXIT_DIVERGED


def test_render_and_eval_round_trip(synth_dir, tmp_path, capsys):
    fit_out = tmp_path / "fit"
    main(fit_args(synth_dir, fit_out, "--iters", "0"))
    out = tmp_path / "render"
    assert main(["render", str(fit_out / "gaussians.gs"), "--poses", str(synth_dir / "poses.txt"),
                 "--index", "1", "--out", str(out)]) == EXIT_OK
    for name in ("rgb.png", "depth.pfm", "normal.pfm"):
        assert (out / name).exists()
    capsys.readouterr()
    gt = str(synth_dir / "depth_1.pfm")
    assert main(["eval", gt, gt, "--mode", "depth", "--json"]) == EXIT_OK
    m = json.loads(capsys.readouterr().out)
    assert list(m)[:4] == ["abs_diff", "abs_rel", "rmse", "delta_1_25_pct"]
    assert (m["abs_diff"], m["delta_1_25_pct"]) == (0.0, 100.0)
    rgb = str(synth_dir / "rgb_0.png")
    assert main(["eval", rgb, rgb, "--mode", "image", "--json"]) == EXIT_OK
    m = json.loads(capsys.readouterr().out)
    assert list(m) == ["psnr_db", "ssim"] and m["psnr_db"] == 99.0 and m["ssim"] == pytest.approx(1.0)
    cloud = str(synth_dir / "cloud.xyz")
    assert main(["eval", cloud, cloud, "--mode", "cloud", "--out", str(tmp_path / "m.json")]) == EXIT_OK
    m = json.loads((tmp_path / "m.json").read_text())
    assert list(m) == ["accuracy_m", "completeness_m", "chamfer_m"] and m["chamfer_m"] == 0.0


def test_eval_size_mismatch(tmp_path):
    write_pfm(tmp_path / "a.pfm", np.ones((4, 8)))
    write_pfm(tmp_path / "b.pfm", np.ones((4, 6)))
    assert main(["eval", str(tmp_path / "a.pfm"), str(tmp_path / "b.pfm"), "--mode", "depth"]) == EXIT_USAGE


def test_render_index_out_of_range(synth_dir, tmp_path):
    main(fit_args(synth_dir, tmp_path, "--iters", "0"))
    with pytest.raises(SystemExit) as info:
        main(["render", str(tmp_path / "gaussians.gs"), "--poses", str(synth_dir / "poses.txt"),
              "--index", "9", "--out", str(tmp_path / "r")])
    assert info.value.code == EXIT_USAGE


def test_every_subcommand_documents_its_flags():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.choices and "fit" in a.choices)
    for name, sp in sub.choices.items():
        for action in sp._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} has no help"
    text = sub.choices["fit"].format_help()
    assert "meters" in text
