import logging

import pandas as pd
import pytest
import toml

from tunefree_pnp.cli import build_parser, main
from tunefree_pnp.config import load_config
from tunefree_pnp.datasets import load_image
from tunefree_pnp.denoisers import save_denoiser
from tunefree_pnp.operators import load_mask

from conftest import DESK_DIR, tiny_unet


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def checkpoint(tmp_path):
    return save_denoiser(tiny_unet(), tmp_path / "denoiser.pt")


def _eval_flags(output_dir, checkpoint):
    return [
        "--output_dir", str(output_dir),
        "--denoiser.checkpoint", str(checkpoint),
        "--evaluation.test_dir", str(DESK_DIR),
        "--problems.image_size", "16",
        "--problems.accelerations", "4",
        "--problems.sigma_ns", "15",
        "--evaluation.policies", "fixed", "oracle*",
        "--evaluation.sigma_grid", "5", "15",
        "--evaluation.mu_grid", "0.1",
        "--evaluation.max_iterations", "4",
        "--evaluation.timing", "false",
    ]


def test_parser_knows_every_subcommand():
    parser = build_parser()
    for command in ("make-masks", "train-denoiser", "profile-denoiser", "train-policy", "eval", "report"):
        assert parser.parse_args([command]).command == command
    args = parser.parse_args(["eval", "--env.m", "3", "--problems.accelerations", "2", "8"])
    assert vars(args)["override:env.m"] == 3
    assert vars(args)["override:problems.accelerations"] == [2.0, 8.0]


def test_usage_errors_exit_nonzero():
    assert main(["nope"]) != 0
    assert main(["run"]) != 0  # --image is required
    assert main(["eval", "--evaluation.timing", "maybe"]) != 0


def test_missing_config_file(tmp_path, capsys):
    assert main(["make-masks", "--config", str(tmp_path / "absent.toml")]) == 2
    assert "config file not found" in capsys.readouterr().err


def test_invalid_config_writes_nothing(tmp_path, capsys):
    output_dir = tmp_path / "out"
    config = tmp_path / "bad.toml"
    config.write_text(toml.dumps({"output_dir": str(output_dir), "problems": {"sigma_ns": []}}))
    assert main(["make-masks", "--config", str(config)]) == 2
    assert "problems.sigma_ns" in capsys.readouterr().err
    assert not output_dir.exists()


def test_missing_paths_are_reported_before_any_work(tmp_path, capsys):
    output_dir = tmp_path / "out"
    assert main(["eval", "--output_dir", str(output_dir)]) == 2
    err = capsys.readouterr().err
    assert "denoiser.checkpoint is not set" in err
    assert "evaluation.test_dir is not set" in err
    assert not output_dir.exists()


def test_make_masks(tmp_path):
    output_dir = tmp_path / "out"
    code = main(["make-masks", "--output_dir", str(output_dir), "--problems.image_size", "32", "--problems.accelerations", "2", "4"])
    assert code == 0
    for acceleration, rate in ((2, 0.5), (4, 0.25)):
        mask = load_mask(output_dir / "masks" / f"mask_x{acceleration}.npz")
        assert mask.shape == (32, 32)
        assert abs(mask.sampling_rate - rate) < 0.05
    resolved = load_config(output_dir / "config.resolved.toml")
    assert resolved.problems.image_size == 32
    assert resolved.problems.accelerations == [2.0, 4.0]


def test_eval_run_and_report_agree(tmp_path, checkpoint, capsys):
    output_dir = tmp_path / "eval"
    flags = _eval_flags(output_dir, checkpoint)
    assert main(["eval", *flags]) == 0
    assert capsys.readouterr().out.strip() == str(output_dir / "results.csv")

    results = pd.read_csv(output_dir / "results.csv")
    assert len(results) == 4 * 2
    assert set(results["policy"]) == {"fixed", "oracle*"}
    assert (output_dir / "config.resolved.toml").is_file()

    row = results[(results["image_id"] == "phantom") & (results["policy"] == "oracle*")].iloc[0]
    image = str(DESK_DIR / "phantom.pgm")
    assert main(["run", *flags, "--image", image, "--policy", "oracle*", "--setting", "csmri-x4-s15"]) == 0
    line = capsys.readouterr().out.strip()
    expected = f"phantom csmri-x4-s15 oracle* seed 0: PSNR {row['psnr_db']:.4f} dB, {row['iterations']} iterations"
    assert line == expected

    assert main(["report", *flags, "--kind", "table"]) == 0
    written = capsys.readouterr().out.split()
    assert str(output_dir / "report" / "table_psnr_db.csv") in written
    table = pd.read_csv(output_dir / "report" / "table_psnr_db.csv", index_col=0)
    assert table.loc["fixed"].iloc[0] == pytest.approx(results[results["policy"] == "fixed"]["psnr_db"].mean())


def test_run_rejects_unknown_settings(tmp_path, checkpoint, capsys):
    flags = _eval_flags(tmp_path / "eval", checkpoint)
    code = main(["run", *flags, "--image", str(DESK_DIR / "rings.pgm"), "--setting", "csmri-x3-s15"])
    assert code == 2
    assert "unknown setting" in capsys.readouterr().err


def test_run_saves_the_reconstruction(tmp_path, checkpoint, capsys):
    flags = _eval_flags(tmp_path / "eval", checkpoint)
    target = tmp_path / "images" / "phantom_oracle.png"
    image = str(DESK_DIR / "phantom.pgm")
    assert main(["run", *flags, "--image", image, "--policy", "oracle*", "--save-image", str(target)]) == 0
    assert "PSNR" in capsys.readouterr().out

    saved = load_image(target)
    assert saved.image_id == "phantom_oracle"
    assert saved.shape == (16, 16)
    assert saved.pixels.min() >= 0.0 and saved.pixels.max() <= 1.0
    assert saved.pixels.std() > 0.0


def test_report_without_results(tmp_path, capsys):
    assert main(["report", "--results-dir", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err
