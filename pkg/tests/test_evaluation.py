import numpy as np
import pandas as pd
import pytest
import torch

from tunefree_pnp import config as config_module
from tunefree_pnp.agent import LearnedPolicy, PolicyNetwork
from tunefree_pnp.baselines import run_fixed
from tunefree_pnp.config import EnvConfig, EvaluationConfig, ExperimentConfig, ProblemConfig, Task
from tunefree_pnp.datasets import ProblemSetting, build_problem, load_image, save_image
from tunefree_pnp.env import PnPEnv
from tunefree_pnp.errors import ConfigError
from tunefree_pnp.evaluation import (
    aggregate_results,
    evaluate_policy,
    mean_psnr,
    profile_denoiser,
    results_frame,
    run_single,
    write_results,
)
from tunefree_pnp.metrics import psnr
from tunefree_pnp.models import RESULT_COLUMNS, ResultRecord
from tunefree_pnp.reporting import load_results, report, results_table, write_curves

POLICIES = ["fixed", "fixed*", "handcrafted", "fixed_optimal", "oracle", "oracle*"]
SETTING = ProblemSetting(Task.CSMRI, 4.0, 15.0)


@pytest.fixture(autouse=True)
def float64_problems(monkeypatch):
    monkeypatch.setattr(config_module.settings, "dtype", "float64")


def _config(**evaluation) -> ExperimentConfig:
    fields = dict(policies=POLICIES, sigma_grid=[5.0, 15.0], mu_grid=[0.1, 0.3], max_iterations=6, timing=False)
    fields.update(evaluation)
    return ExperimentConfig(
        problems=ProblemConfig(image_size=16, accelerations=[4.0], sigma_ns=[15.0]),
        evaluation=EvaluationConfig(**fields),
    )


def _by_policy(run, image_id):
    return {r.policy: r for r in run.records if r.image_id == image_id}


def _record(image_id: str, policy: str, psnr_db: float, iterations: int = 30, accel: float = 4.0) -> ResultRecord:
    return ResultRecord(
        image_id=image_id,
        task="csmri",
        accel_or_alpha=accel,
        sigma_n=15.0,
        policy=policy,
        seed=0,
        psnr_db=psnr_db,
        iterations=iterations,
    )


def test_campaign_rows_follow_image_setting_policy_order(unet64, desk_images):
    images = desk_images[:2]
    run = evaluate_policy(_config(), unet64, images, workers=2)
    assert [(r.image_id, r.policy) for r in run.records] == [(i.image_id, p) for i in images for p in POLICIES]
    assert len(run.curves) == len(run.records)
    for record, curve in zip(run.records, run.curves):
        assert len(curve.psnr_trace) == record.iterations
        assert curve.psnr_trace[-1] == pytest.approx(record.psnr_db)
    assert [s.search for s in run.searches] == ["fixed_optimal", "oracle", "oracle"]
    assert run.searches[0].image_id == "*"


def test_policies_reproduce_their_schedules(unet64, desk_images):
    images = desk_images[:2]
    config = _config()
    run = evaluate_policy(config, unet64, images, workers=2)
    for image in images:
        rows = _by_policy(run, image.image_id)
        problem = build_problem(image, SETTING, config.problems, seed=0, dtype=torch.float64)
        expected = run_fixed(problem, unet64, 15.0 / 255.0, 0.1, 6)
        assert rows["fixed"].psnr_db == pytest.approx(expected.final_psnr, abs=1e-9)
        assert rows["fixed"].iterations == 6

        # the grid holds the fixed pair, and the oracle maximizes per image
        assert rows["oracle"].psnr_db >= rows["fixed"].psnr_db - 1e-6
        assert rows["oracle"].psnr_db >= rows["fixed_optimal"].psnr_db - 1e-6
        for name in ("fixed", "oracle"):
            assert rows[name + "*"].psnr_db >= rows[name].psnr_db
            assert rows[name + "*"].iterations <= rows[name].iterations
    assert mean_psnr(run.records, "fixed_optimal") >= mean_psnr(run.records, "fixed") - 1e-6


def test_results_are_deterministic_without_timing(unet64, desk_images, tmp_path):
    images = desk_images[:2]
    first = write_results(evaluate_policy(_config(), unet64, images, workers=1), tmp_path / "a")
    second = write_results(evaluate_policy(_config(), unet64, images, workers=3), tmp_path / "b")
    for key in ("results", "aggregated", "traces", "search"):
        assert first[key].read_bytes() == second[key].read_bytes()
    frame = pd.read_csv(first["results"])
    assert list(frame.columns) == RESULT_COLUMNS
    assert (frame["wall_time_s"] == 0.0).all()


def test_single_runs_match_the_campaign(unet64, desk_images):
    images = desk_images[:2]
    config = _config()
    run = evaluate_policy(config, unet64, images, workers=2)
    target = images[1]
    rows = _by_policy(run, target.image_id)
    for policy in ("handcrafted", "oracle*", "fixed_optimal"):
        record, outcome = run_single(config, target, SETTING, policy, 0, unet64, search_images=images)
        assert record.psnr_db == pytest.approx(rows[policy].psnr_db, abs=1e-9)
        assert record.iterations == rows[policy].iterations
        assert len(outcome.trace) == record.iterations


def test_fixed_optimal_needs_the_search_images(unet64, desk_images):
    with pytest.raises(ConfigError):
        run_single(_config(), desk_images[0], SETTING, "fixed_optimal", 0, unet64)


def test_learned_policy_stops_on_block_boundaries(unet64, desk_images):
    env = PnPEnv(unet64, EnvConfig())
    torch.manual_seed(0)
    policy = PolicyNetwork(env.observation_channels, env.action_dim, trunk_widths=(4, 8), head_hidden=8)
    run = evaluate_policy(_config(policies=["learned", "learned*"]), unet64, desk_images[:2], LearnedPolicy(env, policy), workers=1)
    assert len(run.records) == 4
    for record in run.records:
        if record.policy == "learned":
            assert record.iterations % env.m == 0
        assert 0 < record.iterations <= 30


def _coin_flip_policy(env: PnPEnv) -> LearnedPolicy:
    torch.manual_seed(0)
    policy = PolicyNetwork(env.observation_channels, env.action_dim, trunk_widths=(4, 8), head_hidden=8)
    with torch.no_grad():
        for parameter in policy.termination_head.parameters():
            parameter.zero_()
    return LearnedPolicy(env, policy, "sample")


def test_sampled_termination_matches_single_runs(unet64, desk_images):
    env = PnPEnv(unet64, EnvConfig())
    learned = _coin_flip_policy(env)
    config = _config(policies=["learned"])
    serial = evaluate_policy(config, unet64, desk_images, learned, workers=1)
    threaded = evaluate_policy(config, unet64, desk_images, learned, workers=2)
    assert [r.iterations for r in serial.records] == [r.iterations for r in threaded.records]
    for image, row in zip(desk_images, serial.records):
        assert row.image_id == image.image_id
        record, outcome = run_single(config, image, SETTING, "learned", 0, unet64, learned)
        assert record.iterations == row.iterations
        assert record.psnr_db == pytest.approx(row.psnr_db, abs=1e-9)
        assert outcome.image is not None and outcome.image.shape == image.shape


def test_outcomes_carry_the_reported_iterate(unet64, desk_images, tmp_path):
    config = _config()
    image = desk_images[0]
    problem = build_problem(image, SETTING, config.problems, seed=0, dtype=torch.float64)
    for policy in ("fixed", "fixed*", "handcrafted"):
        record, outcome = run_single(config, image, SETTING, policy, 0, unet64)
        assert outcome.image.shape == image.shape
        assert float(psnr(outcome.image, problem.x_gt)) == pytest.approx(record.psnr_db, abs=1e-9)

        path = save_image(outcome.magnitude(), tmp_path / f"{policy.replace('*', '_best')}.png")
        saved = load_image(path)
        assert saved.shape == image.shape
        assert np.abs(saved.pixels - outcome.magnitude()).max() <= 0.5 / 255.0 + 1e-12


def test_learned_policy_requires_a_snapshot(unet64, desk_images):
    with pytest.raises(ConfigError, match="agent.snapshot"):
        evaluate_policy(_config(policies=["learned"]), unet64, desk_images[:1])


def test_aggregation_averages_each_cell():
    frame = results_frame([_record("a", "fixed", 30.0, 30), _record("b", "fixed", 32.0, 20), _record("a", "oracle", 35.0)])
    aggregated = aggregate_results(frame)
    fixed = aggregated[aggregated["policy"] == "fixed"].iloc[0]
    assert fixed["psnr_db"] == pytest.approx(31.0)
    assert fixed["iterations"] == pytest.approx(25.0)
    assert fixed["count"] == 2
    assert list(aggregated["policy"]) == ["fixed", "oracle"]
    with pytest.raises(ValueError):
        aggregate_results(results_frame([]))


def test_profile_reports_both_quality_numbers(unet64, desk_images):
    profile = profile_denoiser(unet64, desk_images[:2], _config(), sigma=25.0, repeats=1)
    assert profile.sigma == 25.0
    assert profile.best_sigma in (5.0, 15.0)
    assert profile.best_mu in (0.1, 0.3)
    assert profile.runtime_ms > 0.0
    assert 0.0 < profile.denoising_psnr <= 100.0
    with pytest.raises(ValueError):
        profile_denoiser(unet64, [], _config())


def test_results_table_pivots_policy_by_setting():
    frame = results_frame(
        [
            _record("a", "fixed", 30.0, accel=4.0),
            _record("b", "fixed", 31.0, accel=4.0),
            _record("a", "fixed", 25.0, accel=8.0),
            _record("a", "oracle", 33.0, 12, accel=4.0),
        ]
    )
    tables = results_table(frame)
    psnr = tables["psnr_db"]
    assert list(psnr.index) == ["fixed", "oracle"]
    assert list(psnr.columns) == ["x4 s15", "x8 s15"]
    assert psnr.loc["fixed", "x4 s15"] == pytest.approx(30.5)
    assert pd.isna(psnr.loc["oracle", "x8 s15"])
    assert tables["iterations"].loc["oracle", "x4 s15"] == 12
    with pytest.raises(ValueError):
        results_table(frame.iloc[0:0])


def test_reports_from_an_evaluation_directory(unet64, desk_images, tmp_path):
    run = evaluate_policy(_config(policies=["fixed", "oracle*"]), unet64, desk_images[:1], workers=1)
    write_results(run, tmp_path)

    tables = report(tmp_path, "table")
    assert sorted(p.name for p in tables) == ["table_iterations.csv", "table_psnr_db.csv"]
    table = pd.read_csv(tmp_path / "report" / "table_psnr_db.csv", index_col=0)
    assert table.shape == (2, 1)
    assert table.loc["fixed"].iloc[0] == pytest.approx(run.records[0].psnr_db)

    curves = report(tmp_path, "curves", tmp_path / "plots")
    svgs = [p for p in curves if p.suffix == ".svg"]
    assert len(svgs) == 1 and svgs[0].read_text().lstrip().startswith("<?xml")
    for path, record in zip([p for p in curves if p.suffix == ".csv"], run.records):
        data = pd.read_csv(path)
        assert list(data.columns) == ["iteration", "psnr_db"]
        assert len(data) == record.iterations


def test_report_inputs_are_validated(tmp_path):
    (tmp_path / "results.csv").write_text("image_id,policy\na,fixed\n")
    with pytest.raises(ValueError, match="lacks result columns"):
        load_results(tmp_path / "results.csv")
    with pytest.raises(ValueError):
        write_curves([], tmp_path)
