import numpy as np
import pytest
import scipy.ndimage

from gmsfem import cli, mesh
from gmsfem.cli import ExperimentConfig


# ---------------------------------------------------------------------------
# field generation


def test_generate_field_contrast_one_is_uniform():
    for kind in ("channel", "inclusions"):
        field = cli.generate_field(kind, 1.0, 40, seed=5)
        assert np.all(field.values == 1.0)


def test_generate_field_rejects_bad_input():
    with pytest.raises(ValueError):
        cli.generate_field("channel", 1e4, 19, seed=0)
    with pytest.raises(ValueError):
        cli.generate_field("maze", 1e4, 40, seed=0)
    with pytest.raises(ValueError):
        cli.generate_field("channel", 0.5, 40, seed=0)


def _crossing_exists(mask):
    """Flood-fill oracle: 4-connected path of True cells from x=0 to x=nf-1."""
    four = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, count = scipy.ndimage.label(mask, structure=four)
    left = set(labels[:, 0][mask[:, 0]])
    right = set(labels[:, -1][mask[:, -1]])
    return bool(left & right)


@pytest.mark.parametrize("seed", [0, 1, 7, 42])
def test_channel_field_has_crossing_band(seed):
    field = cli.generate_field("channel", 1e4, 100, seed=seed)
    assert _crossing_exists(field.values > 1.0)


@pytest.mark.parametrize("seed", [0, 7])
def test_inclusions_field_has_no_crossing(seed):
    field = cli.generate_field("inclusions", 1e4, 100, seed=seed)
    assert not _crossing_exists(field.values > 1.0)


def test_field_kinds_share_inclusions():
    channel = cli.generate_field("channel", 1e6, 80, seed=3)
    inclusions = cli.generate_field("inclusions", 1e6, 80, seed=3)
    # the channel raster adds the band on top of the same inclusion draws
    assert np.all(channel.values[inclusions.values > 1.0] > 1.0)
    assert (channel.values > 1.0).sum() > (inclusions.values > 1.0).sum()


def test_generate_field_is_deterministic():
    a = cli.generate_field("channel", 1e4, 60, seed=11)
    b = cli.generate_field("channel", 1e4, 60, seed=11)
    c = cli.generate_field("channel", 1e4, 60, seed=12)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


# ---------------------------------------------------------------------------
# field file I/O


def test_field_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(17)
    field = cli.generate_field("channel", 1e6, 40, seed=2)
    noisy = cli.CoefficientField(field.values * np.exp(0.01 * rng.normal(size=field.values.shape)))
    path = tmp_path / "field.txt"
    cli.write_field(noisy, path)
    back = cli.read_field(path)
    assert np.array_equal(back.values, noisy.values)


def test_read_field_rejects_nonpositive(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2\n1.0 1.0\n1.0 -3.0\n")
    with pytest.raises(ValueError, match="row 1, column 1"):
        cli.read_field(path)


def test_read_field_rejects_malformed(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("banana\n")
    with pytest.raises(ValueError, match="first line"):
        cli.read_field(path)
    path.write_text("2\n1.0 1.0\n")
    with pytest.raises(ValueError, match="file ended"):
        cli.read_field(path)
    path.write_text("2\n1.0 1.0 1.0\n1.0 1.0\n")
    with pytest.raises(ValueError, match="row 0 has 3 values"):
        cli.read_field(path)


def test_field_file_grid_mismatch(tmp_path):
    path = tmp_path / "field.txt"
    cli.write_field(cli.CoefficientField.constant(24), path)
    config = ExperimentConfig(nc=5, r=4, field=f"file:{path}", contrast=1.0)
    with pytest.raises(ValueError, match="nf=24"):
        cli.run_experiment(config, verbose=False)


# ---------------------------------------------------------------------------
# geometry helpers and config validation


def test_box_fraction_total_area_any_alignment():
    for nc, r in ((10, 10), (7, 3)):
        grid = mesh.build_grids(nc, r)
        frac = cli.box_fraction(grid, cli.K2_BOX)
        assert frac.sum() * grid.h**2 == pytest.approx(0.01, abs=1e-15)
        assert frac.min() >= 0.0 and frac.max() <= 1.0


def test_experiment_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(contrast=0.5)
    with pytest.raises(ValueError):
        ExperimentConfig(strategies=["standard", "bulk"])
    with pytest.raises(ValueError):
        ExperimentConfig(k1_box=(0.5, 0.4, 0.0, 1.0))
    with pytest.raises(ValueError):
        ExperimentConfig(k2_box=(0.0, 1.5, 0.0, 1.0))
    with pytest.raises(ValueError):
        ExperimentConfig(goal_scale="average")
    with pytest.raises(ValueError):
        ExperimentConfig(initial_count=0)


# ---------------------------------------------------------------------------
# experiments


def _tiny_config(out_dir, **overrides):
    options = dict(
        nc=5,
        r=4,
        field="inclusions",
        contrast=1.0,
        max_iterations=3,
        dof_cap=500,
        seed=1,
        out_dir=str(out_dir),
    )
    options.update(overrides)
    return ExperimentConfig(**options)


def test_run_experiment_single_strategy_monotone(tmp_path):
    config = _tiny_config(tmp_path, strategies=["standard"])
    traces = cli.run_experiment(config, verbose=False)
    assert set(traces) == {"standard"}
    energy = traces["standard"].column("energy_error")
    assert np.all(np.diff(energy) <= 1e-12 * energy[0])
    assert (tmp_path / "trace_standard.csv").exists()
    assert (tmp_path / "comparison.csv").exists()


def test_run_experiment_is_reproducible(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        cli.run_experiment(_tiny_config(out), verbose=False)
    for name in ("trace_standard.csv", "trace_goal_h1.csv", "trace_goal_dwr.csv", "comparison.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_strategies_share_fine_reference(tmp_path):
    # identical initial space + shared reference solve: iteration-0 error
    # columns agree across strategies
    traces = cli.run_experiment(_tiny_config(tmp_path, contrast=100.0), verbose=False)
    first = [tr.rows[0] for tr in traces.values()]
    assert len({row.energy_error for row in first}) == 1
    assert len({row.goal_error for row in first}) == 1
    assert len({row.dofs for row in first}) == 1


def test_comparison_csv_schema(tmp_path):
    cli.run_experiment(_tiny_config(tmp_path), verbose=False)
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0] == (
        "strategy,iteration,dofs,energy_error,goal_error,sum_eta_sq,marked_count,"
        "theta,s,m_enrich,contrast"
    )
    first = lines[1].split(",")
    assert first[0] == "standard"
    assert int(first[1]) == 0
    assert float(first[7]) == 0.5


def test_run_experiment_optional_dumps(tmp_path):
    config = _tiny_config(
        tmp_path, strategies=["goal_dwr"], dump_indicator_csv=True, dump_spectra_csv=True
    )
    cli.run_experiment(config, verbose=False)
    assert (tmp_path / "indicators_goal_dwr.csv").exists()
    assert (tmp_path / "spectra.csv").exists()


def test_goal_scale_mean_rescales_goal(tmp_path):
    integral = cli.run_experiment(
        _tiny_config(tmp_path / "i", strategies=["standard"]), verbose=False
    )
    mean = cli.run_experiment(
        _tiny_config(tmp_path / "m", strategies=["standard"], goal_scale="mean"), verbose=False
    )
    area = 0.01
    g_int = integral["standard"].rows[0].goal_error
    g_mean = mean["standard"].rows[0].goal_error
    assert g_mean == pytest.approx(g_int / area, rel=1e-9)


def test_main_with_flags_and_config_file(tmp_path, capsys):
    config_file = tmp_path / "run.cfg"
    config_file.write_text(
        "nc = 5\nr = 4\ncontrast = 1.0  # uniform medium\nfield = inclusions\n"
        "max_iters = 2\nstrategies = standard,goal_h1\n"
    )
    out = tmp_path / "out"
    code = cli.main(["--config", str(config_file), "--out", str(out), "--seed", "3"])
    assert code == 0
    assert (out / "trace_goal_h1.csv").exists()
    assert not (out / "trace_goal_dwr.csv").exists()
    summary = capsys.readouterr().out
    assert "dofs to reach goal error" in summary


def test_main_reports_errors(tmp_path, capsys):
    code = cli.main(["--contrast", "0.1", "--out", str(tmp_path)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_main_rejects_unknown_config_key(tmp_path):
    config_file = tmp_path / "run.cfg"
    config_file.write_text("granularity = 3\n")
    with pytest.raises(SystemExit):
        cli.main(["--config", str(config_file)])
