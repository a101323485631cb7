"""Config grammar, artifact export, metric reports and the CLI entry point."""

import json
import os

import numpy as np
import pytest

from calvnet.cli import (MetricsReport, _jsonable, _matrix_names,
                         build_problem, export_trajectory, main,
                         read_trajectory, relative_error)
from calvnet.config import (ConfigError, config_from_pairs, parse_config,
                            serialize_config)
from calvnet.geodesic import GeodesicProblem
from calvnet.kalman import KalmanProblem
from calvnet.mintime import MinTimeProblem


def write_config(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


###############################################################################
# Config grammar
###############################################################################


def test_parse_config_reads_comments_brackets_and_dotted_keys(tmp_path):
    path = write_config(tmp_path, """
        # full-line comment
        problem = mintime
        seed = 3            # trailing comment
        training.epochs = 77
        training.learning_rate = 1e-3
        mintime.x0 = [1.5, -0.25]
        mintime.horizon = 4.0
    """)
    cfg = parse_config(path)
    assert cfg.problem == "mintime"
    assert cfg.seed == 3 and cfg.training.seed == 3
    assert cfg.training.epochs == 77
    assert cfg.training.learning_rate == pytest.approx(1e-3)
    assert cfg.param("x0") == (1.5, -0.25)
    assert cfg.param("horizon") == pytest.approx(4.0)


def test_parse_config_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        parse_config("/nonexistent/run.cfg")


def test_parse_config_line_without_equals(tmp_path):
    path = write_config(tmp_path, "problem = kalman\njust words\n")
    with pytest.raises(ConfigError, match=":2"):
        parse_config(path)


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError, match="duplicate key 'seed'"):
        config_from_pairs([("problem", "kalman"), ("seed", 1), ("seed", 2)])


def test_missing_problem_rejected():
    with pytest.raises(ConfigError, match="missing required key 'problem'"):
        config_from_pairs([("seed", 1)])


def test_unknown_problem_lists_choices():
    with pytest.raises(ConfigError, match="geodesic-hypar"):
        config_from_pairs([("problem", "pendulum")])


def test_unknown_key_names_the_offender():
    with pytest.raises(ConfigError, match="unknown key 'kalman.Z'"):
        config_from_pairs([("problem", "kalman"), ("kalman.Z", 1)])


def test_key_from_another_problem_section_rejected():
    with pytest.raises(ConfigError, match="unknown key 'mintime.x0'"):
        config_from_pairs([("problem", "kalman"), ("mintime.x0", [1, 0])])


def test_negative_seed_rejected():
    with pytest.raises(ConfigError, match="seed"):
        config_from_pairs([("problem", "kalman"), ("seed", -1)])


def test_training_validation_errors():
    with pytest.raises(ConfigError, match="training.epochs"):
        config_from_pairs([("problem", "kalman"), ("training.epochs", 0)])
    with pytest.raises(ConfigError, match="training.learning_rate"):
        config_from_pairs([("problem", "kalman"), ("training.learning_rate", -0.1)])
    with pytest.raises(ConfigError, match="unknown optimizer 'lbfgs'"):
        config_from_pairs([("problem", "kalman"), ("training.optimizer", "lbfgs")])


def test_defaults_per_problem():
    cfg = config_from_pairs([("problem", "geodesic-sphere")])
    assert cfg.output_dir == os.path.join("runs", "geodesic-sphere")
    assert cfg.training.points_per_epoch == 512
    assert cfg.thresholds["max_f"] == pytest.approx(1e-2)
    assert cfg.thresholds["transversality_angle_deg"] == pytest.approx(5.0)
    hypar = config_from_pairs([("problem", "geodesic-hypar")])
    assert "transversality_angle_deg" not in hypar.thresholds
    assert hypar.thresholds["cauchy_schwarz_slack"] == pytest.approx(1e-9)


def test_threshold_override_and_unknown_threshold():
    cfg = config_from_pairs([("problem", "kalman"), ("thresholds.trace_rel_error", 0.5)])
    assert cfg.thresholds["trace_rel_error"] == pytest.approx(0.5)
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_pairs([("problem", "kalman"), ("thresholds.banana", 0.5)])


def test_kalman_matrix_shape_errors():
    with pytest.raises(ConfigError, match="square matrix"):
        config_from_pairs([("problem", "kalman"), ("kalman.Q", [1, 2, 3])])
    with pytest.raises(ConfigError, match="do not split into"):
        config_from_pairs([("problem", "kalman"), ("kalman.B", [1, 2, 3])])
    with pytest.raises(ConfigError, match="kalman.C"):
        config_from_pairs([("problem", "kalman"), ("kalman.C", [1, 2, 3])])


def test_kalman_system_validation_is_rethrown_as_config_error():
    asym = [1, 1, 0, 0, 1, 0, 0, 0, 1]
    with pytest.raises(ConfigError, match="symmetric"):
        config_from_pairs([
            ("problem", "kalman"),
            ("kalman.A", [0] * 9), ("kalman.B", [1, 0, 0, 0, 1, 0, 0, 0, 1]),
            ("kalman.C", [1, 0, 0]), ("kalman.Q", asym),
            ("kalman.R", [1.0]), ("kalman.sigma0", [1, 0, 0, 0, 1, 0, 0, 0, 1]),
        ])


def test_geodesic_point_length_and_hidden_validation():
    with pytest.raises(ConfigError, match="expected 3 numbers"):
        config_from_pairs([("problem", "geodesic-hypar"), ("geodesic.p1", [1, 0])])
    with pytest.raises(ConfigError, match="integer list"):
        config_from_pairs([("problem", "geodesic-sphere"), ("geodesic.hidden", 1.5)])
    cfg = config_from_pairs([("problem", "geodesic-sphere"), ("geodesic.hidden", [24, 24])])
    assert cfg.param("hidden") == (24, 24)
    single = config_from_pairs([("problem", "geodesic-sphere"), ("geodesic.hidden", 16)])
    assert single.param("hidden") == (16,)


def test_mintime_positivity_checks():
    with pytest.raises(ConfigError, match="horizon"):
        config_from_pairs([("problem", "mintime"), ("mintime.horizon", -3)])
    with pytest.raises(ConfigError, match="eps"):
        config_from_pairs([("problem", "mintime"), ("mintime.eps", 0)])


def test_serialize_config_round_trips(tmp_path):
    cfg = config_from_pairs([
        ("problem", "kalman"),
        ("seed", 5),
        ("training.epochs", 123),
        ("training.optimizer", "adam"),
        ("kalman.Q", [2, 0, 0, 2]),  # 2x2 system via explicit matrices
        ("kalman.A", [0, 1, 0, 0]),
        ("kalman.B", [1, 0, 0, 1]),
        ("kalman.C", [1, 0]),
        ("kalman.R", [1.0]),
        ("kalman.sigma0", [1, 0, 0, 1]),
        ("kalman.T", 2.5),
        ("thresholds.gain_rel_error", 0.25),
    ])
    back = parse_config(write_config(tmp_path, serialize_config(cfg)))
    assert back.problem == cfg.problem and back.seed == cfg.seed
    assert back.training == cfg.training
    assert back.thresholds == cfg.thresholds
    for name in ("A", "B", "C", "Q", "R", "sigma0"):
        assert np.array_equal(getattr(back.param("system"), name),
                              getattr(cfg.param("system"), name))
    assert back.param("system").T == cfg.param("system").T


def test_serialize_config_omits_defaults():
    text = serialize_config(config_from_pairs([("problem", "mintime")]))
    assert "training." not in text and "thresholds." not in text
    assert text.splitlines()[0] == "problem = mintime"


###############################################################################
# Trajectory CSV and JSON helpers
###############################################################################


def test_export_trajectory_round_trip_is_bit_exact(tmp_path):
    rows = np.random.default_rng(0).normal(size=(17, 4))
    rows[0, 0] = 1.0 / 3.0
    path = str(tmp_path / "t.csv")
    export_trajectory(rows, ["a", "b", "c", "d"], path)
    header, back = read_trajectory(path)
    assert header == ["a", "b", "c", "d"]
    assert np.array_equal(back, rows)


def test_export_trajectory_empty_rows_writes_header_only(tmp_path):
    path = str(tmp_path / "empty.csv")
    export_trajectory(np.zeros((0, 3)), ["t", "x", "y"], path)
    header, back = read_trajectory(path)
    assert header == ["t", "x", "y"]
    assert back.shape == (0, 3)


def test_export_trajectory_header_width_mismatch(tmp_path):
    with pytest.raises(ValueError, match="column names"):
        export_trajectory(np.zeros((2, 3)), ["a", "b"], str(tmp_path / "x.csv"))


def test_export_trajectory_unwritable_path(tmp_path):
    from calvnet.cli import IoError

    with pytest.raises(IoError, match="cannot write"):
        export_trajectory(np.zeros((1, 1)), ["a"], str(tmp_path))


def test_matrix_names_are_row_major():
    assert _matrix_names("g", 2, 2) == ["g_11", "g_12", "g_21", "g_22"]


def test_jsonable_handles_numpy_types():
    blob = _jsonable({
        "arr": np.arange(3.0),
        "flag": np.bool_(True),
        "count": np.int64(4),
        "x": np.float32(0.5),
        "nested": [np.float64(1.5), {"k": np.array([[1, 2]])}],
    })
    text = json.dumps(blob)
    assert json.loads(text) == {
        "arr": [0.0, 1.0, 2.0], "flag": True, "count": 4, "x": 0.5,
        "nested": [1.5, {"k": [[1, 2]]}],
    }


def test_relative_error_guards_zero_oracle():
    assert relative_error(3.0, 2.0) == pytest.approx(0.5)
    assert relative_error(1e-6, 0.0) == pytest.approx(1e6)


def test_metrics_report_json_is_deterministic_and_strict_aware():
    report = MetricsReport(
        problem="kalman", headline_metric="tr_sigma_T",
        headline_value=6.1, oracle_value=6.0,
        residuals={"psi1": np.float64(1e-4)}, metrics={"extra": 1},
        thresholds={"trace_rel_error": 0.02}, warnings=["soft"],
    )
    assert report.relative_error == pytest.approx(0.1 / 6.0)
    assert report.passed(strict=False) and not report.passed(strict=True)
    assert report.to_json() == report.to_json()
    parsed = json.loads(report.to_json())
    assert parsed["relative_error"] == pytest.approx(0.1 / 6.0)
    assert parsed["warnings"] == ["soft"]
    report.failures.append("trace_rel_error = 1 exceeds 0.02")
    assert not report.passed(strict=False)


###############################################################################
# Problem construction
###############################################################################


def test_build_problem_dispatch():
    kal = build_problem(config_from_pairs(
        [("problem", "kalman"), ("kalman.hidden", [8, 8]),
         ("training.points_per_epoch", 16)]))
    assert isinstance(kal, KalmanProblem) and kal.n_points == 16

    mt = build_problem(config_from_pairs(
        [("problem", "mintime"), ("mintime.hidden", [8, 8]),
         ("mintime.x0", [2.0, 0.5]), ("training.points_per_epoch", 16)]))
    assert isinstance(mt, MinTimeProblem)
    assert mt.x_init == pytest.approx((2.0, 0.5))

    sphere = build_problem(config_from_pairs(
        [("problem", "geodesic-sphere"), ("geodesic.hidden", [8, 8]),
         ("training.points_per_epoch", 16)]))
    assert isinstance(sphere, GeodesicProblem) and sphere.spec.p1 is None

    hypar = build_problem(config_from_pairs(
        [("problem", "geodesic-hypar"), ("geodesic.hidden", [8, 8]),
         ("training.points_per_epoch", 16)]))
    assert isinstance(hypar, GeodesicProblem)
    assert hypar.spec.p1 == pytest.approx((-1.0, 1.0, 0.0))


###############################################################################
# Entry point and subcommands
###############################################################################


def test_main_bad_config_exits_3(tmp_path, capsys):
    assert main(["train", str(tmp_path / "missing.cfg")]) == 3
    path = write_config(tmp_path, "problem = kalman\nkalman.Z = 1\n")
    assert main(["train", path]) == 3
    err = capsys.readouterr().err
    assert "config error" in err and "kalman.Z" in err


def test_main_unknown_subcommand_exits_3(capsys):
    assert main(["paint"]) == 3
    assert "config error" in capsys.readouterr().err


def test_eval_missing_checkpoint_exits_3(tmp_path, capsys):
    path = write_config(tmp_path, "problem = kalman\n")
    code = main(["eval", path, str(tmp_path / "none.bin"),
                 "--output-dir", str(tmp_path / "out")])
    assert code == 3
    assert "checkpoint not found" in capsys.readouterr().err


def test_oracle_subcommand_writes_reference_csv(tmp_path, capsys):
    path = write_config(tmp_path, "problem = mintime\n")
    out = tmp_path / "oracle-out"
    assert main(["oracle", path, "--output-dir", str(out)]) == 0
    header, rows = read_trajectory(str(out / "oracle.csv"))
    assert header == ["t", "x1", "x2", "lam1", "lam2", "u"]
    assert rows.shape == (501, 6)
    assert rows[-1, 0] == pytest.approx(2.0)  # analytic minimum time
    assert np.all(np.abs(rows[:, 5]) == pytest.approx(1.0))
    assert "t_f = 2.000000" in capsys.readouterr().out


def test_oracle_subcommand_geodesic_reports_length(tmp_path, capsys):
    path = write_config(tmp_path, """
        problem = geodesic-hypar
        geodesic.oracle_segments = 32
        geodesic.oracle_iters = 2000
    """)
    out = tmp_path / "hypar-out"
    assert main(["oracle", path, "--output-dir", str(out)]) == 0
    header, rows = read_trajectory(str(out / "oracle.csv"))
    assert header == ["s", "gamma1", "gamma2", "gamma3", "f_gamma"]
    assert np.max(np.abs(rows[:, 4])) < 1e-6  # polyline lies on the surface
    assert "reference length" in capsys.readouterr().out


def test_train_writes_all_artifacts_and_is_deterministic(tmp_path):
    path = write_config(tmp_path, """
        problem = kalman
        seed = 1
        training.epochs = 5
        training.points_per_epoch = 32
        kalman.hidden = 8 8
    """)

    def run(tag):
        out = tmp_path / tag
        code = main(["train", path, "--output-dir", str(out)])
        assert code == 1  # five epochs cannot meet the accuracy thresholds
        for name in ("config.txt", "training_log.txt", "trajectory.csv",
                     "oracle.csv", "checkpoint.bin", "metrics.json"):
            assert (out / name).exists(), name
        return json.loads((out / "metrics.json").read_text())

    first, second = run("a"), run("b")
    first.pop("wall_clock_seconds"), second.pop("wall_clock_seconds")
    assert first == second
    assert first["problem"] == "kalman"
    assert first["headline_metric"] == "tr_sigma_T"
    assert first["threshold_failures"]


def test_train_flag_overrides_land_in_the_config_echo(tmp_path):
    path = write_config(tmp_path, """
        problem = kalman
        training.epochs = 5
        training.points_per_epoch = 32
        kalman.hidden = 8 8
    """)
    out = tmp_path / "echo"
    main(["train", path, "--seed", "7", "--epochs", "3", "--output-dir", str(out)])
    echo = (out / "config.txt").read_text()
    assert "seed = 7" in echo
    assert "training.epochs = 3" in echo
    reparsed = parse_config(str(out / "config.txt"))
    assert reparsed.seed == 7 and reparsed.training.epochs == 3


def test_eval_reloads_a_checkpoint_and_reproduces_metrics(tmp_path):
    path = write_config(tmp_path, """
        problem = kalman
        seed = 1
        training.epochs = 5
        training.points_per_epoch = 32
        kalman.hidden = 8 8
    """)
    out = tmp_path / "train-out"
    main(["train", path, "--output-dir", str(out)])
    evaldir = tmp_path / "eval-out"
    code = main(["eval", path, str(out / "checkpoint.bin"),
                 "--output-dir", str(evaldir), "--dump-oracle"])
    assert code == 1
    trained = json.loads((out / "metrics.json").read_text())
    reloaded = json.loads((evaldir / "metrics.json").read_text())
    assert reloaded["headline_value"] == trained["headline_value"]
    assert reloaded["residuals"] == trained["residuals"]
    assert (evaldir / "oracle.csv").exists()


def test_eval_rejects_checkpoint_from_another_problem(tmp_path, capsys):
    kal = write_config(tmp_path, """
        problem = kalman
        training.epochs = 2
        training.points_per_epoch = 16
        kalman.hidden = 8 8
    """)
    out = tmp_path / "kal"
    main(["train", kal, "--output-dir", str(out)])
    sphere = write_config(tmp_path, """
        problem = geodesic-sphere
        training.epochs = 2
        training.points_per_epoch = 16
        geodesic.hidden = 8 8
    """, name="sphere.cfg")
    code = main(["eval", sphere, str(out / "checkpoint.bin"),
                 "--output-dir", str(tmp_path / "cross")])
    assert code == 3
    assert "checkpoint error" in capsys.readouterr().err


def test_check_subcommand_passes(capsys):
    assert main(["check"]) == 0
    out = capsys.readouterr().out
    assert "all 8 checks passed" in out
    assert out.count("ok  ") == 8


def test_thread_cap_env_var(monkeypatch):
    from calvnet.cli import _apply_thread_cap

    monkeypatch.setenv("CALVNET_THREADS", "2")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    _apply_thread_cap()
    assert os.environ["OPENBLAS_NUM_THREADS"] == "2"
    assert os.environ["OMP_NUM_THREADS"] == "2"
    monkeypatch.setenv("CALVNET_THREADS", "")
    monkeypatch.setenv("OMP_NUM_THREADS", "5")
    _apply_thread_cap()
    assert os.environ["OMP_NUM_THREADS"] == "5"  # empty cap leaves things alone
