import numpy as np
import pytest

from oracle_distill.config import (
    RunConfig,
    config_from_mapping,
    config_to_mapping,
    load_config,
    parse_config_text,
)
from oracle_distill.errors import ConfigError, ContractError
from oracle_distill.harness import (
    METRICS_HEADER,
    bound_check_suite,
    check_ctc_suite,
    evaluate,
    generate_dataset,
    grad_check_suite,
    loss_curve_svg,
    parse_metrics_csv,
    train_run,
)
from oracle_distill.models import load_checkpoint
from oracle_distill.objectives import TrainConfig
from oracle_distill.tasks import split_examples


def tiny_cfg(**kw):
    base = dict(task="ctc", steps=12, n_examples=80, eval_every=6,
                checkpoint_every=6, seed=0)
    base.update(kw)
    return RunConfig(**base)


class TestConfigFormat:
    def test_parse_roundtrip(self):
        text = """
        # a comment
        task = ctc
        steps = 25
        alpha = 1.5
        use_teacher = true
        """
        cfg = parse_config_text(text)
        assert cfg.task == "ctc" and cfg.steps == 25 and cfg.alpha == 1.5
        assert cfg.use_teacher is True

    def test_unknown_key_is_listed(self):
        with pytest.raises(ConfigError, match="alpha_ramp"):
            parse_config_text("alpha_ramp = 2\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("steps = 2\nsteps = 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="steps"):
            parse_config_text("steps = soon\n")

    def test_invalid_semantics_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("alpha = -1\n")
        with pytest.raises(ConfigError):
            parse_config_text("task = rnnt\n")

    def test_mapping_roundtrip(self):
        cfg = tiny_cfg(alpha=3.25).resolved()
        again = config_from_mapping(config_to_mapping(cfg))
        assert config_to_mapping(again) == config_to_mapping(cfg)

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("task = aed\nsteps = 7\n")
        cfg = load_config(path)
        assert cfg.task == "aed" and cfg.steps == 7
        # aed defaults resolve differently
        assert cfg.resolved().vocab_size == 12


class TestTrainRun:
    def test_run_directory_contents(self, tmp_path):
        res = train_run(tiny_cfg(), tmp_path / "run")
        names = {p.name for p in (tmp_path / "run").iterdir()}
        assert "metrics.csv" in names and "loss_curve.svg" in names
        assert "checkpoint_final.txt" in names and "timing.csv" in names
        assert len(res.records) == 12

    def test_metrics_csv_parses_back_losslessly(self, tmp_path):
        res = train_run(tiny_cfg(), tmp_path / "run")
        rows = parse_metrics_csv(tmp_path / "run" / "metrics.csv")
        assert [r.step for r in rows] == list(range(1, 13))
        for parsed, rec in zip(rows, res.records):
            assert parsed.l_total == rec.l_total
            assert parsed.ter_student == (
                None if rec.ter_student is None else float(rec.ter_student)
            )

    def test_identical_config_and_seed_is_bit_identical(self, tmp_path):
        train_run(tiny_cfg(), tmp_path / "a")
        train_run(tiny_cfg(), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
            tmp_path / "b" / "metrics.csv"
        ).read_bytes()

    def test_different_seed_changes_metrics(self, tmp_path):
        train_run(tiny_cfg(), tmp_path / "a")
        train_run(tiny_cfg(seed=1), tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (
            tmp_path / "b" / "metrics.csv"
        ).read_bytes()

    def test_lock_file_blocks_concurrent_owner(self, tmp_path):
        out = tmp_path / "run"
        out.mkdir()
        (out / ".lock").touch()
        with pytest.raises(ContractError, match="lock"):
            train_run(tiny_cfg(), out)

    def test_lock_released_after_run(self, tmp_path):
        train_run(tiny_cfg(), tmp_path / "run")
        assert not (tmp_path / "run" / ".lock").exists()
        train_run(tiny_cfg(seed=2), tmp_path / "run")  # re-usable

    def test_checkpoint_contains_run_config(self, tmp_path):
        train_run(tiny_cfg(), tmp_path / "run")
        model, run_kv = load_checkpoint(tmp_path / "run" / "checkpoint_final.txt")
        assert run_kv["task"] == "ctc" and run_kv["steps"] == "12"
        cfg = config_from_mapping(run_kv)
        assert cfg.steps == 12

    def test_alpha_zero_without_teacher_is_plain_baseline(self, tmp_path):
        res = train_run(tiny_cfg(use_teacher=False, alpha=0.0), tmp_path / "run")
        for r in res.records:
            assert r.l_em == 0.0 and r.l_kd == 0.0
            assert r.l_total == r.l_org


class TestEvaluate:
    @pytest.fixture(scope="class")
    def trained(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("eval-run")
        cfg = tiny_cfg(steps=30, eval_every=30)
        res = train_run(cfg, out)
        dataset = generate_dataset(cfg)
        return res.model, dataset, cfg

    def test_student_mode_reads_no_aux_params_and_no_targets(self, trained):
        model, dataset, cfg = trained
        report = evaluate(model, split_examples(dataset, "dev"), "student", cfg.train_config())
        assert report["aux_param_reads_during_predict"] == 0
        assert report["target_reads_during_predict"] == 0
        assert 0.0 <= report["ter"]

    def test_teacher_mode_consumes_targets(self, trained):
        model, dataset, cfg = trained
        report = evaluate(model, split_examples(dataset, "dev"), "teacher", cfg.train_config())
        assert report["target_reads_during_predict"] > 0
        assert report["aux_param_reads_during_predict"] > 0

    def test_unknown_mode_rejected(self, trained):
        model, dataset, cfg = trained
        with pytest.raises(ContractError):
            evaluate(model, split_examples(dataset, "dev"), "oracle", cfg.train_config())


class TestSuites:
    def test_ctc_suite_passes_and_reports_deviation(self):
        report = check_ctc_suite(n_instances=25, seed=1)
        assert report.passed
        assert "max_loss_dev" in report.details
        assert float(report.details["max_loss_dev"]) <= 1e-9

    def test_corrupted_dp_fails(self):
        report = check_ctc_suite(n_instances=5, seed=1, corrupt=1e-6)
        assert not report.passed

    def test_bound_suite_small(self, tmp_path):
        csv = tmp_path / "bound.csv"
        report = bound_check_suite(n_instances=20, seed=2, csv_path=csv)
        assert report.passed
        lines = csv.read_text().splitlines()
        assert lines[0] == "loglik,bound,slack,entropy"
        assert len(lines) == 21

    def test_grad_suite_small(self):
        report = grad_check_suite(seed=3, n_ctc=5)
        assert report.passed
        assert "worst_param" in report.details


class TestSvg:
    def test_polylines_for_all_three_losses(self, tmp_path):
        res = train_run(tiny_cfg(), tmp_path / "run")
        svg = (tmp_path / "run" / "loss_curve.svg").read_text()
        assert svg.startswith("<svg")
        assert svg.count("<polyline") == 3
        for name in ("l_org", "l_em", "l_kd"):
            assert name in svg

    def test_empty_records_still_render(self):
        svg = loss_curve_svg([])
        assert svg.startswith("<svg") and svg.endswith("</svg>")


def test_metrics_header_is_versioned_contract():
    assert METRICS_HEADER == "step,l_org,l_em,l_kd,l_total,ter_student,ter_teacher,rep_ratio"
