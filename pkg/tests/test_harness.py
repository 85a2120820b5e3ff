"""
Tests for the experiment harness and the command-line application
"""
import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import yaml

from app import main
from config.settings import OUTPUT_DIR_ENV_VAR, SEED_ENV_VAR, TRAINING_LOG_COLUMNS
from src.cascade import assemble, init_attribute_module, init_base_stack
from src.checkpoint import load_checkpoint, save_checkpoint
from src.envs import AttributeKind, AttributeSpec, EnvInstance
from src.errors import CheckpointError, ConfigurationError, EnvironmentFault, TrainingError
from src.harness import (
    EvalReport,
    compare_baseline,
    evaluate,
    exit_code_for,
    inspect_checkpoint,
    run,
    run_evaluation,
)
from src.experiment_config import parse_experiment
from src.rlcore import TrainingLogRow

ENVIRONMENT = {
    "agent": "ball",
    "horizon": 20,
    "attributes": [{"kind": "reaching"}, {"kind": "obstacle", "params": {"fraction": 0.5}}],
}
TINY_RL = {"iterations": 1, "horizon": 32, "epochs": 1, "minibatch_size": 16}


@pytest.fixture(autouse=True)
def clean_overrides(monkeypatch):
    monkeypatch.delenv(SEED_ENV_VAR, raising=False)
    monkeypatch.delenv(OUTPUT_DIR_ENV_VAR, raising=False)


def write_config(path, **document):
    path.write_text(yaml.safe_dump(document), encoding="utf-8")
    return path


class TestEvaluate:
    """Test cases for stack evaluation"""

    def setup_method(self):
        """Setup test fixtures"""
        self.env = EnvInstance(horizon=15, attributes=(
            AttributeSpec(AttributeKind.REACHING),
            AttributeSpec(AttributeKind.OBSTACLE),
        ))
        rng = np.random.default_rng(0)
        self.base = init_base_stack(self.env, rng, hidden_sizes=(8,))
        module, _ = init_attribute_module(self.base, self.env.attribute("obstacle"), self.env, rng, hidden_sizes=(8,))
        self.stack = assemble(self.base, [module])

    def test_report_contents(self):
        """Test counts and per-attribute keys of a report"""
        report = evaluate(self.stack, self.env, episodes=3, seed=1, random_level=1.0)

        assert report.episodes == 3
        assert 0 <= report.successes <= 3
        assert 1.0 <= report.mean_episode_length <= 15.0
        assert set(report.mean_components) == {"reaching", "obstacle"}
        assert set(report.violations) == {"obstacle"}
        assert set(report.mean_compensation_norms) == {"obstacle"}
        assert report.mean_return == pytest.approx(sum(report.mean_components.values()))

    def test_same_seed_same_report(self):
        """Test that evaluation is deterministic for a seed"""
        first = evaluate(self.stack, self.env, episodes=2, seed=5, random_level=0.5)
        second = evaluate(self.stack, self.env, episodes=2, seed=5, random_level=0.5)

        assert first == second

    def test_zero_episodes(self):
        """Test that no episodes gives an undefined success rate"""
        report = evaluate(self.stack, self.env, episodes=0, seed=0)

        assert report.success_rate == 0.0
        assert not report.success_rate_defined
        assert report.mean_return == 0.0

    def test_fixed_start(self):
        """Test evaluation from the configured start point"""
        report = evaluate(self.base, self.env, episodes=1, seed=0, random_level=0.0)

        assert report.episodes == 1
        assert report.mean_compensation_norms == {}

    def test_terminal_level_is_the_default_level(self):
        """Test that no random level evaluates at the given terminal level"""
        implicit = evaluate(self.stack, self.env, episodes=2, seed=3, terminal_level=0.5)
        explicit = evaluate(self.stack, self.env, episodes=2, seed=3, random_level=0.5)

        assert implicit == explicit

    def test_environment_must_hold_module_attributes(self):
        """Test that a module whose attribute is missing is rejected"""
        bare = EnvInstance(horizon=15)

        with pytest.raises(ConfigurationError):
            evaluate(self.stack, bare, episodes=1, seed=0)

    def test_success_rate(self):
        """Test the derived success rate"""
        assert EvalReport(episodes=4, successes=1).success_rate == 0.25


class TestExitCodes:
    """Test cases for the error to exit code mapping"""

    @pytest.mark.parametrize("exc, code", [
        (ConfigurationError("bad"), 2),
        (TrainingError("nan", iteration=3), 3),
        (EnvironmentFault("nan", step=4), 3),
        (CheckpointError("cut", offset=9), 4),
        (OSError("disk full"), 4),
    ])
    def test_exit_code_for(self, exc, code):
        """Test every error family"""
        assert exit_code_for(exc) == code


class TestRun:
    """Test cases for running experiment files"""

    def test_missing_config(self, tmp_path):
        """Test exit code 2 for an absent file"""
        assert run(tmp_path / "absent.yaml") == 2

    def test_unexpected_kind(self, tmp_path):
        """Test that compare rejects other experiment kinds"""
        path = write_config(tmp_path / "base.yaml", experiment="train_base", rl={"iterations": 0})

        assert run(path, expected_kind="compare_baseline") == 2

    def test_train_base_without_iterations(self, tmp_path):
        """Test a zero-iteration run: checkpoint, header-only log, no evaluation"""
        path = write_config(
            tmp_path / "base.yaml",
            experiment="train_base",
            environment=ENVIRONMENT,
            rl={"iterations": 0},
            evaluation={"episodes": 0},
            paths={"output_dir": str(tmp_path / "out")},
        )

        assert run(path) == 0
        log_df = pd.read_csv(tmp_path / "out" / "training_log.csv")
        assert log_df.empty
        assert list(log_df.columns) == TRAINING_LOG_COLUMNS
        assert not (tmp_path / "out" / "eval_report.csv").exists()
        stack = load_checkpoint(tmp_path / "out" / "base.ckpt")
        assert [spec.name for spec in stack.base_specs] == ["reaching"]

    def test_unreadable_base_checkpoint(self, tmp_path):
        """Test exit code 4 for a corrupt base checkpoint"""
        base = tmp_path / "base.ckpt"
        base.write_bytes(b"garbage")
        path = write_config(
            tmp_path / "attr.yaml",
            experiment="train_attribute",
            environment=ENVIRONMENT,
            cascade={"attribute": "obstacle"},
            paths={"output_dir": str(tmp_path / "out"), "base_checkpoint": str(base)},
        )

        assert run(path) == 4

    def test_training_fault_keeps_partial_log(self, tmp_path, mocker):
        """Test exit code 3 and the rows logged before the fault"""
        row = TrainingLogRow(0, 1.0, 1.0, 0.0, 0.0, 0.1, 0.5, 0.01)

        def failing_train(*args, hooks=(), **kwargs):
            for hook in hooks:
                hook(row)
            raise TrainingError("non-finite loss", iteration=1)

        mocker.patch("src.harness.train", side_effect=failing_train)
        path = write_config(
            tmp_path / "base.yaml",
            experiment="train_base",
            environment=ENVIRONMENT,
            paths={"output_dir": str(tmp_path / "out")},
        )

        assert run(path) == 3
        assert len(pd.read_csv(tmp_path / "out" / "training_log.csv")) == 1


@pytest.mark.integration
class TestExperimentPipeline:
    """Test cases for base training, module training and assembly on tiny budgets"""

    def test_base_module_assembly(self, tmp_path):
        """Test the three experiment kinds chained through their checkpoints"""
        base_path = write_config(
            tmp_path / "base.yaml",
            experiment="train_base",
            environment=ENVIRONMENT,
            rl=TINY_RL,
            evaluation={"episodes": 2, "random_level": 1.0},
            paths={"output_dir": str(tmp_path / "base")},
        )
        assert run(base_path) == 0
        assert len(pd.read_csv(tmp_path / "base" / "training_log.csv")) == 1
        assert (tmp_path / "base" / "eval_report.csv").exists()

        attr_path = write_config(
            tmp_path / "attr.yaml",
            experiment="train_attribute",
            environment=ENVIRONMENT,
            rl=TINY_RL,
            cascade={"attribute": "obstacle"},
            evaluation={"episodes": 2, "random_level": 1.0},
            paths={"output_dir": str(tmp_path / "attr"), "base_checkpoint": str(tmp_path / "base" / "base.ckpt")},
        )
        assert run(attr_path) == 0
        module = load_checkpoint(tmp_path / "attr" / "module_obstacle.ckpt")
        assert module.trained

        assemble_path = write_config(
            tmp_path / "assemble.yaml",
            experiment="assemble_eval",
            environment=ENVIRONMENT,
            evaluation={"episodes": 2},
            paths={
                "output_dir": str(tmp_path / "assembled"),
                "base_checkpoint": str(tmp_path / "base" / "base.ckpt"),
                "module_checkpoints": [str(tmp_path / "attr" / "module_obstacle.ckpt")],
            },
        )
        assert run(assemble_path) == 0
        report = pd.read_csv(tmp_path / "assembled" / "eval_report.csv")
        assert "mean_compensation_norm" in set(report["metric"])

    def test_training_log_is_deterministic(self, tmp_path):
        """Test byte-identical logs for two runs with the same seed"""
        for name in ("first", "second"):
            path = write_config(
                tmp_path / f"{name}.yaml",
                experiment="train_base",
                seed=4,
                environment=ENVIRONMENT,
                rl=TINY_RL,
                evaluation={"episodes": 0},
                paths={"output_dir": str(tmp_path / name)},
            )
            assert run(path) == 0

        first = (tmp_path / "first" / "training_log.csv").read_bytes()
        assert first == (tmp_path / "second" / "training_log.csv").read_bytes()
        assert (tmp_path / "first" / "base.ckpt").read_bytes() == (tmp_path / "second" / "base.ckpt").read_bytes()


class TestCompareBaseline:
    """Test cases for the comparison harness with stubbed arms"""

    def setup_method(self):
        """Setup test fixtures"""
        self.env = parse_experiment({"experiment": "train_base", "environment": ENVIRONMENT}).env
        self.base = init_base_stack(self.env.with_attributes([self.env.base]), np.random.default_rng(0), hidden_sizes=(8,))

    def make_config(self, tmp_path, arms):
        base_path = save_checkpoint(self.base, tmp_path / "base.ckpt")
        return parse_experiment({
            "experiment": "compare_baseline",
            "environment": ENVIRONMENT,
            "cascade": {"attribute": "obstacle"},
            "curriculum": {"initial_level": 0.5, "terminal_level": 1.0},
            "compare": {"arms": arms},
            "paths": {"output_dir": str(tmp_path / "out"), "base_checkpoint": str(base_path)},
        })

    def stub_arm(self, arm, config, base):
        if arm == "baseline_rcl":
            raise TrainingError("diverged", iteration=0)
        levels = {"calnet_cl": [0.5, 1.0], "baseline_cl": [0.5, 0.6, 0.72, 1.0]}[arm]
        log_df = pd.DataFrame({
            "iteration": range(len(levels)),
            "mean_episode_reward": [0.0] * len(levels),
            "random_level": levels,
        })
        return log_df, 128, base

    def test_failed_arm_is_reported(self, tmp_path, mocker):
        """Test that one failing arm leaves the others and the tables intact"""
        mocker.patch("src.harness._run_arm", side_effect=self.stub_arm)
        config = self.make_config(tmp_path, ["calnet_cl", "baseline_cl", "baseline_rcl"])

        summary = compare_baseline(config).set_index("arm")

        assert summary.loc["calnet_cl", "status"] == "ok"
        assert summary.loc["baseline_rcl", "status"].startswith("failed")
        assert summary.loc["baseline_cl", "speedup_of_calnet"] == 2.0
        out = tmp_path / "out" / "compare"
        assert (out / "comparison.csv").exists()
        assert (out / "comparison_summary.csv").exists()
        assert (out / "calnet_cl.ckpt").exists()
        assert not (out / "baseline_rcl.ckpt").exists()

    def test_parallel_arms_match_sequential(self, tmp_path, mocker):
        """Test that the thread pool keeps the arm order"""
        mocker.patch("src.harness._run_arm", side_effect=self.stub_arm)
        sequential = compare_baseline(self.make_config(tmp_path / "seq", ["calnet_cl", "baseline_cl"]))
        config = self.make_config(tmp_path / "par", ["calnet_cl", "baseline_cl"])
        parallel = compare_baseline(replace(config, compare=replace(config.compare, parallel=True)))

        pd.testing.assert_frame_equal(sequential, parallel)

    def test_reaching_attribute_rejected(self, tmp_path):
        """Test that the base attribute cannot be compared against itself"""
        config = self.make_config(tmp_path, ["calnet_cl"])
        config = replace(config, cascade=replace(config.cascade, attribute="reaching"))

        with pytest.raises(ConfigurationError):
            compare_baseline(config)


class TestCommandLine:
    """Test cases for the calnet command"""

    def setup_method(self):
        """Setup test fixtures"""
        self.env = EnvInstance(horizon=10)
        self.base = init_base_stack(self.env, np.random.default_rng(0), hidden_sizes=(8,))

    def test_usage_error(self):
        """Test that a missing command exits with code 2"""
        assert main([]) == 2

    def test_help(self, capsys):
        """Test that --help exits cleanly"""
        assert main(["--help"]) == 0
        assert "calnet" in capsys.readouterr().out

    def test_run_missing_config(self, tmp_path):
        """Test the run command on an absent file"""
        assert main(["run", str(tmp_path / "absent.yaml")]) == 2

    def test_run_with_missing_prefix_module(self, tmp_path):
        """Test exit code 2 when a module to stack behind does not exist"""
        base = tmp_path / "base.ckpt"
        base.write_bytes(b"")
        config = write_config(
            tmp_path / "attribute.yaml",
            experiment="train_attribute",
            environment=ENVIRONMENT,
            cascade={"attribute": "obstacle"},
            paths={"base_checkpoint": str(base), "module_checkpoints": [str(tmp_path / "gone.ckpt")]},
        )

        assert main(["run", str(config)]) == 2

    def test_inspect(self, tmp_path, capsys):
        """Test that inspect prints metadata and tensor shapes as JSON"""
        path = save_checkpoint(self.base, tmp_path / "base.ckpt")

        assert main(["inspect", str(path)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["metadata"]["object"] == "stack"
        assert printed == json.loads(json.dumps(inspect_checkpoint(path)))

    def test_inspect_missing_file(self, tmp_path):
        """Test exit code 4 for an absent checkpoint"""
        assert main(["inspect", str(tmp_path / "absent.ckpt")]) == 4

    def test_eval(self, tmp_path, capsys):
        """Test evaluation from checkpoints and an environment file"""
        path = save_checkpoint(self.base, tmp_path / "base.ckpt")
        env_path = write_config(tmp_path / "env.yaml", environment={"horizon": 10})
        out = tmp_path / "report.csv"

        code = main([
            "eval", "--stack", str(path), "--env", str(env_path),
            "--episodes", "2", "--level", "0.5", "--out", str(out),
        ])

        assert code == 0
        assert "success rate" in capsys.readouterr().out
        report = pd.read_csv(out)
        assert report.loc[report["metric"] == "episodes", "value"].iloc[0] == 2.0

    def test_eval_uses_configured_terminal_level(self, tmp_path, mocker):
        """Test that eval passes the file's curriculum terminal level on"""
        evaluation = mocker.patch("app.run_evaluation", return_value=EvalReport(episodes=1, successes=1))
        path = save_checkpoint(self.base, tmp_path / "base.ckpt")
        env_path = write_config(
            tmp_path / "env.yaml", environment={"horizon": 10}, curriculum={"terminal_level": 2.5}
        )

        assert main(["eval", "--stack", str(path), "--env", str(env_path), "--episodes", "1"]) == 0
        assert evaluation.call_args.kwargs["terminal_level"] == 2.5

    def test_eval_finetune_not_implemented(self, tmp_path):
        """Test that --finetune is a configuration error"""
        path = save_checkpoint(self.base, tmp_path / "base.ckpt")
        env_path = write_config(tmp_path / "env.yaml", environment={"horizon": 10})

        assert main(["eval", "--stack", str(path), "--env", str(env_path), "--finetune"]) == 2

    def test_eval_module_first_is_rejected(self, tmp_path):
        """Test that a module checkpoint cannot lead the stack"""
        env = EnvInstance(horizon=10, attributes=(
            AttributeSpec(AttributeKind.REACHING), AttributeSpec(AttributeKind.OBSTACLE),
        ))
        module, _ = init_attribute_module(
            self.base, env.attribute("obstacle"), env, np.random.default_rng(1), hidden_sizes=(8,)
        )
        path = save_checkpoint(module, tmp_path / "module.ckpt")

        with pytest.raises(CheckpointError):
            run_evaluation([str(path)], env, 1, 0)
