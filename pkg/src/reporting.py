"""
Results processing module
Turns training logs, evaluation reports and comparison runs into pandas
tables and writes them as CSV
"""
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import pandas as pd

from config.settings import CSV_FLOAT_FORMAT, TRAINING_LOG_COLUMNS

logger = logging.getLogger(__name__)

EVAL_REPORT_COLUMNS: List[str] = ["metric", "subject", "value"]
COMPARISON_COLUMNS: List[str] = ["arm", "iteration", "mean_episode_reward", "random_level"]
COMPARISON_SUMMARY_COLUMNS: List[str] = [
    "arm", "status", "iterations", "terminal_iteration", "final_random_level",
    "env_steps", "speedup_of_calnet", "equal_budget",
]


class ResultsProcessor:
    """
    Builds the CSV tables of the harness
    Follows Single Responsibility Principle: no training, no file layout decisions
    """

    def training_log_frame(self, rows: Sequence) -> pd.DataFrame:
        """
        Convert training log rows to a DataFrame

        Args:
            rows: TrainingLogRow instances (or a TrainingLog)

        Returns:
            pd.DataFrame: One row per iteration, fixed column order
        """
        rows = getattr(rows, "rows", rows)
        if not rows:
            return pd.DataFrame(columns=TRAINING_LOG_COLUMNS)
        df = pd.DataFrame([asdict(row) for row in rows])
        df["iteration"] = df["iteration"].astype(int)
        return df[TRAINING_LOG_COLUMNS]

    def terminal_iteration(self, log_df: pd.DataFrame, terminal_level: float) -> float:
        """First iteration whose random level reached the terminal level (inf when never)"""
        if log_df.empty:
            return math.inf
        reached = log_df[log_df["random_level"] >= terminal_level]
        if reached.empty:
            return math.inf
        return float(reached["iteration"].iloc[0])

    def calculate_training_summary(self, log_df: pd.DataFrame, terminal_level: float) -> Dict:
        """
        Headline numbers of one training run

        Args:
            log_df: Training log frame
            terminal_level: Curriculum terminal random level

        Returns:
            Dict: iterations, best/final reward, level increases, terminal iteration
        """
        if log_df.empty:
            return {
                "iterations": 0,
                "best_reward": math.nan,
                "final_reward": math.nan,
                "final_random_level": math.nan,
                "level_increases": 0,
                "terminal_iteration": math.inf,
            }
        levels = log_df["random_level"]
        return {
            "iterations": len(log_df),
            "best_reward": float(log_df["mean_episode_reward"].max()),
            "final_reward": float(log_df["mean_episode_reward"].iloc[-1]),
            "final_random_level": float(levels.iloc[-1]),
            "level_increases": int((levels.diff() > 0).sum()),
            "terminal_iteration": self.terminal_iteration(log_df, terminal_level),
        }

    def eval_report_frame(self, report) -> pd.DataFrame:
        """
        Long-format evaluation table (metric, subject, value)

        Per-attribute rows use the attribute name as subject; compensation
        rows use the module's attribute name.
        """
        records = [
            {"metric": "episodes", "subject": "", "value": float(report.episodes)},
            {"metric": "successes", "subject": "", "value": float(report.successes)},
            {"metric": "success_rate", "subject": "", "value": report.success_rate},
            {"metric": "success_rate_defined", "subject": "", "value": float(report.success_rate_defined)},
            {"metric": "mean_return", "subject": "", "value": report.mean_return},
            {"metric": "mean_episode_length", "subject": "", "value": report.mean_episode_length},
        ]
        records += [{"metric": "mean_reward", "subject": name, "value": value}
                    for name, value in report.mean_components.items()]
        records += [{"metric": "violations", "subject": name, "value": float(count)}
                    for name, count in report.violations.items()]
        records += [{"metric": "mean_compensation_norm", "subject": name, "value": value}
                    for name, value in report.mean_compensation_norms.items()]
        return pd.DataFrame(records, columns=EVAL_REPORT_COLUMNS)

    def comparison_frame(self, arm_logs: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
        """Per-iteration reward and random level of every arm, arms in the given order"""
        frames = []
        for arm, log_df in arm_logs.items():
            if log_df.empty:
                continue
            frame = log_df[["iteration", "mean_episode_reward", "random_level"]].copy()
            frame.insert(0, "arm", arm)
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=COMPARISON_COLUMNS)
        return pd.concat(frames, ignore_index=True)[COMPARISON_COLUMNS]

    def comparison_summary(
        self,
        arm_logs: Mapping[str, pd.DataFrame],
        env_steps: Mapping[str, int],
        statuses: Mapping[str, str],
        terminal_level: float,
        reference_arm: str = "calnet_cl"
    ) -> pd.DataFrame:
        """
        One row per arm: terminal iteration, final level, budget and the
        ratio of the arm's terminal iteration to the reference arm's

        The `equal_budget` column is the same on every row: True when all
        completed arms consumed the same number of environment steps.
        """
        completed = [steps for arm, steps in env_steps.items() if statuses.get(arm) == "ok"]
        equal_budget = len(set(completed)) <= 1

        terminal = {arm: self.terminal_iteration(df, terminal_level) for arm, df in arm_logs.items()}
        reference = terminal.get(reference_arm, math.inf)

        rows = []
        for arm, log_df in arm_logs.items():
            arm_terminal = terminal[arm]
            rows.append({
                "arm": arm,
                "status": statuses.get(arm, "ok"),
                "iterations": len(log_df),
                "terminal_iteration": arm_terminal,
                "final_random_level": float(log_df["random_level"].iloc[-1]) if not log_df.empty else math.nan,
                "env_steps": int(env_steps.get(arm, 0)),
                "speedup_of_calnet": _speedup(arm_terminal, reference),
                "equal_budget": equal_budget,
            })
        if not equal_budget:
            logger.warning(f"Comparison arms consumed unequal step budgets: {dict(env_steps)}")
        return pd.DataFrame(rows, columns=COMPARISON_SUMMARY_COLUMNS)

    def write_csv(self, df: pd.DataFrame, path) -> Path:
        """Write a table with full-precision, locale-independent numbers"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
        logger.info(f"Wrote {len(df)} rows to {path}")
        return path


def _speedup(arm_terminal: float, reference_terminal: float) -> float:
    """(arm iterations to terminal) / (reference iterations to terminal)"""
    # iteration k means k + 1 iterations were run
    if math.isinf(reference_terminal):
        return math.nan
    if math.isinf(arm_terminal):
        return math.inf
    return (arm_terminal + 1.0) / (reference_terminal + 1.0)
