"""Session fixtures for the experiment-level tests.

Pretraining, fine-tuning and each experiment run once per session from the
shipped configs; the acceptance tests read their results and wall-clock
times. Each acceptance test adds one line to ``ACCEPTANCE_LINES`` which is
printed in the terminal summary.
"""
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from cmaml_mppi import report
from cmaml_mppi.cli import finetune_model, pretrain_model
from cmaml_mppi.config import load_config
from cmaml_mppi.experiments import ReadaptConfig, record_log, run_control, run_inference, run_readaptation

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ACCEPTANCE_LINES = []


@dataclass
class Timed:
    value: object
    seconds: float


def timed(fn, *args, **kwargs) -> Timed:
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return Timed(out, time.perf_counter() - t0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def exp_config(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return load_config([CONFIGS / "method_defaults.yaml", CONFIGS / "plumbing_defaults.yaml"],
                       {"experiment": {"output_dir": str(out)}})


@pytest.fixture(scope="session")
def pretrained(exp_config):
    """Timed (model, info) from the full cement pretraining."""
    return timed(pretrain_model, exp_config)


@pytest.fixture(scope="session")
def finetuned(exp_config, pretrained):
    return timed(finetune_model, exp_config, pretrained.value[0])


def _inference(cfg, model):
    logs = {s: record_log(cfg, model, s).trajectory for s in cfg.experiment.inference_seeds}
    summary, replays = run_inference(cfg, model, logs)
    return summary, replays, logs


@pytest.fixture(scope="session")
def inference(exp_config, finetuned):
    """Timed (summary, replays, logs): record one drive log per seed, then replay all modes."""
    return timed(_inference, exp_config, finetuned.value)


@pytest.fixture(scope="session")
def control(exp_config, finetuned):
    return timed(run_control, exp_config, finetuned.value)


@pytest.fixture(scope="session")
def readapt(exp_config, finetuned):
    return timed(run_readaptation, exp_config, finetuned.value, exp_config.experiment.seeds, ReadaptConfig())


def json_bytes(tmp_path, name, obj) -> bytes:
    return report.write_json(tmp_path / name, obj).read_bytes()
