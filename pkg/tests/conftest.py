from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DESK_CFG = ROOT / "configs" / "desk.cfg"

SMALL_CFG = """\
schema_version: 1
run_id: small
seed: 3
dataset:
  per_client: 4
  holdout_per_class: 2
  image_size: 32
model:
  preset: tiny
  overrides: {image_size: 32, dtype: float32}
fl:
  num_clients: 2
  rounds: 3
  local_epochs: 1
  batch_size: 2
  learning_rate: 0.1
  eval_interval: 1
  checkpoint_interval: 2
attack:
  member_classes: [metal/coarse, diffusion/coarse]
  guide_classes: [metal/coarse, diffusion/coarse]
  lambda_dummy: [0, 5]
  targets_per_class: 2
  target_round: 3
  gia: {iterations: 8, log_interval: 4}
eval:
  pooling: per_cell
"""


@pytest.fixture
def small_cfg(tmp_path, monkeypatch):
    monkeypatch.setenv("DECIFR_RUNS_DIR", str(tmp_path / "runs"))
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CFG)
    return path


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    return tmp_path_factory.mktemp("desk_runs")


@pytest.fixture(scope="session")
def desk_run(desk_root):
    """The full desk-preset pipeline (about 20 minutes on one CPU core)."""
    from decifr import pipeline

    return pipeline.run_all(DESK_CFG, root=desk_root / "first")


@pytest.fixture(scope="session")
def desk_run_repeat(desk_root, desk_run):
    from decifr import pipeline

    return pipeline.run_all(DESK_CFG, root=desk_root / "second")


@pytest.fixture
def announce(capsys):
    """Print a line straight to the terminal, bypassing capture."""

    def _say(line: str) -> None:
        with capsys.disabled():
            print(f"\n{line}", flush=True)

    return _say
