import pytest

from ccem.config import ExperimentConfig

TINY = {
    "env.name": "pointmass-sparse",
    "env.episode_length": 40,
    "env.action_repeat": 2,
    "model.latent_dim": 6,
    "model.hidden_dims": [16],
    "model.inverse_hidden_dims": [16],
    "model.action_hidden_dims": [8],
    "model.action_latent_dim": 4,
    "cem.horizon": 3,
    "cem.population": 16,
    "cem.elites": 4,
    "cem.iterations": 2,
    "train.total_env_steps": 200,
    "train.seed_steps": 80,
    "train.batch_size": 8,
    "train.traj_len": 3,
    "train.updates_per_episode": 4,
    "train.eval_every": 120,
    "train.eval_episodes": 2,
    "seeds": [0, 1],
}


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig().override(TINY)


def pytest_terminal_summary(terminalreporter):
    # repeat the per-criterion PASS/FAIL lines, which are captured during the run
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [ln for ln in rep.capstdout.splitlines() if ln.startswith("[criterion")]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines):
            terminalreporter.write_line(ln)
