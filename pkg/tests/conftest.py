import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from natadv.env import CursorAssistConfig, HUMAN_OBS_DIM, ROBOT_OBS_DIM, rollout
from natadv.naturalness import CanonicalDataset
from natadv.nn import GaussianPolicy

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class ConstantPolicy:
    """Outputs the same normalised action everywhere."""

    def __init__(self, obs_dim, action=(0.0, 0.0)):
        self.obs_dim = obs_dim
        self.act_dim = 2
        self.action = np.asarray(action, dtype=np.float64)

    def act(self, obs, noise=None):
        out = np.tile(self.action, (len(obs), 1))
        return out if noise is None else out + 0.0 * noise


@pytest.fixture
def env_cfg():
    return CursorAssistConfig()


@pytest.fixture
def short_env():
    return CursorAssistConfig(horizon=10)


@pytest.fixture
def human():
    return GaussianPolicy(HUMAN_OBS_DIM, 2, hidden=(16,), rng=np.random.default_rng(1))


@pytest.fixture
def robot():
    return GaussianPolicy(ROBOT_OBS_DIM, 2, hidden=(16,), rng=np.random.default_rng(2))


@pytest.fixture
def canonical(short_env, human, robot):
    return CanonicalDataset(rollout(short_env, human, robot, 8, seed=5))


class Workflow:
    """Desk-preset pair trained once per session through the command-line entry point."""

    def __init__(self, root):
        import contextlib
        import io
        import json
        import time

        from natadv.cli import main
        from natadv.config import ExperimentConfig
        from natadv.nn import load_models
        from natadv.runstore import RunStore

        self.root = root
        self.out = str(root / "store")
        self.cfg = ExperimentConfig.from_dict({}, "desk")

        def run(*argv):
            buf = io.StringIO()
            with contextlib.redirect_stdout(buf):
                code = main(["--out", self.out, *argv])
            assert code == 0, buf.getvalue()
            return json.loads(buf.getvalue().strip().splitlines()[-1])

        t0 = time.perf_counter()
        self.coop = run("cooptimize")
        self.trained = run("train-robot", "--coop", self.coop["run_id"])
        self.store = RunStore(self.out)
        self.models_path = self.store.artifact_path(self.trained["run_id"], "checkpoints/models.npz")
        self.canonical_path = self.store.artifact_path(self.trained["run_id"], "canonical.ndjson")
        models = load_models(self.models_path)
        self.human, self.robot, self.coop_robot = models["human"], models["robot"], models["coop_robot"]
        self.canonical = CanonicalDataset.load(self.canonical_path)
        self.elapsed = time.perf_counter() - t0


@pytest.fixture(scope="session")
def workflow(tmp_path_factory):
    return Workflow(tmp_path_factory.mktemp("workflow"))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
