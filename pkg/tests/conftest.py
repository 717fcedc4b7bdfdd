import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from planeagent.geometry import Plane

settings.register_profile("repo", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_plane(rng: np.random.Generator, d_range: float = 20.0) -> Plane:
    n = rng.normal(size=3)
    return Plane.from_normal(n, rng.uniform(-d_range, d_range))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom():
    from planeagent.volume import Pose, generate_phantom

    return generate_phantom(7, Pose((10.0, -5.0, 20.0), (1.0, -0.5, 0.5), 1.05))


RULE_TRAIN, RULE_VAL, RULE_EPOCHS = 400, 200, 200


@pytest.fixture(scope="session")
def rule_models():
    """LSTM and FC terminators trained once on the threshold-rule data; shared with acceptance."""
    import time

    from planeagent.termination import TerminationConfig, threshold_rule_dataset, train_terminator

    train = threshold_rule_dataset(RULE_TRAIN, seed=1)
    val = threshold_rule_dataset(RULE_VAL, seed=2)
    out = {"train": train, "val": val, "seconds": {}}
    for variant in ("lstm", "fc"):
        t0 = time.perf_counter()
        out[variant], _ = train_terminator(train, TerminationConfig(variant, epochs=RULE_EPOCHS, seed=0))
        out["seconds"][variant] = time.perf_counter() - t0
    return out


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if not mod or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
