import numpy as np
import pytest

from pclast.maze import MazeWorld, cell_center, cell_of_obs

# Criterion results collected by test_acceptance.py; printed in the summary.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class DebugModel:
    """Ground-truth stand-in for a trained model: latents are the true
    coordinates, the metric map is the identity, and the forward model is
    free-space kinematics. Lets planner machinery be tested in isolation."""

    def __init__(self, resolution: int = 100, action_bound: float = 0.2):
        self.resolution = resolution
        self.action_bound = action_bound

    def encode_cells(self, cells):
        return cell_center(np.asarray(cells), self.resolution)

    def encode_obs(self, grid):
        return self.encode_cells(np.array([cell_of_obs(grid)]))[0]

    def psi_apply(self, latents):
        return np.asarray(latents, dtype=np.float64)

    def delta_mean(self, latents, actions):
        a = np.clip(actions, -self.action_bound, self.action_bound)
        return np.asarray(latents, dtype=np.float64) + a


@pytest.fixture(scope="session")
def empty_world():
    return MazeWorld.custom([])


@pytest.fixture(scope="session")
def hallway():
    return MazeWorld.named("hallway")


@pytest.fixture(scope="session")
def spiral():
    return MazeWorld.named("spiral")


@pytest.fixture(scope="session")
def rooms():
    return MazeWorld.named("rooms")
