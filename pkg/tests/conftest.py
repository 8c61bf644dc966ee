import pytest
import torch

from stereoderain.synth import CameraRig, RainConfig, SceneConfig, SynthConfig, generate_samples

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(scene=SceneConfig(num_classes=8), rain=RainConfig(min_streaks=5, max_streaks=10),
                       rig=CameraRig(image_width=32, image_height=32))


@pytest.fixture(scope="session")
def small_samples(small_config):
    return generate_samples(4, 11, small_config)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``CRITERION n: PASS|FAIL detail`` line, echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, title, passed, detail):
        line = f"CRITERION {number} [{title}]: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
