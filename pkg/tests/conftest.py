import numpy as np
import pytest
from hypothesis import settings

from tokentrack.backbone import BackboneConfig
from tokentrack.model import ModelConfig, TrackerModel
from tokentrack.world import WorldSpec, gen_sequence

# toy dimensions used by the gradient checks: D=16, two blocks, four-frame windows
TOY_BACKBONE = BackboneConfig(template_size=32, search_size=64, embed_dim=16, depth=2, num_heads=2, mlp_ratio=2.0)


def toy_model_config(**kw) -> ModelConfig:
    base = dict(backbone=TOY_BACKBONE, window=4, head_hidden=8, temporal_heads=2,
                temporal_mlp_ratio=2.0, ssm_state=4)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return toy_model_config()


@pytest.fixture
def toy_model(toy_cfg):
    return TrackerModel(toy_cfg, seed=3)


@pytest.fixture(scope="session")
def small_world():
    spec = WorldSpec(num_frames=24, occlusion_length=(4, 6))
    return [gen_sequence(spec, 100 + i) for i in range(6)]


settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
