import numpy as np
import pytest
from hypothesis import settings

from symsiam import cotrain, nn, synthdata

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def tiny_synth_config(**overrides) -> synthdata.SynthConfig:
    base = dict(n_cases=12, height=64, width=48, patch_size=16, lesion_radius=(3, 5),
                max_misalignment=2, max_shift=3, lesion_prob=0.8, seed=5)
    base.update(overrides)
    return synthdata.SynthConfig(**base)


def tiny_train_config(**overrides) -> cotrain.TrainConfig:
    enc = nn.EncoderConfig(input_side=16, channels_per_stage=(4, 8), embedding_dim=8)
    base = dict(batch_size=16, epochs=2, seed=5, encoder=enc)
    base.update(overrides)
    return cotrain.TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_config():
    return tiny_synth_config()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return synthdata.synthesize(tiny_config)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("tiny_data")
    synthdata.write_dataset(root, tiny_config)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {title} | {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
