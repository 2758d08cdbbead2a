import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from serinv.data import SyntheticSpec, Utterance, collate, generate_synthetic
from serinv.gradcheck import tiny_setup
from serinv.model import preset

settings.register_profile("repo", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# filled by test_acceptance; printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny():
    """Tiny model (6 features, 2 emotions, 3 speakers) and a padded 4-utterance batch."""
    return tiny_setup(0)


@pytest.fixture(scope="session")
def tiny_dataset():
    """200 short utterances with 6 features, usable with the tiny preset."""
    spec = SyntheticSpec(num_speakers=10, utterances_per_speaker=20, feature_dim=6, num_emotions=2,
                         length_range=(12, 24), template_scale=1.0, seed=3)
    return generate_synthetic(spec, min_length=preset("tiny").min_length)


def random_batch(rng, feature_dim, lengths, num_emotions=2, num_speakers=3):
    utts = [Utterance(f"r{i}", rng.standard_normal((feature_dim, n)).astype(np.float32),
                      i % num_emotions, i % num_speakers) for i, n in enumerate(lengths)]
    return collate(utts, num_emotions, num_speakers)
