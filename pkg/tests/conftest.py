from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from mrprune.annotation import RepeatRecord, Response, TaskKey
from mrprune.synthgen import GenConfig, generate

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"
EPOCH = 1674000000


def rec(crop="c1", worker="w1", response="yes", start=0, question="q1", duration=1.0, day="2023-01-18"):
    return RepeatRecord(TaskKey(crop, question), worker, EPOCH + start, duration, Response(response), day)


@pytest.fixture(scope="session")
def small_log():
    """About 3.4k repeats with fatigue, skill and ambiguity effects."""
    cfg = GenConfig(n_crops=400, n_workers=15, beta_t1=-0.5, beta_t2=0.06, shift_hours=6, base_yes_rate=0.3, seed=11)
    return generate(cfg)
