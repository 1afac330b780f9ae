import numpy as np
import pytest

from stagevar.varengine import (
    Codebook,
    Predictor,
    PredictorConfig,
    ScaleSchedule,
    make_codebook,
)


@pytest.fixture(scope="session")
def tiny_schedule() -> ScaleSchedule:
    return ScaleSchedule.from_sides((1, 2, 4), refinement_start=3)


@pytest.fixture(scope="session")
def tiny_predictor() -> Predictor:
    return Predictor(PredictorConfig(d=8, num_blocks=2, heads=2, seed=3))


@pytest.fixture(scope="session")
def tiny_codebook(tiny_predictor) -> Codebook:
    return make_codebook(64, tiny_predictor.config.d, seed=5)


@pytest.fixture(scope="session")
def small_schedule() -> ScaleSchedule:
    """Four scales up to 8x8, last two refine; fast enough for loops."""
    return ScaleSchedule.from_sides((1, 2, 4, 8), refinement_start=3)


@pytest.fixture(scope="session")
def small_predictor() -> Predictor:
    return Predictor(PredictorConfig(d=16, num_blocks=3, heads=2, seed=21))


@pytest.fixture(scope="session")
def small_codebook(small_predictor) -> Codebook:
    return make_codebook(512, small_predictor.config.d, seed=9)


def zero_codebook(d: int) -> Codebook:
    return Codebook(vectors=np.zeros((4, d)), seed=0)
