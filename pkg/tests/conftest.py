from __future__ import annotations

import pytest

from detector.network import MLPConfig
from detector.transfer import TrainConfig
from gridsim.dataset import (
    GenerationConfig,
    generate_source_dataset,
    generate_target_dataset,
    generate_target_test_dataset,
    normalize_and_split,
)
from gridsim.grid_model import PerturbSpec, load_case, perturb_case


@pytest.fixture(scope="session")
def case3():
    return load_case("case3")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case14_star(case14):
    return perturb_case(case14, PerturbSpec(delta=0.5, seed=7))


@pytest.fixture(scope="session")
def small_generation():
    return GenerationConfig(n_base=2, n_per_base=40, seed=11)


@pytest.fixture(scope="session")
def raw_source(case14, small_generation):
    return generate_source_dataset(case14, small_generation)


@pytest.fixture(scope="session")
def source(raw_source):
    return normalize_and_split(raw_source, seed=3)


@pytest.fixture(scope="session")
def target(case14_star, small_generation, source):
    return normalize_and_split(generate_target_dataset(case14_star, small_generation), 3, source.norm_stats)


@pytest.fixture(scope="session")
def target_test(case14_star, source):
    cfg = GenerationConfig(n_base=2, n_per_base=15, seed=12)
    return normalize_and_split(generate_target_test_dataset(case14_star, cfg), 3, source.norm_stats)


@pytest.fixture
def tiny_train():
    return TrainConfig(
        batch_source=32,
        batch_target=32,
        stage1_max_iters=20,
        stage2_max_iters=10,
        eval_every=5,
        scale_batches=False,
        seed=5,
    )


@pytest.fixture
def tiny_mlp(source):
    return MLPConfig(input_dim=source.n_features, hidden_layers=2, hidden_width=16, mmd_depth=2)
