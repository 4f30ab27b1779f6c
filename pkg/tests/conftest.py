import pytest

from poolselect.pool import ModalityPool, ModelSpec, PoolSet, load_poolset
from poolselect.world import World, WorldConfig, generate_world
from tests.resources import fixture_path


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--functional", action="store_true", default=False, help="run functional tests"
    )
    parser.addoption(
        "--acceptance",
        action="store_true",
        default=False,
        help="run long-running training experiments",
    )


def pytest_configure(config: pytest.Config) -> None:
    config.addinivalue_line("markers", "functional: mark test as functional test")
    config.addinivalue_line(
        "markers", "acceptance: mark test as long-running training experiment"
    )


def pytest_collection_modifyitems(
    config: pytest.Config, items: list[pytest.Item]
) -> None:
    skip_functional = pytest.mark.skip(reason="needs --functional to run")
    for item in items:
        if "functional" in item.keywords and not config.getoption("--functional"):
            item.add_marker(skip_functional)

    skip_acceptance = pytest.mark.skip(reason="needs --acceptance to run")
    for item in items:
        if "acceptance" in item.keywords and not config.getoption("--acceptance"):
            item.add_marker(skip_acceptance)


def make_pool(modality: str, costs: list[float], select_k: int = 1) -> ModalityPool:
    models = tuple(
        ModelSpec(f"{modality}{i}", modality, cost, 0.5 + 0.1 * i)
        for i, cost in enumerate(costs)
    )
    return ModalityPool(modality, models, select_k)


@pytest.fixture
def ccvid_pools() -> PoolSet:
    return load_poolset(fixture_path("pools-ccvid-1.json"))


@pytest.fixture
def small_pools() -> PoolSet:
    """Pools of sizes (2, 2, 2) with one selection each."""
    return PoolSet(
        (
            make_pool("face", [1.0, 4.0]),
            make_pool("gait", [2.0, 8.0]),
            make_pool("body", [1.0, 2.0]),
        )
    )


@pytest.fixture
def pools_k2() -> PoolSet:
    """Pools with a two-model body selection."""
    return PoolSet(
        (
            make_pool("face", [1.0, 2.0, 3.0]),
            make_pool("body", [1.0, 2.0, 4.0, 8.0], select_k=2),
        )
    )


@pytest.fixture(scope="session")
def tiny_world() -> World:
    config = WorldConfig(
        identities=10,
        samples_per_identity=3,
        frames_min=3,
        frames_max=5,
        descriptor_dim=6,
    )
    return generate_world(7, config)
