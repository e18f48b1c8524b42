import pytest

from iqa_agent.tools.registry import load_default_registry

from tests.fixtures.scenarios import (
    build_mcq_fixture,
    build_scoring_fixture,
    make_scenarios,
    record_scenario,
)


@pytest.fixture(scope="session")
def registry():
    return load_default_registry()


@pytest.fixture(scope="session")
def scenarios():
    return make_scenarios()


@pytest.fixture(scope="session")
def scenario_cassettes(scenarios, tmp_path_factory):
    root = tmp_path_factory.mktemp("cassettes")
    paths = {}
    for name, scenario in scenarios.items():
        path = root / f"{name}.json"
        record_scenario(scenario, path)
        paths[name] = path
    return paths


@pytest.fixture(scope="session")
def scoring_fixture(tmp_path_factory):
    return build_scoring_fixture(tmp_path_factory.mktemp("scoring"))


@pytest.fixture(scope="session")
def mcq_fixture(tmp_path_factory):
    return build_mcq_fixture(tmp_path_factory.mktemp("mcq"))
