import pytest

from deep_tool_adapter.manifest import default_manifest
from deep_tool_adapter.service import AdapterService


@pytest.fixture(scope="session")
def service():
    return AdapterService(default_manifest())
