import sys
from pathlib import Path

import pytest

from unetformer import tensor

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def fresh_graph():
    """Drop any tape entries a failing or partial test left behind."""
    tensor.active_graph().clear()
    yield
    tensor.active_graph().clear()
