import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from virtine.backend.mock import MockBackend


def kvm_usable() -> bool:
    from virtine.backend.kvm import kvm_available

    return kvm_available()


requires_kvm = pytest.mark.skipif(
    not os.path.exists("/dev/kvm"), reason="hardware virtualization not available"
)


@pytest.fixture
def mock_backend():
    return MockBackend()


@pytest.fixture
def pool(mock_backend):
    from virtine.core import ShellPool

    with ShellPool(mock_backend, capacity=4) as p:
        yield p
