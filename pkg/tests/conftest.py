from pathlib import Path

import pytest

from eutxoshard.crypto import hash256, keygen

FIXTURES = Path(__file__).parent / "fixtures"


def key(n: int):
    return keygen(hash256(b"test-key-%d" % n))


@pytest.fixture
def keys():
    return [key(n) for n in range(8)]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES
