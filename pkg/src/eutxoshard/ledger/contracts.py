"""Ready-made validators built from the constraint language."""
from __future__ import annotations

from ..constants import TERMINAL_DATUM
from .script import Or, state_machine


def counter_datum(n: int) -> bytes:
    return n.to_bytes(8, "big")


def counter_validator(limit: int, salt: bytes = b"") -> Or:
    """Counter that steps n -> n+1 up to ``limit`` and may then be marked terminal.

    ``salt`` yields distinct validators (and hence distinct contract
    addresses) with identical behaviour.
    """
    steps = [(counter_datum(n), counter_datum(n + 1)) for n in range(limit)]
    steps.append((counter_datum(limit), TERMINAL_DATUM))
    if salt:
        steps.append((b"salt:" + salt, b"salt:" + salt))
    return state_machine(steps)
