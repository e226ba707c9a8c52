"""Repository-wide protocol constants.

Every hash in the package goes through ``HASH_NAME``; changing it changes
every digest, address, and test vector.
"""

HASH_NAME = "sha256"
DIGEST_SIZE = 32
SIGNATURE_SCHEME = "ed25519"

# ledger bounds
MAX_DATUM_BYTES = 1024
MAX_SCRIPT_DEPTH = 32
SCRIPT_STEP_BUDGET = 10_000
TERMINAL_DATUM = b"\xff"
MAX_SLOT = 2**63 - 1

# identity establishment
MAX_DIFFICULTY = 24
MAX_POW_ATTEMPTS = 2**32

# consensus / protocol defaults
QUORUM_NUMERATOR = 2
QUORUM_DENOMINATOR = 3
DEFAULT_MIN_SHARD_SIZE = 4
DEFAULT_VALIDATION_PERIOD = 16


def quorum_size(members: int) -> int:
    """Votes needed to accept among ``members``: floor(2n/3) + 1."""
    return (QUORUM_NUMERATOR * members) // QUORUM_DENOMINATOR + 1
