"""Sharded extended-UTXO ledger simulation toolkit."""

__version__ = "0.1.0"
