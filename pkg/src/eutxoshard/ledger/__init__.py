"""Extended-UTXO ledger: outputs carry (validator, value, datum)."""
from .script import (
    After, Always, And, Before, ContinuesContract, DatumEquals, Never, NextDatumEquals,
    Not, Or, Script, ScriptContext, ScriptError, SignedBy, ValuePreserved, decode_script,
    eval_script, pay_to, state_machine,
)
from .contracts import counter_datum, counter_validator
from .tx import Output, OutputRef, Transaction, TxInput, UtxoSet, tx_id
from .validation import (
    Kind, LedgerError, ValidationReport, Violation, apply_tx, apply_txs, balance_of,
    check_inputs, check_state_continuity, check_structure, force_apply, validate_tx,
    valid_signers,
)

__all__ = [
    "After", "Always", "And", "Before", "ContinuesContract", "DatumEquals", "Never",
    "NextDatumEquals", "Not", "Or", "Script", "ScriptContext", "ScriptError", "SignedBy",
    "ValuePreserved", "decode_script", "eval_script", "pay_to", "state_machine",
    "counter_datum", "counter_validator",
    "Output", "OutputRef", "Transaction", "TxInput", "UtxoSet", "tx_id",
    "Kind", "LedgerError", "ValidationReport", "Violation", "apply_tx", "apply_txs",
    "balance_of", "check_inputs", "check_state_continuity", "check_structure",
    "force_apply", "validate_tx", "valid_signers",
]
