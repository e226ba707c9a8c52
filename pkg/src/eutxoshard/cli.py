"""Command-line entry point: ``eutxoshard run | analyze | audit | inspect``.

Exit codes: 0 success, 1 invalid input (bad flags, config or transcript),
2 when ``audit`` reports safety findings.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import analytics
from .chain import Block
from .constants import quorum_size
from .crypto import address_of, merkle_root, verify_sig
from .simnet import ConfigError, TranscriptError, load_config, load_transcript, run_scenario
from .simnet.audit import audit_run

EXIT_OK, EXIT_INVALID, EXIT_FINDINGS = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("must fit in 64 unsigned bits")
    return v


def _positive(text: str) -> int:
    v = _u64(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _sweep(text: str) -> range:
    parts = text.split(":")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError("expected LO:HI or LO:HI:STEP")
    if len(nums) not in (2, 3) or nums[0] < 1 or nums[1] < nums[0] or (len(nums) == 3 and nums[2] < 1):
        raise argparse.ArgumentTypeError("expected LO:HI or LO:HI:STEP with 1 <= LO <= HI")
    return range(nums[0], nums[1] + 1, nums[2] if len(nums) == 3 else 1)


def build_parser() -> Parser:
    p = Parser(prog="eutxoshard", description="Sharded eUTXO ledger simulator and analytics.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    run = sub.add_parser("run", help="run a scenario and write its transcript and results")
    run.add_argument("--config", required=True, type=Path, help="scenario YAML file")
    run.add_argument("--seed", type=_u64, help="overrides the seed in the config")
    run.add_argument("--out", required=True, type=Path, help="output directory")
    run.add_argument("--parallel", action="store_true", default=None, help="run shard block attempts on worker threads")

    an = sub.add_parser("analyze", help="shard failure probabilities and time to failure")
    an.add_argument("--nodes", required=True, type=_positive, help="total nodes N")
    an.add_argument("--byzantine", required=True, type=_u64, help="byzantine nodes M")
    an.add_argument("--shard-size", required=True, type=_positive, help="shard size S")
    an.add_argument("--shards", type=_positive, default=1, help="shards per epoch K (default 1)")
    an.add_argument("--mc", type=_u64, default=0, help="Monte Carlo samples (default 0: exact only)")
    an.add_argument("--seed", type=_u64, default=0, help="Monte Carlo seed")
    an.add_argument("--epochs-per-hour", type=float, default=1.0, help="converts epochs to hours")
    an.add_argument("--sweep", type=_sweep, help="also tabulate shard sizes LO:HI[:STEP]")
    an.add_argument("--csv", type=Path, help="write the sweep table here instead of stdout")

    au = sub.add_parser("audit", help="replay a transcript and report safety findings")
    au.add_argument("--transcript", required=True, type=Path)
    au.add_argument("--json", action="store_true", help="print the report as JSON")

    ins = sub.add_parser("inspect", help="show one block or cross-shard session from a transcript")
    ins.add_argument("--transcript", required=True, type=Path)
    which = ins.add_mutually_exclusive_group(required=True)
    which.add_argument("--block", help="block hash (hex, unique prefix accepted)")
    which.add_argument("--session", help="session / transaction id (hex, unique prefix accepted)")
    return p


# --- run ------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.parallel is not None:
        changes["parallel"] = args.parallel
    if changes:
        cfg = cfg.replace(**changes)
    args.out.mkdir(parents=True, exist_ok=True)
    result = run_scenario(cfg, transcript_path=args.out / "transcript.jsonl", keep_transcript=False)
    (args.out / "result.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    (args.out / "epochs.csv").write_text(result.epochs_csv())
    print(result.digest)
    return EXIT_OK


# --- analyze ----------------------------------------------------------------------


def _model(n: int, m: int, s: int) -> analytics.ShardModel:
    try:
        return analytics.ShardModel(n, m, s)
    except analytics.AnalyticsError as exc:
        raise UsageError(str(exc)) from exc


def analyze_summary(n: int, m: int, s: int, k: int = 1, mc: int = 0, seed: int = 0, epochs_per_hour: float = 1.0) -> dict:
    """Everything ``analyze`` prints, as a dict (also the library entry point)."""
    model = _model(n, m, s)
    if k * s > n:
        raise UsageError(f"{k} shards of {s} exceed {n} nodes")
    exact_epoch = k <= 16
    bounds = analytics.epoch_failure_probability(model, k, samples=mc, seed=seed, exact=exact_epoch)
    log_p1 = analytics.log10_shard_failure_probability(model)
    p_epoch = bounds.exact if bounds.exact is not None else bounds.union_upper_bound
    ttf = analytics.time_to_failure(p_epoch, epochs_per_hour) if p_epoch > 0 else math.inf
    return {
        "nodes": n, "byzantine": m, "shard_size": s, "fail_at": model.fail_at,
        "shard_failure": bounds.single,
        "log10_shard_failure": log_p1 if math.isfinite(log_p1) else None,
        "epoch": bounds.to_json(),
        "time_to_failure_hours": ttf if math.isfinite(ttf) else None,
        "log10_time_to_failure_hours": (
            analytics.log10_time_to_failure(math.log10(p_epoch), epochs_per_hour) if p_epoch > 0 else None
        ),
    }


def sweep_rows(n: int, m: int, sizes, epochs_per_hour: float = 1.0) -> list[dict]:
    rows = []
    for s in sizes:
        if s > n:
            break
        model = _model(n, m, s)
        lp = analytics.log10_shard_failure_probability(model)
        rows.append({
            "shard_size": s,
            "fail_at": model.fail_at,
            "shard_failure": analytics.shard_failure_probability(model),
            "log10_shard_failure": lp,
            "log10_time_to_failure_hours": analytics.log10_time_to_failure(lp, epochs_per_hour) if math.isfinite(lp) else math.inf,
        })
    return rows


def cmd_analyze(args) -> int:
    summary = analyze_summary(args.nodes, args.byzantine, args.shard_size, args.shards, args.mc, args.seed,
                              args.epochs_per_hour)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if args.sweep is not None:
        rows = sweep_rows(args.nodes, args.byzantine, args.sweep, args.epochs_per_hour)
        out = open(args.csv, "w", newline="") if args.csv else sys.stdout
        try:
            w = csv.DictWriter(out, fieldnames=list(rows[0]) if rows else ["shard_size"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        finally:
            if args.csv:
                out.close()
    return EXIT_OK


# --- audit / inspect ------------------------------------------------------------------


def read_transcript(path: Path) -> list[dict]:
    try:
        events = list(load_transcript(path))
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from exc
    if not events:
        raise UsageError(f"{path}: empty transcript")
    if events[0].get("type") == "config" and events[-1].get("type") != "final":
        raise UsageError(f"{path}: transcript is truncated (no final event)")
    return events


def cmd_audit(args) -> int:
    events = read_transcript(args.transcript)
    try:
        report = audit_run(events)
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise UsageError(f"{args.transcript}: malformed event ({exc.__class__.__name__}: {exc})") from exc
    print(json.dumps(report.to_json(), indent=2) if args.json else report.render())
    return EXIT_OK if report.clean else EXIT_FINDINGS


def _match(candidates: dict, prefix: str, what: str):
    prefix = prefix.lower()
    hits = [k for k in candidates if k.startswith(prefix)]
    if not prefix or not hits:
        raise UsageError(f"unknown {what} {prefix!r}")
    if len(hits) > 1:
        raise UsageError(f"{what} prefix {prefix!r} is ambiguous ({len(hits)} matches)")
    return candidates[hits[0]]


def _ok(flag: bool) -> str:
    return "ok" if flag else "MISMATCH"


def inspect_block(events: list[dict], prefix: str) -> str:
    blocks, members = {}, {}
    epoch_members: dict = {}
    for ev in events:
        if ev["type"] == "epoch":
            epoch_members = {int(s): {bytes.fromhex(a) for a in m} for s, m in ev["membership"].items()}
        elif ev["type"] == "block":
            h = ev["block"]["header"]["block_hash"]
            blocks.setdefault(h, ev)
            members.setdefault(h, epoch_members.get(ev["shard"], set()))
    ev = _match(blocks, prefix, "block")
    block = Block.from_json(ev["block"])
    h = block.header
    mem = members[h.block_hash.hex()]
    good = sum(
        1 for v in block.votes
        if v.voter in mem and address_of(v.signature.signer) == v.voter and verify_sig(v.signature.signer, h.block_hash, v.signature)
    )
    need = quorum_size(len(mem)) if mem else 0
    lines = [
        f"block {h.block_hash.hex()}",
        f"  shard {ev['shard']}  height {ev.get('height')}  slot {h.timestamp}  epoch {ev.get('epoch')}",
        f"  prev_hash   {h.prev_hash.hex()}",
        f"  producer    {h.producer.hex()}",
        f"  nonce       {h.nonce}",
        f"  block_hash  stored {h.block_hash.hex()[:16]} recomputed {h.compute_hash().hex()[:16]}  {_ok(h.compute_hash() == h.block_hash)}",
        f"  tx_root     stored {h.tx_root.hex()[:16]} recomputed {merkle_root([t.id for t in block.transactions]).hex()[:16]}  "
        f"{_ok(merkle_root([t.id for t in block.transactions]) == h.tx_root)}",
        f"  votes       {good} valid member votes of {len(block.votes)}, quorum {need}  {_ok(good >= need and need > 0)}",
        f"  transactions ({len(block.transactions)}):",
    ]
    for tx in block.transactions:
        total = sum(o.value for o in tx.outputs)
        lines.append(f"    {tx.id.hex()[:16]}  inputs {len(tx.inputs)}  outputs {len(tx.outputs)}  value out {total}  fee {tx.fee}")
    return "\n".join(lines)


def inspect_session(events: list[dict], prefix: str) -> str:
    sessions = {ev["session"]: ev for ev in events if ev["type"] == "xs_init"}
    init = _match(sessions, prefix, "session")
    sid = init["session"]
    timeline = [(init["slot"], "client", "Initialized", f"inputs on {init['input_shards']}, output shard {init['output_shard']}, deadline {init['deadline']}")]
    names = {"xs_lock": None, "xs_commit": "Committed", "xs_rollback": "RolledBack", "xs_refused": "refused", "client_vanished": "client vanished"}
    for ev in events:
        if ev.get("session") != sid or ev["type"] not in names:
            continue
        if ev["type"] == "xs_lock":
            phase = "Locked" if ev["verdict"] == "ACCEPT" else "Rejected"
            detail = f"{ev['verdict']} {ev['reason']}".strip()
        else:
            phase = names[ev["type"]]
            detail = ev.get("reason", "")
        who = f"shard {ev['shard']}" if "shard" in ev else "client"
        timeline.append((ev["slot"], who, phase, detail))
    terminal = {t[2] for t in timeline if t[2] in ("Committed", "RolledBack")}
    verdict = "consistent" if len(terminal) <= 1 else "MIXED TERMINAL STATES"
    lines = [f"session {sid}", f"  outcome: {', '.join(sorted(terminal)) or 'open'} ({verdict})", "  timeline:"]
    lines += [f"    slot {slot:>5}  {who:<9} {phase:<12} {detail}" for slot, who, phase, detail in timeline]
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    events = read_transcript(args.transcript)
    print(inspect_block(events, args.block) if args.block else inspect_session(events, args.session))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "analyze": cmd_analyze, "audit": cmd_audit, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, TranscriptError, UsageError, analytics.AnalyticsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
