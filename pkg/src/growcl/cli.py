"""Command-line front end: run experiments, replay decision traces, compare reports.

    growcl run --config exp.cfg [--mode lw2g] [--seed 7] [--out DIR]
    growcl replay --replay trace.jsonl
    growcl compare report_a.json report_b.json

Exit codes: 0 success, 1 config error, 2 runtime error. ``run`` writes
report.json, metrics.csv, trace.jsonl, snapshot.bin and manifest.json into
the output directory; report.json and trace.jsonl are byte-stable for a
fixed config and seed (timestamps live only in manifest.json).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from growcl.config import ConfigError, RunManifest, config_dict, content_hash, load_config
from growcl.decisions import HindranceRecord, decide
from growcl.metrics import faa, ffm, per_task_summary, pra, ssp, write_csv
from growcl.stream import generate
from growcl.subspace import HfcValue
from growcl import snapshot
from growcl.trainer import run_stream

SCHEMA_VERSION = 1


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def build_report(spec, enc_cfg, train_cfg, result) -> dict:
    m = result.matrix
    pool = result.engine.pool
    return {
        "schema": SCHEMA_VERSION,
        "config": config_dict(spec, enc_cfg, train_cfg),
        "metrics": {
            "faa": round(faa(m), 12),
            "ffm": round(ffm(m), 12) if m.n_tasks > 1 else None,
            "pra": round(pra(m), 12),
            "ssp": ssp(pool),
            "faa_oracle": round(faa(m, oracle=True), 12),
            "per_task": per_task_summary(m),
        },
        "assignments": {str(sid): tasks for sid, tasks in sorted(pool.assignments.items())},
        "decisions": [r.decision.describe() for r in result.reports],
    }


def cmd_run(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    try:
        text, (spec, enc_cfg, train_cfg) = load_config(args.config)
        if args.mode:
            train_cfg = dataclasses.replace(train_cfg, mode=args.mode)
        if args.seed is not None:
            train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        datasets = generate(spec)
        result = run_stream(enc_cfg, train_cfg, datasets, n_classes=spec.n_classes)
        report = build_report(spec, enc_cfg, train_cfg, result)
        (out / "report.json").write_text(_json_line(report) + "\n")
        with open(out / "trace.jsonl", "w") as fh:
            for row in result.trace_rows:
                fh.write(_json_line(row) + "\n")
        write_csv(result.matrix, out / "metrics.csv")
        snapshot.save(out / "snapshot.bin", result.engine, result.matrix)
        manifest = RunManifest(
            config_hash=content_hash(text.encode("utf-8")),
            config=report["config"],
            outputs={name: str(out / name) for name in
                     ("report.json", "trace.jsonl", "metrics.csv", "snapshot.bin")},
            started_at=started,
            finished_at=datetime.now(timezone.utc).isoformat(),
        )
        (out / "manifest.json").write_text(manifest.to_json() + "\n")
    except Exception as exc:  # noqa: BLE001 - surfaced as exit code 2
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    print(f"run complete: faa={report['metrics']['faa']:.4f} "
          f"pra={report['metrics']['pra']:.4f} ssp={report['metrics']['ssp']} -> {out}")
    return 0


def replay_rows(rows):
    """Re-run the grow-or-reuse rule over recorded hindrance pairs.

    Each row: {"task": t, "records": [{"set": id, "hfc_old_deg": x,
    "hfc_pre_deg": y}, ...]}; a row without records grows unconditionally.
    Set ids in the output follow the ids used in the rows: the first grown
    set takes the smallest id referenced anywhere in the trace (so 1-based
    published traces and 0-based engine traces both replay faithfully) and
    each later grow takes the next integer.
    """
    assignments = {}
    decisions = []
    referenced = [int(r["set"]) for row in rows for r in row.get("records", [])]
    next_id = min(referenced, default=0)
    for row in rows:
        task = row["task"]
        records = [
            HindranceRecord(
                int(r["set"]),
                HfcValue.from_degrees(float(r["hfc_old_deg"])),
                HfcValue.from_degrees(float(r["hfc_pre_deg"])),
            )
            for r in row.get("records", [])
        ]
        if records:
            decision = decide(records)
        else:
            decision = None  # unconditional grow
        if decision is None or decision.is_grow:
            sid = next_id
            next_id += 1
            assignments.setdefault(sid, []).append(task)
            decisions.append(
                {
                    "task": task,
                    "decision": "grow",
                    "set": sid,
                    "z": [round(r.z_degrees, 6) for r in records],
                }
            )
        else:
            sid = decision.reuse_id
            if sid not in assignments:
                raise ValueError(f"trace reuses unknown set {sid} at task {task}")
            assignments[sid].append(task)
            decisions.append(
                {
                    "task": task,
                    "decision": f"reuse({sid})",
                    "set": sid,
                    "z": [round(r.z_degrees, 6) for r in records],
                }
            )
    return decisions, assignments


def cmd_replay(args) -> int:
    try:
        rows = []
        with open(args.replay) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"runtime error: malformed trace row: {exc}", file=sys.stderr)
        return 2
    try:
        decisions, assignments = replay_rows(rows)
    except (ValueError, KeyError) as exc:
        print(f"runtime error: malformed trace: {exc}", file=sys.stderr)
        return 2
    for d in decisions:
        print(f"task {d['task']}: {d['decision']}")
    summary = {
        "decisions": [d["decision"] for d in decisions],
        "assignments": {str(k): v for k, v in sorted(assignments.items())},
        "ssp": len(assignments),
    }
    print(_json_line(summary))
    return 0


def cmd_compare(args) -> int:
    reports = []
    for path in (args.report_a, args.report_b):
        try:
            reports.append(json.loads(Path(path).read_text()))
        except OSError as exc:
            print(f"runtime error: {exc}", file=sys.stderr)
            return 2
        except json.JSONDecodeError as exc:
            print(f"runtime error: bad report {path}: {exc}", file=sys.stderr)
            return 2
    a, b = (r["metrics"] for r in reports)
    diff = {}
    for key in ("faa", "pra", "ffm", "ssp"):
        va, vb = a.get(key), b.get(key)
        diff[f"delta_{key}"] = None if va is None or vb is None else round(vb - va, 12)
        print(f"{key:4s}: a={va} b={vb} delta={diff[f'delta_{key}']}")
    print(_json_line(diff))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="growcl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("--config", required=True, help="path to the experiment config")
    p_run.add_argument("--mode", choices=("lw2g", "grow_always", "single_set"),
                       help="override [train] mode")
    p_run.add_argument("--seed", type=int, help="override [train] seed")
    p_run.add_argument("--out", default="run_out", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_replay = sub.add_parser("replay", help="replay decisions from a hindrance trace")
    p_replay.add_argument("--replay", required=True, help="path to a trace .jsonl file")
    p_replay.set_defaults(func=cmd_replay)

    p_cmp = sub.add_parser("compare", help="diff the metrics of two reports")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")
    p_cmp.set_defaults(func=cmd_compare)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
