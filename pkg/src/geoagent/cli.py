"""Command line: ``geoagent {rollout,eval,reward,curate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__
from .agent import Sample, run_batch, summarize_batch
from .config import ConfigError, RunConfig
from .curation import (
    CurationSkipped,
    ManifestEntry,
    ManifestError,
    export_sft_dataset,
    filter_localizability,
    load_manifest,
    propose_and_execute,
)
from .evaluation import EvalClients, aggregate, evaluate_sample, render_table
from .protocol import Trajectory, TrajectoryError, read_trajectories, serialize_trajectory
from .rewards import GroupingError, rung_histogram, score_groups
from .tools import ImageStore, Toolbox
from .tools.base import atomic_write_text

logger = logging.getLogger("geoagent")

EXIT_OK = 0
EXIT_SAMPLE_ERRORS = 1
EXIT_USAGE = 2


class CommandError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _write_jsonl(path: Path, header: dict, rows: Sequence) -> None:
    lines = [_dumps({"header": header})] + [r if isinstance(r, str) else _dumps(r) for r in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _write_json(path: Path, header: dict, body: dict) -> None:
    atomic_write_text(path, json.dumps({"header": header, **body}, ensure_ascii=False, sort_keys=True, indent=2) + "\n")


def _read_jsonl_rows(path: Path) -> list[dict]:
    rows = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError:
                # a torn last line from an interrupted run
                continue
            if "header" not in row:
                rows.append(row)
    return rows


def _load_config(args) -> RunConfig:
    overrides = {
        "manifest": args.manifest,
        "out": args.out,
        "workers": args.workers,
        "seed": args.seed,
        "deterministic": True if args.deterministic else None,
    }
    return RunConfig.load(args.config, overrides)


def _manifest(cfg: RunConfig, limit: int | None) -> list[ManifestEntry]:
    if cfg.manifest is None:
        raise CommandError("no manifest given (--manifest or 'manifest' in the config)")
    entries = load_manifest(cfg.manifest)
    return entries[:limit] if limit is not None else entries


def _out_dir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise CommandError("no output directory given (--out or 'out' in the config)")
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _read_log(path: str | None) -> list[Trajectory]:
    if not path:
        raise CommandError("--log is required")
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"trajectory log not found: {p}")
    with p.open(encoding="utf-8") as fh:
        try:
            trajectories = list(read_trajectories(fh))
        except TrajectoryError as exc:
            raise CommandError(f"{p}: {exc}") from exc
    if not trajectories:
        raise CommandError(f"trajectory log {p} is empty")
    return trajectories


def _toolbox(cfg: RunConfig, out: Path) -> Toolbox:
    loop = cfg.loop_config()
    return Toolbox(cfg.search_provider(), ImageStore(out), pixel_budget=loop.pixel_budget,
                   zoom_target=loop.zoom_target)


# -- commands -------------------------------------------------------------------


def cmd_rollout(args) -> int:
    cfg = _load_config(args)
    entries = _manifest(cfg, args.limit)
    loop = cfg.loop_config()
    policy = cfg.chat_client("policy")
    out = _out_dir(cfg)
    toolbox = _toolbox(cfg, out)
    group_size = args.group_size or cfg.group_size

    samples = [Sample(e.sample_id, e.image_path, e.question) for e in entries]
    trajectories = run_batch(samples, loop, policy, toolbox, workers=cfg.workers, group_size=group_size)
    header = cfg.header("trajectories")
    _write_jsonl(out / "trajectories.jsonl", header, [serialize_trajectory(t) for t in trajectories])
    summary = summarize_batch(trajectories)
    _write_json(out / "rollout_summary.json", cfg.header("rollout_summary"), summary.to_dict())
    logger.info("rollout: %d trajectories, terminations %s, tool failure rate %.4f",
                summary.n_trajectories, summary.terminations, summary.tool_failure_rate)
    return EXIT_SAMPLE_ERRORS if summary.terminations.get("protocol_error") else EXIT_OK


def _align(trajectories: list[Trajectory], entries: list[ManifestEntry]) -> None:
    log_ids = {t.sample_id for t in trajectories}
    manifest_ids = {e.sample_id for e in entries}
    unknown = sorted(log_ids - manifest_ids)
    missing = sorted(manifest_ids - log_ids)
    if unknown or missing:
        parts = []
        if unknown:
            parts.append(f"in log but not in manifest: {unknown}")
        if missing:
            parts.append(f"in manifest but not in log: {missing}")
        raise CommandError("sample id mismatch; " + "; ".join(parts))


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    trajectories = _read_log(args.log)
    entries = _manifest(cfg, args.limit)
    _align(trajectories, entries)
    by_id = {e.sample_id: e for e in entries}
    seen: dict[str, int] = {}
    for t in trajectories:
        seen[t.sample_id] = seen.get(t.sample_id, 0) + 1
    dupes = sorted(k for k, v in seen.items() if v > 1)
    if dupes and not args.all_group_members:
        raise CommandError(f"several trajectories for samples {dupes}; pass --all-group-members to score each")
    clients = EvalClients(geocoder=cfg.geocoder(), verifier=cfg.verifier(), extractor=cfg.extractor())
    out = _out_dir(cfg)

    def one(t: Trajectory):
        entry = by_id[t.sample_id]
        return evaluate_sample(t, entry.label, entry.data_type, clients)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        records = list(pool.map(one, trajectories))
    report = aggregate(records)
    _write_jsonl(out / "eval_records.jsonl", cfg.header("eval_records"), [r.to_dict() for r in records])
    _write_json(out / "metrics.json", cfg.header("metrics"), {"report": report.to_dict()})
    table = render_table(report, args.name)
    atomic_write_text(out / "metrics.txt", table)
    print(table, end="")
    return EXIT_OK


def cmd_reward(args) -> int:
    cfg = _load_config(args)
    trajectories = _read_log(args.log)
    entries = _manifest(cfg, None)
    labels = {e.sample_id: e.label for e in entries}
    unknown = sorted({t.sample_id for t in trajectories} - set(labels))
    if unknown:
        raise CommandError(f"samples missing from manifest: {unknown}")
    try:
        groups = score_groups(trajectories, labels, cfg.beta, cfg.verifier())
    except GroupingError as exc:
        raise CommandError(str(exc)) from exc
    out = _out_dir(cfg)
    rows, group_rows = [], []
    for g in groups:
        for i, (reward, adv, rung) in enumerate(zip(g.group.rewards, g.group.advantages, g.rungs)):
            rows.append({"group_id": g.group.question_id, "sample_id": g.sample_id, "index": i,
                         "reward": reward, "rung": rung, "advantage": adv})
        group_rows.append({"group_id": g.group.question_id, "sample_id": g.sample_id,
                           "group_size": g.group.group_size, "mean_reward": g.mean_reward,
                           "rung_fractions": g.rung_fractions()})
    _write_jsonl(out / "rewards.jsonl", cfg.header("rewards"), rows)
    _write_json(out / "reward_summary.json", cfg.header("reward_summary"),
                {"beta": cfg.beta, "groups": group_rows, "rung_fractions": rung_histogram(groups),
                 "n_groups": len(groups), "n_trajectories": len(rows)})
    return EXIT_OK


def cmd_curate(args) -> int:
    cfg = _load_config(args)
    entries = _manifest(cfg, args.limit)
    judge = cfg.chat_client("judge")
    proposer = cfg.chat_client("proposer")
    out = _out_dir(cfg)
    toolbox = _toolbox(cfg, out)
    turn_budget = int((cfg.section("curation") or {}).get("turn_budget", cfg.loop_config().max_turns))

    # Per-entry results go to an append-only state file so an interrupted run resumes without duplicates.
    state_path = out / "curate_state.jsonl"
    done = {row["sample_id"]: row for row in _read_jsonl_rows(state_path)} if state_path.exists() else {}
    todo = [e for e in entries if e.sample_id not in done]

    def one(entry: ManifestEntry) -> dict:
        decision = filter_localizability(entry, judge, toolbox.pixel_budget)
        row = {"sample_id": entry.sample_id, "decision": decision.to_dict(), "trajectory": None, "skip": None}
        if decision.keep:
            try:
                traj = propose_and_execute(entry, proposer, toolbox, turn_budget)
                row["trajectory"] = traj.to_dict()
            except CurationSkipped as exc:
                logger.warning("skipping %s: %s", entry.sample_id, exc)
                row["skip"] = str(exc)
        return row

    if todo:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool, state_path.open("a", encoding="utf-8") as sink:
            for row in pool.map(one, todo):
                sink.write(_dumps(row) + "\n")
                sink.flush()
                done[row["sample_id"]] = row

    drop_log, kept, trajectories = [], [], []
    for entry in entries:
        row = done[entry.sample_id]
        decision = row["decision"]
        if not decision["keep"]:
            drop_log.append({"sample_id": entry.sample_id, "stage": "filter", "reason": decision["reason"]})
            continue
        kept.append(entry.to_record(cfg.manifest.parent))
        if row["skip"]:
            drop_log.append({"sample_id": entry.sample_id, "stage": "proposal", "reason": row["skip"]})
        elif row["trajectory"]:
            trajectories.append(Trajectory.from_dict(row["trajectory"]))
    export = export_sft_dataset(trajectories)
    for sample_id, reason in export.rejected:
        drop_log.append({"sample_id": sample_id, "stage": "export", "reason": reason})

    _write_jsonl(out / "drop_log.jsonl", cfg.header("drop_log"), drop_log)
    _write_jsonl(out / "kept_manifest.jsonl", cfg.header("kept_manifest"), kept)
    _write_jsonl(out / "curated_trajectories.jsonl", cfg.header("trajectories"),
                 [serialize_trajectory(t) for t in trajectories])
    _write_jsonl(out / "sft.jsonl", cfg.header("sft"), export.records)
    _write_json(out / "curate_summary.json", cfg.header("curate_summary"), {
        "n_entries": len(entries), "n_kept": len(kept), "n_dropped": len(drop_log),
        "n_exported": len(export.records),
        "flagged": sorted(r["sample_id"] for r in done.values() if r["decision"]["flagged"]),
    })
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geoagent", description="Agentic image geolocalization harness.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--manifest", help="JSONL manifest of samples")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="concurrent workers")
    common.add_argument("--seed", type=int, help="random seed recorded in every output")
    common.add_argument("--deterministic", action="store_true", help="no retries, seeded sampling")
    common.add_argument("--limit", type=int, help="only use the first N manifest entries")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("rollout", parents=[common], help="run the agent loop over a manifest")
    p.add_argument("--group-size", type=int, help="rollouts per sample")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", parents=[common], help="score a trajectory log")
    p.add_argument("--log", required=True, help="trajectories.jsonl from rollout")
    p.add_argument("--name", default="model", help="row label in the rendered table")
    p.add_argument("--all-group-members", action="store_true",
                   help="score every trajectory when a sample has several")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reward", parents=[common], help="hierarchical rewards and group advantages")
    p.add_argument("--log", required=True, help="trajectories.jsonl from rollout")
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("curate", parents=[common], help="filter a manifest and build SFT trajectories")
    p.set_defaults(func=cmd_curate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, ManifestError) as exc:
        print(f"geoagent {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
