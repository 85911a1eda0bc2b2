"""Command-line pipeline: train, simulate, ingest, validate, report.

Every command reads the shared config file (defaults when omitted), honors
the LEVELK_SEED environment variable, writes its artifacts under --out and
records them in a manifest with the resolved config hash, so runs with the
same seed and config reproduce byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dqn, ingest, levelk, validate
from .config import ConfigError, RunConfig, config_hash, load_config, substream

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3


def _update_manifest(out_dir: Path, command: str, cfg: RunConfig, artifacts: list[Path]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest = {"runs": []}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest["runs"].append(
        {
            "command": command,
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
            "artifacts": sorted(str(p.relative_to(out_dir)) for p in artifacts),
        }
    )
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _load_run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    env_seed = os.environ.get("LEVELK_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    registry = levelk.PolicyRegistry.load(out_dir, cfg.eval_temperature)
    k = args.level
    if (k - 1) not in registry:
        print(f"error: training level {k} requires level {k - 1} in {out_dir}", file=sys.stderr)
        return EXIT_MISSING
    try:
        ref, history = levelk.train_level(
            k,
            registry,
            cfg.train,
            substream(cfg.seed, "train", k),
            cfg.env,
            cfg.actions,
            max_level=cfg.max_level,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    policy_path = out_dir / f"level{k}.policy.json"
    policy_path.write_bytes(dqn.save_policy(ref.policy.net))
    history_path = out_dir / f"level{k}.rewards.csv"
    with open(history_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "avg_reward", "T", "n_cars"])
        for episode, avg_reward, temperature, n_cars in history:
            writer.writerow([episode, repr(avg_reward), repr(temperature), n_cars])
    _update_manifest(out_dir, f"train --level {k}", cfg, [policy_path, history_path])
    print(f"trained level {k}: {policy_path}")
    return EXIT_OK


def _parse_nd(raw: str) -> list[int]:
    if ":" in raw:
        parts = [int(p) for p in raw.split(":")]
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 5
        return list(range(start, stop + 1, step))
    return [int(p) for p in raw.split(",")]


def _resolve_policy(name: str, registry: levelk.PolicyRegistry) -> levelk.PolicyRef | None:
    if not name.startswith("level"):
        return None
    try:
        level = int(name.removeprefix("level"))
    except ValueError:
        return None
    if level not in registry:
        return None
    return registry.get(level)


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    policies_dir = Path(args.policies)
    registry = levelk.PolicyRegistry.load(policies_dir, cfg.eval_temperature)
    ego = _resolve_policy(args.ego, registry)
    field = _resolve_policy(args.field, registry)
    if ego is None or field is None:
        missing = args.ego if ego is None else args.field
        print(f"error: unknown policy {missing!r} in {policies_dir}", file=sys.stderr)
        return EXIT_MISSING
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    nds = _parse_nd(args.nd)
    seeds = [substream(cfg.seed, "simulate", args.ego, args.field, nd) for nd in nds]
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(
                pool.map(
                    lambda sn: levelk.evaluate_scenario(
                        ego, field, sn[0], args.episodes, args.steps, sn[1], cfg.env
                    ),
                    zip(nds, seeds),
                )
            )
    else:
        results = [
            levelk.evaluate_scenario(ego, field, nd, args.episodes, args.steps, rng, cfg.env)
            for nd, rng in zip(nds, seeds)
        ]

    out_path = out_dir / f"scenario_{args.ego}_vs_{args.field}.csv"
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_d", "episodes", "crashes", "crash_rate", "mean_reward"])
        for res in results:
            writer.writerow(
                [res.n_d, res.episodes, res.crashes, repr(res.crash_rate), repr(res.mean_reward)]
            )
    _update_manifest(out_dir, f"simulate {args.ego} vs {args.field}", cfg, [out_path])
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _load_run_config(args)
    data_path = Path(args.data)
    if not data_path.exists():
        print(f"error: data file not found: {data_path}", file=sys.stderr)
        return EXIT_MISSING
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ing = cfg.ingest
    try:
        parsed = ingest.parse_trajectories(data_path, ing.columns(), ing.feet)
    except (ingest.MissingColumnError, ingest.EmptyFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ingest.clamp_lanes(parsed.segments)
    segments, rejected = ingest.clean_segments(parsed.segments, ing.frame_dt, ing.jump_threshold)
    sequences = ingest.reconstruct_states_actions(
        segments,
        ing.frame_dt,
        ing.tick_seconds,
        cfg.env,
        cfg.actions,
        ing.road_length,
    )
    policies = ingest.build_empirical_policy(sequences)
    artifacts = ingest.save_empirical_policies(policies, out_dir)

    probes: dict[int, list[list[float]]] = {}
    for records in sequences.values():
        for rec in records:
            probes.setdefault(rec.state_index, []).append([float(x) for x in rec.features])
    probes_path = out_dir / "probes.json"
    probes_path.write_text(
        json.dumps({str(k): v for k, v in sorted(probes.items())})
    )
    artifacts.append(probes_path)
    _update_manifest(out_dir, "ingest", cfg, artifacts)
    print(
        f"ingested {len(policies)} drivers ({parsed.skipped_rows} rows skipped, "
        f"{rejected} segments rejected) -> {out_dir}"
    )
    return EXIT_OK


def _load_probes(path: Path) -> dict[int, list[np.ndarray]]:
    if not path.exists():
        return {}
    doc = json.loads(path.read_text())
    return {int(k): [np.array(v) for v in vs] for k, vs in doc.items()}


def cmd_validate(args) -> int:
    cfg = _load_run_config(args)
    if args.nlimit is not None:
        cfg.validate.n_limit = args.nlimit
    policies_dir = Path(args.policies)
    empirical_path = Path(args.empirical)
    if not empirical_path.exists():
        print(f"error: empirical policies not found: {empirical_path}", file=sys.stderr)
        return EXIT_MISSING
    registry = levelk.PolicyRegistry.load(policies_dir, cfg.eval_temperature)
    trained = [lvl for lvl in registry.levels() if lvl >= 1]
    if not trained:
        print(f"error: no trained level policies in {policies_dir}", file=sys.stderr)
        return EXIT_MISSING

    empirical = ingest.load_empirical_policies(empirical_path)
    probes = _load_probes(
        (empirical_path if empirical_path.is_dir() else empirical_path.parent) / "probes.json"
    )
    n_limit = cfg.validate.n_limit
    alpha = cfg.validate.alpha

    states = sorted({s for emp in empirical for s in emp.visited(n_limit)})
    family = [
        validate.derive_gt_state_policy(registry.get(lvl), states, probes, cfg.env)
        for lvl in trained
    ]
    benchmark = [validate.uniform_benchmark(states)]

    def run_reports(fam):
        if cfg.jobs > 1:
            with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                return list(
                    pool.map(lambda emp: validate.compare_driver(emp, fam, n_limit, alpha), empirical)
                )
        return [validate.compare_driver(emp, fam, n_limit, alpha) for emp in empirical]

    gt_reports = run_reports(family)
    ud_reports = run_reports(benchmark)
    summary = validate.aggregate(gt_reports, ud_reports)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []

    drivers_path = out_dir / f"drivers_nlimit{n_limit}.csv"
    with open(drivers_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["driver_id", "n_comparisons", "gt_success_pct", "ud_success_pct", "diff"]
        )
        ud_by_id = {r.driver_id: r for r in ud_reports}
        for rep in gt_reports:
            ud = ud_by_id[rep.driver_id]
            gt_pct = rep.success_pct
            ud_pct = ud.success_pct
            writer.writerow(
                [
                    rep.driver_id,
                    rep.n_comparisons,
                    "" if gt_pct is None else repr(gt_pct),
                    "" if ud_pct is None else repr(ud_pct),
                    "" if gt_pct is None or ud_pct is None else repr(gt_pct - ud_pct),
                ]
            )
    artifacts.append(drivers_path)

    summary_path = out_dir / f"summary_nlimit{n_limit}.json"
    summary_path.write_text(
        json.dumps(
            {
                "n_limit": n_limit,
                "alpha": alpha,
                "n_drivers": summary.n_drivers,
                "mean_gt_pct": summary.mean_gt_pct,
                "mean_ud_pct": summary.mean_ud_pct,
                "mean_diff_pct": summary.mean_diff_pct,
                "amae": summary.amae,
                "rmae": summary.rmae,
                "amae_sum": summary.amae_sum,
                "rmae_sum": summary.rmae_sum,
                "per_level_pct": summary.per_level_pct,
            },
            indent=1,
            sort_keys=True,
        )
    )
    artifacts.append(summary_path)

    colormap_path = out_dir / f"colormap_nlimit{n_limit}.csv"
    with open(colormap_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ud_bucket", "gt_bucket", "count"])
        for ub in range(10):
            for gb in range(10):
                writer.writerow([ub, gb, int(summary.color_map[ub, gb])])
    artifacts.append(colormap_path)

    _update_manifest(out_dir, f"validate --nlimit {n_limit}", cfg, artifacts)
    print(f"validated {summary.n_drivers} drivers -> {summary_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = Path(args.results)
    summaries = sorted(out_dir.glob("summary_nlimit*.json"))
    if not summaries:
        print(f"error: no summary files under {out_dir}", file=sys.stderr)
        return EXIT_MISSING
    for path in summaries:
        doc = json.loads(path.read_text())
        print(f"== {path.name}")
        print(f"  drivers compared: {doc['n_drivers']}")
        for key in ("mean_gt_pct", "mean_ud_pct", "mean_diff_pct"):
            value = doc.get(key)
            print(f"  {key}: {value if value is None else f'{value:.2f}'}")
        for key in ("amae", "rmae", "amae_sum", "rmae_sum"):
            value = doc.get(key)
            print(f"  {key}: {value if value is None else f'{value:.4f}'}")
        if doc.get("per_level_pct"):
            for label, pct in doc["per_level_pct"].items():
                print(f"  retained[{label}]: {pct:.2f}%")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="levelk-highway",
        description="Train, simulate and validate hierarchical highway driver policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="config file (INI); defaults used when omitted")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, help="worker threads for independent work")

    p_train = sub.add_parser("train", help="train the next level of the hierarchy")
    p_train.add_argument("--level", type=int, required=True)
    p_train.add_argument("--out", required=True, help="policy registry directory")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sim = sub.add_parser("simulate", help="evaluate ego-vs-field crash rates")
    p_sim.add_argument("--ego", required=True, help="policy name, e.g. level1")
    p_sim.add_argument("--field", required=True, help="policy name, e.g. level0")
    p_sim.add_argument("--nd", required=True, help="car counts: N, N,M,... or lo:hi[:step]")
    p_sim.add_argument("--episodes", type=int, default=100)
    p_sim.add_argument("--steps", type=int, default=100)
    p_sim.add_argument("--policies", required=True, help="directory with level*.policy.json")
    p_sim.add_argument("--out", required=True)
    add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_ing = sub.add_parser("ingest", help="extract per-driver empirical policies from data")
    p_ing.add_argument("--data", required=True, help="trajectory CSV")
    p_ing.add_argument("--out", required=True)
    add_common(p_ing)
    p_ing.set_defaults(func=cmd_ingest)

    p_val = sub.add_parser("validate", help="K-S comparison of policies against data")
    p_val.add_argument("--policies", required=True)
    p_val.add_argument("--empirical", required=True, help="ingest output dir or file")
    p_val.add_argument("--nlimit", type=int, help="minimum state visits (default from config)")
    p_val.add_argument("--out", required=True)
    add_common(p_val)
    p_val.set_defaults(func=cmd_validate)

    p_rep = sub.add_parser("report", help="print a readable summary of validate outputs")
    p_rep.add_argument("--results", required=True, help="a validate --out directory")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (levelk.MissingLevelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
