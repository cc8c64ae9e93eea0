"""Command-line entry point: ``fedce run|compare|attack CONFIG --out DIR``.

Exit codes: 0 success, 1 runtime failure, 2 invalid config.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from ._validation import ConfigError
from .aggregation import RULES
from .attacks import SCORE_POISONING
from .config import SCHEMA, load_config
from .harness import ExperimentConfig, ExperimentResult, paired_runs, run_experiment
from .stats import AD_P_CAP, TAILS, anderson_darling_k2, loss_divergence_monitor, paired_t_test, rmse

logger = logging.getLogger("fedce")


def fmt(value) -> str:
    """Shortest round-trip text for floats; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str, header: list[str], rows) -> str:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def write_manifest(out_dir: str, config: ExperimentConfig, command: str, artifacts: list[str],
                   started: float) -> str:
    manifest = {
        "command": command,
        "name": config.name,
        "experiment_id": config.experiment_id,
        "config_hash": config.config_hash(),
        "config": config.canonical(),
        "artifacts": sorted(os.path.basename(a) for a in artifacts),
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def score_rows(result: ExperimentResult):
    cfg = result.config
    eid = cfg.experiment_id
    for rep in result.repetitions:
        for k in range(cfg.K):
            for m in cfg.ce_methods:
                yield (eid, rep.seed, m, cfg.aggregator.rule, k,
                       float(rep.final_raw[m][k]), float(rep.final[m].values[k]))


def round_rows(result: ExperimentResult):
    cfg = result.config
    for rep in result.repetitions:
        for rec in rep.records:
            kept = None if rec.zeno_kept is None else ";".join(str(i) for i in rec.zeno_kept)
            scores = [float(rec.normalized[m].values[k]) for m in cfg.ce_methods for k in range(cfg.K)]
            yield (rep.seed, rec.t, rec.loss, rec.accuracy, rec.krum_selected, kept, *scores)


def round_header(cfg: ExperimentConfig) -> list[str]:
    base = ["seed", "round", "global_loss", "global_accuracy", "krum_selected", "zeno_kept"]
    return base + [f"{m}_client{k}" for m in cfg.ce_methods for k in range(cfg.K)]


def cmd_run(config: ExperimentConfig, out_dir: str, workers: int = 1) -> list[str]:
    started = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    result = run_experiment(config, workers)
    paths = [
        write_csv(os.path.join(out_dir, "scores.csv"),
                  ["experiment_id", "seed", "ce_method", "aggregator", "client", "raw_score", "norm_score"],
                  score_rows(result)),
        write_csv(os.path.join(out_dir, "rounds.csv"), round_header(config), round_rows(result)),
    ]
    paths.append(write_manifest(out_dir, config, "run", paths, started))
    return paths


def _ad_or_nan(a, b) -> float:
    if len(a) < 2 or len(b) < 2:
        return math.nan
    return anderson_darling_k2(a, b)


def cmd_compare(config: ExperimentConfig, aggregators: list[str], out_dir: str, workers: int = 1) -> list[str]:
    """Run ``config`` under each rule with shared seeds and compare to FedAvg."""
    started = time.perf_counter()
    if not aggregators:
        raise ConfigError("the aggregator list must not be empty", "aggregators")
    rules = ["fedavg"] + [a for a in dict.fromkeys(aggregators) if a != "fedavg"]
    for rule in rules:
        if rule not in RULES:
            raise ConfigError(f"unknown aggregation rule {rule!r}", "aggregators")
    results = {}
    for rule in rules:
        cfg = replace(config, aggregator=replace(config.aggregator, rule=rule))
        results[rule] = run_experiment(cfg, workers)
    os.makedirs(out_dir, exist_ok=True)

    compare, ad_rows, rmse_rows = [], [], []
    for rule in rules:
        for m in config.ce_methods:
            ref = results["fedavg"].final_matrix(m)
            mat = results[rule].final_matrix(m)
            err = rmse(mat.mean(axis=0), ref.mean(axis=0))
            rmse_rows.append((rule, m, err))
            for k in range(config.K):
                p = AD_P_CAP if rule == "fedavg" and len(ref) >= 2 else _ad_or_nan(mat[:, k], ref[:, k])
                sd = float(mat[:, k].std(ddof=1)) if len(mat) > 1 else 0.0
                compare.append((rule, m, k, float(mat[:, k].mean()), sd, p, err))
                ad_rows.append((rule, m, k, p))
    paths = [
        write_csv(os.path.join(out_dir, "compare.csv"),
                  ["aggregator", "ce_method", "client", "mean", "sd", "ad_p", "rmse"], compare),
        write_csv(os.path.join(out_dir, "ad_tests.csv"), ["aggregator", "ce_method", "client", "ad_p"], ad_rows),
        write_csv(os.path.join(out_dir, "rmse.csv"), ["aggregator", "ce_method", "rmse"], rmse_rows),
    ]
    paths.append(write_manifest(out_dir, config, "compare", paths, started))
    return paths


def _role(cfg: ExperimentConfig, k: int) -> str:
    if k == cfg.attack.attacker_id:
        return "attacker"
    if cfg.attack.kind == "targeted_decrease" and k == cfg.attack.target_id:
        return "target"
    return "benign"


def _ttest_row(label, diffs):
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.size < 2:
        return (label, diffs.size, float(diffs.mean()) if diffs.size else math.nan) + (math.nan,) * 3
    return (label, diffs.size, float(diffs.mean())) + tuple(paired_t_test(diffs, t) for t in TAILS)


def _scores(rep, t, method, scale):
    """Normalized or raw scores of one repetition, for round ``t`` or the final aggregate."""
    if t is None:
        return rep.final[method].values if scale == "norm" else rep.final_raw[method]
    rec = rep.records[t]
    return (rec.normalized if scale == "norm" else rec.raw)[method].values


def attack_tables(config: ExperimentConfig, baseline: ExperimentResult, attacked: ExperimentResult):
    """Rows for attack_diffs.csv, ttests.csv, losses.csv and divergence.csv."""
    K, T = config.K, config.T
    diffs, ttests, losses, divergence = [], [], [], []
    for m in config.ce_methods:
        for k in range(K):
            role = _role(config, k)
            for scale in ("norm", "raw"):
                per_round = [[] for _ in range(T)]
                final = []
                for rb, ra in zip(baseline.repetitions, attacked.repetitions):
                    for t in [*range(T), None]:
                        b = float(_scores(rb, t, m, scale)[k])
                        a = float(_scores(ra, t, m, scale)[k])
                        (final if t is None else per_round[t]).append(a - b)
                        rel = abs(a - b) / abs(b) if b != 0 else math.nan
                        diffs.append((rb.seed, "final" if t is None else t, m, k, role, scale, b, a, a - b, rel))
                for t in range(T):
                    ttests.append((m, k, role, scale) + _ttest_row(t, per_round[t]))
                ttests.append((m, k, role, scale) + _ttest_row("pooled", [d for r in per_round for d in r]))
                ttests.append((m, k, role, scale) + _ttest_row("final", final))
    for rb, ra in zip(baseline.repetitions, attacked.repetitions):
        for t in range(T):
            rec_b, rec_a = rb.records[t], ra.records[t]
            slack = rec_a.constraint_slack
            losses.append((rb.seed, t, rec_b.loss, rec_a.loss, rec_b.accuracy, rec_a.accuracy, slack,
                           None if rec_a.attack is None else rec_a.attack.flagged))
        for run, rep in (("baseline", rb), ("attack", ra)):
            flag = loss_divergence_monitor(rep.losses)
            divergence.append((rep.seed, run, flag.flagged, flag.first_round))
    # (seed, round, client, method), with each seed's "final" rows after its rounds
    diffs.sort(key=lambda r: (r[0], T if r[1] == "final" else r[1], r[3], config.ce_methods.index(r[2]),
                              r[5] != "norm"))
    return diffs, ttests, losses, divergence


def cmd_attack(config: ExperimentConfig, out_dir: str, workers: int = 1) -> list[str]:
    started = time.perf_counter()
    if config.attack.kind not in SCORE_POISONING:
        raise ConfigError(f"attack.kind must be one of {SCORE_POISONING}, got {config.attack.kind!r}",
                          "attack.kind")
    baseline, attacked = paired_runs(config, workers)
    diffs, ttests, losses, divergence = attack_tables(config, baseline, attacked)
    os.makedirs(out_dir, exist_ok=True)
    paths = [
        write_csv(os.path.join(out_dir, "attack_diffs.csv"),
                  ["seed", "round", "ce_method", "client", "role", "scale", "baseline", "attack", "delta",
                   "rel_delta"],
                  diffs),
        write_csv(os.path.join(out_dir, "ttests.csv"),
                  ["ce_method", "client", "role", "scale", "round", "n", "mean_delta",
                   "p_one_greater", "p_one_less", "p_two"], ttests),
        write_csv(os.path.join(out_dir, "losses.csv"),
                  ["seed", "round", "baseline_loss", "attack_loss", "baseline_accuracy", "attack_accuracy",
                   "constraint_slack", "infeasible_start"], losses),
        write_csv(os.path.join(out_dir, "divergence.csv"), ["seed", "run", "flagged", "first_round"],
                  divergence),
    ]
    paths.append(write_manifest(out_dir, config, "attack", paths, started))
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedce", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="YAML or JSON experiment config")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, help="override base_seed")
        p.add_argument("--repetitions", type=int, help="override the repetition count")
        p.add_argument("--workers", type=int, default=1,
                       help="processes running repetitions in parallel (results do not depend on it)")

    common(sub.add_parser("run", help="run an experiment and write scores.csv, rounds.csv"))
    cmp = sub.add_parser("compare", help="compare aggregation rules against FedAvg")
    common(cmp)
    cmp.add_argument("--aggregators", required=True,
                     help=f"comma-separated rules from {', '.join(RULES)}")
    common(sub.add_parser("attack", help="paired baseline and score-poisoning runs"))
    sub.add_parser("schema", help="print the config JSON schema")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "schema":
        json.dump(SCHEMA, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    try:
        config = load_config(args.config, seed=args.seed, repetitions=args.repetitions)
        if args.command == "run":
            paths = cmd_run(config, args.out, args.workers)
        elif args.command == "compare":
            paths = cmd_compare(config, [a.strip() for a in args.aggregators.split(",") if a.strip()],
                                args.out, args.workers)
        else:
            paths = cmd_attack(config, args.out, args.workers)
    except ConfigError as exc:
        print(f"config error ({exc.field or 'config'}): {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
