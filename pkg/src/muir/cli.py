"""``muir synthetic|theory|decompose|analyze --config <path> [--out <dir>] [--seeds a,b,c]``.

Independent jobs run on a process pool whose size comes from ``MUIR_WORKERS``
(default 1). Every run directory gets a ``manifest.json`` listing each emitted
file with its sha256.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io
from .bank import BankConfig, generality_stats, parameter_counts, parsimony_threshold
from .config import ConfigError, ExperimentConfig, TheorySweep, load_with_overrides
from .decomposition import ConfigurationError, decompose_architecture
from .synthetic import SETUPS, generate_synthetic, grouping_score
from .theory import EAParams, EATrialResult, fit_scaling, ordering_check, run_trials

log = logging.getLogger("muir")

WORKERS_ENV = "MUIR_WORKERS"


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1")
    return n


def _map(fn, jobs: list[tuple]) -> list:
    """Run ``fn(*job)`` for each job, in order; exceptions come back as values."""
    n = min(workers(), max(len(jobs), 1))
    if n == 1:
        return [_guarded(fn, *job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(_guarded, fn, *job) for job in jobs]
        return [f.result() for f in futures]


def _guarded(fn, *args):
    try:
        return fn(*args)
    except Exception as e:  # reported per job, the sweep keeps going
        return {"error": f"{type(e).__name__}: {e}", "traceback": traceback.format_exc()}


def mean_stderr(values) -> dict:
    v = np.asarray(values, dtype=float)
    n = len(v)
    return {
        "n": n,
        "mean": float(v.mean()) if n else None,
        "stderr": float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0 if n else None,
        "median": float(np.median(v)) if n else None,
    }


# ---------------------------------------------------------------- synthetic


def _synthetic_job(setup: str, seed: int, cfg: ExperimentConfig, out: Path) -> dict:
    ts = generate_synthetic(seed, cfg.dataset)
    mcfg = replace(cfg.muir, seed=seed)
    if setup == "stl":
        res = SETUPS[setup](ts, mcfg)
    else:
        res = SETUPS[setup](ts, mcfg, cfg.bank.c, cfg.bank.sigma_h_rule, cfg.bank.context_scale)
    job_dir = out / setup / f"seed_{seed}"
    job_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "setup": setup,
        "seed": seed,
        "test_rmse": res.test_rmse,
        "test_rmse_per_task": res.test_rmse_per_task,
        "val_rmse": res.val_rmse,
        "best_generation": res.best_generation,
        "generations_run": len(res.history) - 1,
    }
    io.write_csv(job_dir / "history.csv", res.history)
    if res.psi is not None:
        scores = [h["grouping_score"] for h in res.history]
        first = next((g for g, s in enumerate(scores) if s == ts.n_tasks), None)
        summary.update(
            final_grouping_score=grouping_score(res.psi, ts.groups),
            final_active_K=len(set(res.psi)),
            first_perfect_generation=first,
            stayed_perfect=None if first is None else all(s == ts.n_tasks for s in scores[first:]),
        )
        io.write_json(
            job_dir / "alignment.json",
            {
                "groups": ts.groups,
                "generations": [h["generation"] for h in res.history],
                "grouping_score": scores,
                "alignments": res.alignments,
                "final": res.psi,
            },
        )
        io.save_checkpoint(job_dir / "checkpoint", res.model.bank, res.psi, seed, {"setup": setup})
    io.write_json(job_dir / "result.json", summary)
    return summary


def cmd_synthetic(cfg: ExperimentConfig, out: Path) -> int:
    man = io.RunManifest("synthetic", io.config_hash(cfg.to_dict()), list(cfg.seeds))
    jobs = [(setup, seed, cfg, out) for setup in cfg.setups for seed in cfg.seeds]
    outcomes = _map(_synthetic_job, jobs)
    setups: dict[str, dict] = {}
    for (setup, seed, _, _), res in zip(jobs, outcomes):
        if "error" in res:
            man.failed.append({"setup": setup, "seed": seed, "error": res["error"]})
            log.error("%s seed %d failed: %s", setup, seed, res["error"])
            continue
        setups.setdefault(setup, {"per_seed": {}})["per_seed"][str(seed)] = res
    table = {}
    for setup in cfg.setups:
        per = setups.get(setup, {"per_seed": {}})["per_seed"]
        rmses = [per[k]["test_rmse"] for k in sorted(per, key=int)]
        entry = {
            "test_rmse": mean_stderr(rmses),
            "per_seed": {k: per[k]["test_rmse"] for k in sorted(per, key=int)},
        }
        if setup != "stl" and per:
            firsts = [per[k]["first_perfect_generation"] for k in per]
            entry["reached_perfect_grouping"] = sum(f is not None for f in firsts)
            entry["stayed_perfect_grouping"] = sum(bool(per[k]["stayed_perfect"]) for k in per)
        table[setup] = entry
        log.info("%-7s %s", setup, _fmt(entry["test_rmse"]))
    io.write_json(out / "results.json", {"noisy": cfg.dataset.noisy, "setups": table})
    man.add_tree(out)
    man.write(out)
    return 0 if man.ok else 1


def _fmt(ms: dict) -> str:
    if not ms["n"]:
        return "no runs"
    return f"{ms['mean']:.4f} +- {ms['stderr']:.4f} (median {ms['median']:.4f}, n={ms['n']})"


# ---------------------------------------------------------------- theory


def _theory_job(sweep: TheorySweep, L: int, K: int, D: int, seed: int, chunk: int) -> list[dict]:
    params = EAParams(L, K, D, sweep.lam, sweep.sampling, sweep.init, sweep.max_iter)
    return [r.as_row() for r in run_trials(params, sweep.trials, seed, chunk)]


def _job_seed(base: int, i: int, j: int) -> int:
    return int(np.random.SeedSequence([base, i, j]).generate_state(1)[0])


def cmd_theory(cfg: ExperimentConfig, out: Path) -> int:
    base = cfg.seeds[0]
    man = io.RunManifest("theory", io.config_hash(cfg.to_dict()), [base])
    jobs, tags = [], []
    for i, sweep in enumerate(cfg.theory.sweeps):
        for j, (L, K, D) in enumerate(sweep.grid()):
            jobs.append((sweep, L, K, D, _job_seed(base, i, j), cfg.theory.chunk))
            tags.append(sweep.name)
    outcomes = _map(_theory_job, jobs)
    rows, by_sweep = [], {s.name: [] for s in cfg.theory.sweeps}
    for job, tag, res in zip(jobs, tags, outcomes):
        if isinstance(res, dict):
            man.failed.append({"sweep": tag, "L": job[1], "K": job[2], "D": job[3], "error": res["error"]})
            continue
        for r in res:
            rows.append({"sweep": tag, **r})
            by_sweep[tag].append(EATrialResult(**r))
    io.write_csv(out / "trials.csv", rows)
    report = {}
    for sweep in cfg.theory.sweeps:
        results = by_sweep[sweep.name]
        entry = {"config": asdict(sweep), "n_trials": len(results), "all_reached": all(r.reached for r in results)}
        if not results:
            entry["verdict"] = "inconclusive"
        elif sweep.check == "ordering":
            chk = ordering_check(results, sweep.min_ratio)
            entry["ordering"] = chk
            entry["verdict"] = "pass" if chk["ordered"] and entry["all_reached"] else "fail"
        else:
            fit = fit_scaling(results, sweep.by, sweep.predictor)
            entry["fit"] = fit.as_dict()
            means = fit.mean_iterations
            entry["ratios"] = [means[k + 1] / means[k] for k in range(len(means) - 1)]
            if not fit.conclusive:
                entry["verdict"] = "inconclusive"
            else:
                entry["verdict"] = "pass" if fit.r2 >= sweep.r2_min else "fail"
        report[sweep.name] = entry
        log.info("%-12s %s", sweep.name, entry["verdict"])
    io.write_json(out / "scaling_report.json", report)
    man.add_tree(out)
    man.write(out)
    return 0 if man.ok else 1


# ---------------------------------------------------------------- decompose

NOTES = [
    "counts cover weight kernels only; biases and normalization parameters are not decomposed",
    "the first and last layers are reserved as unshared adapters",
]
KNOWN_COUNTS = {"wrn-40-1": 2268, "stacked-lstm-256": 4096, "deepbind-256": 6400}


def decompose_report(cfg: ExperimentConfig) -> dict:
    sec = cfg.decompose
    m, n, c = cfg.bank.m, cfg.bank.n, cfg.bank.c
    layers = sec.layer_specs()
    locs = decompose_architecture(layers, m, n, sec.policy, sec.reserve_adapters)
    per_layer = {}
    for loc in locs:
        per_layer[loc.layer] = per_layer.get(loc.layer, 0) + 1
    L = len(locs)
    bank_cfg = BankConfig(c=c, m=m, n=n)
    notes = list(NOTES) if sec.reserve_adapters else NOTES[:1]
    body = layers[1:-1] if sec.reserve_adapters else layers
    layer_rows = [
        {
            "name": spec.name,
            "kind": spec.kind,
            "in": spec.in_size,
            "out": spec.out_size,
            "kernel": list(spec.kernel) if spec.kernel else None,
            "params": spec.param_count(),
            "blocks": per_layer.get(spec.name, 0),
            "adapter": spec not in body,
        }
        for spec in layers
    ]
    if sec.policy == "truncate":
        dropped = sum(r["params"] for r in layer_rows if not r["adapter"]) - L * m * n
        notes.append(f"truncate policy discarded {dropped} overflowing parameters")
    if sec.architecture in KNOWN_COUNTS:
        expected = KNOWN_COUNTS[sec.architecture]
        if L != expected or (m, n) != (16, 16):
            notes.append(f"builtin {sec.architecture} gives {expected} blocks at m=n=16; this report uses m={m}, n={n}")
    original = L * m * n
    return {
        "architecture": sec.architecture or "custom",
        "m": m,
        "n": n,
        "c": c,
        "policy": sec.policy,
        "L": L,
        "layers": layer_rows,
        "params": {
            "original": original,
            "reparameterized_pessimistic": L * c + L * c * m * n if c else original,
            "parsimony_threshold_K": parsimony_threshold(L, bank_cfg) if c else None,
        },
        "notes": notes,
    }


def cmd_decompose(cfg: ExperimentConfig, out: Path) -> int:
    man = io.RunManifest("decompose", io.config_hash(cfg.to_dict()), list(cfg.seeds))
    report = decompose_report(cfg)
    io.write_json(out / "decompose.json", report)
    print(f"{report['architecture']}: L={report['L']} blocks of {report['m']}x{report['n']}")
    man.add_tree(out)
    man.write(out)
    return 0


# ---------------------------------------------------------------- analyze


def _nonincreasing_from(values: list[float]) -> int | None:
    """First index from which the sequence never increases again."""
    if not values:
        return None
    start = len(values) - 1
    while start > 0 and values[start - 1] >= values[start]:
        start -= 1
    return start


def analyze_checkpoint(stem: Path) -> dict:
    bank, psi, meta = io.load_checkpoint(stem)
    usage = np.bincount(psi, minlength=bank.capacity)
    hist: dict[str, int] = {}
    for u in usage[usage > 0]:
        hist[str(int(u))] = hist.get(str(int(u)), 0) + 1
    entry = {
        "checkpoint": str(stem),
        "meta": {k: meta[k] for k in ("bank", "L", "seed", "extra")},
        "parameter_counts": parameter_counts(psi, bank),
        "usage_histogram": dict(sorted(hist.items(), key=lambda kv: int(kv[0]))),
        "generality": generality_stats(psi, bank),
    }
    history = stem.parent / "history.csv"
    if history.exists():
        rows = io.read_csv(history)
        traj = {
            "generation": [int(r["generation"]) for r in rows],
            "active_K": [int(r["active_K"]) for r in rows],
            "params_reparameterized": [int(r["params_reparameterized"]) for r in rows],
            "params_inference": [int(r["params_inference"]) for r in rows],
        }
        traj["nonincreasing_from"] = _nonincreasing_from(traj["params_reparameterized"])
        entry["parameter_trajectory"] = traj
    return entry


def cmd_analyze(cfg: ExperimentConfig, out: Path) -> int:
    run = Path(cfg.analyze.run_dir)
    stems = sorted(p.with_suffix("") for p in run.rglob("checkpoint.json"))
    if not stems:
        raise FileNotFoundError(f"no checkpoint under {run}")
    man = io.RunManifest("analyze", io.config_hash(cfg.to_dict()), list(cfg.seeds))
    report = {}
    for stem in stems:
        key = str(stem.parent.relative_to(run))
        try:
            report[key] = analyze_checkpoint(stem)
        except (io.CheckpointError, OSError, ValueError) as e:
            man.failed.append({"checkpoint": key, "error": str(e)})
    io.write_json(out / "analysis.json", report)
    for key, entry in report.items():
        g = entry["generality"]
        print(f"{key}: {g['n_generic_modules']} generic, {g['n_specific_modules']} specific modules")
    man.add_tree(out)
    man.write(out)
    return 0 if man.ok else 1


COMMANDS = {
    "synthetic": cmd_synthetic,
    "theory": cmd_theory,
    "decompose": cmd_decompose,
    "analyze": cmd_analyze,
}


def parse_args(argv=None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="muir", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML or JSON experiment config")
    p.add_argument("--out", help="run directory (overrides 'out' in the config)")
    p.add_argument("--seeds", help="comma-separated seed list (overrides 'seeds')")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scalar config field, e.g. muir.n_gen=50")
    p.add_argument("-v", "--verbose", action="store_true")
    return p.parse_args(argv)


def _parse_seeds(raw: str | None):
    if raw is None:
        return None
    parts = [s for s in raw.split(",") if s.strip()]
    try:
        return [int(s) for s in parts]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {raw!r}") from None


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        seeds = _parse_seeds(args.seeds)
        cfg = load_with_overrides(args.config, args.set, seeds=seeds, out=args.out)
        if cfg.kind != args.command:
            raise ConfigError(f"config kind {cfg.kind!r} does not match command {args.command!r}")
        workers()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "config.snapshot", cfg.to_dict())
    try:
        return COMMANDS[args.command](cfg, out)
    except (ConfigurationError, FileNotFoundError, io.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        man = io.RunManifest(args.command, io.config_hash(cfg.to_dict()), list(cfg.seeds))
        man.failed.append({"error": str(e)})
        man.add_tree(out)
        man.write(out)
        return 1


if __name__ == "__main__":
    sys.exit(main())
