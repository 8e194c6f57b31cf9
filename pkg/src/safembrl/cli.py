"""Command line entry point: ``safembrl run | compare | validate``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import config as cfgmod
from . import lgm
from .mbrl_loop import run_experiment, write_logs

log = logging.getLogger("safembrl")

DEFAULT_OUT = "runs"
EXIT_CONFIG = 2


@dataclass
class RunManifest:
    run_id: str
    config: str          # YAML snapshot, byte-exact re-loadable
    seeds: list[int]
    out_dir: str
    version: str


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:
        pkg = "0.0.0"
    try:
        here = Path(__file__).resolve().parent
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{pkg}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{pkg}"


def parse_seeds(text: str) -> list[int]:
    """``"0-9"``, ``"1,4,7"`` or a mix such as ``"0-2,10"``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError("duplicate seeds")
    return seeds


def _log_alpha(text: str) -> float | None:
    if text.lower() in ("off", "none", "null"):
        return None
    return float(text)


def _output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("SAFEMBRL_OUT") or DEFAULT_OUT)


def _run_seed(job):
    cfg, seed, run_dir, run_id = job
    cfg = replace(cfg, seed=seed)
    seed_dir = Path(run_dir) / f"seed_{seed}"
    result = run_experiment(cfg, keep_models=True)
    (seed_dir / "models").mkdir(parents=True, exist_ok=True)
    for n, model in enumerate(result.models, start=1):
        lgm.save_checkpoint(model, seed_dir / "models" / f"trial_{n}.npz")
    return write_logs(result.logs, seed_dir, {"run_id": run_id, "seed": seed, "mode": cfg.mode.value})


def cmd_run(args) -> int:
    try:
        if args.config:
            cfg = cfgmod.load(args.config, mode=args.mode)
        else:
            cfg = cfgmod.from_dict({}, mode=args.mode)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    overrides = {}
    if args.ln_alpha_s is not None:
        overrides["ln_alpha_s"] = _log_alpha(args.ln_alpha_s)
    if args.ln_alpha_t is not None:
        overrides["ln_alpha_t"] = _log_alpha(args.ln_alpha_t)
    if args.n_trial is not None:
        overrides["n_trial"] = args.n_trial
    try:
        cfg = replace(cfg, **overrides)
        cfg.safety()
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    snapshot = cfgmod.dumps(cfg)
    run_id = args.run_id or f"{cfg.mode.value}-{hashlib.sha256(snapshot.encode()).hexdigest()[:10]}"
    run_dir = _output_root(args.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(snapshot)
    manifest = RunManifest(run_id, snapshot, list(args.seeds), str(run_dir), version_string())
    (run_dir / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2) + "\n")

    jobs = [(cfg, s, str(run_dir), run_id) for s in args.seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_run_seed, jobs))
    else:
        summaries = [_run_seed(j) for j in jobs]
    with open(run_dir / "summary.log", "w") as fh:
        for s in sorted(summaries, key=lambda r: r["seed"]):
            fh.write(json.dumps(s, sort_keys=True) + "\n")
    for s in summaries:
        acq = s["acquisition_trial"]
        print(f"seed {s['seed']}: acquisition trial {acq if acq is not None else 'never'}, "
              f"top-5% force {s['top_force_N']['5%']:.3f} N")
    print(f"wrote {run_dir}")
    return 0


# ---------------------------------------------------------------- compare

def read_summaries(run_dir) -> list[dict]:
    path = Path(run_dir) / "summary.log"
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def mean_ci(values, level=0.95) -> tuple[float, float]:
    """Mean and half-width of the Student-t confidence interval (nan for n < 2)."""
    x = np.asarray(values, dtype=float)
    m = float(np.mean(x))
    if x.size < 2:
        return m, math.nan
    half = stats.t.ppf(0.5 + level / 2, x.size - 1) * np.std(x, ddof=1) / math.sqrt(x.size)
    return m, float(half)


def compare_tables(run_dirs: list[str], acquisition_by: int = 8) -> dict[str, tuple[list[str], list[list]]]:
    """Tables keyed by name; each is ``(header, rows)``.  The first run is the reference."""
    runs = [(Path(d).name, read_summaries(d)) for d in run_dirs]
    with_ci = all(len(recs) > 1 for _, recs in runs)
    n_trials = max(len(r["trial_mean_tracking_error_m"]) for _, recs in runs for r in recs)

    header = ["trial"]
    for name, _ in runs:
        header += [f"{name}:err_mean_m"] + ([f"{name}:err_ci95_m"] if with_ci else []) + [f"{name}:K_s_mean"]
    rows = []
    for t in range(n_trials):
        row: list = [t + 1]
        for _, recs in runs:
            errs = [r["trial_mean_tracking_error_m"][t] for r in recs if t < len(r["trial_mean_tracking_error_m"])]
            ks = [r["trial_mean_k_s"][t] for r in recs if t < len(r["trial_mean_k_s"])]
            m, h = mean_ci(errs)
            row += [m] + ([h] if with_ci else []) + [float(np.mean(ks))]
        rows.append(row)
    tables = {"tracking": (header, rows)}

    fracs = list(runs[0][1][0]["top_force_N"])
    ref = {k: float(np.mean([r["top_force_N"][k] for r in runs[0][1]])) for k in fracs}
    header = ["run", "seeds"] + [f"top{k}_force_N" for k in fracs] + [f"top{k}_reduction_%" for k in fracs]
    rows = []
    for name, recs in runs:
        means = [float(np.mean([r["top_force_N"][k] for r in recs])) for k in fracs]
        red = [100.0 * (1.0 - m / ref[k]) if ref[k] > 0 else 0.0 for m, k in zip(means, fracs)]
        rows.append([name, len(recs)] + means + red)
    tables["forces"] = (header, rows)

    header = ["run", "seeds", "acquired", f"acquired_by_trial_{acquisition_by}", "acq_trial_mean", "acq_trial_ci95"]
    rows = []
    for name, recs in runs:
        acq = [r["acquisition_trial"] for r in recs]
        hit = [a for a in acq if a is not None]
        m, h = mean_ci(hit) if hit else (math.nan, math.nan)
        rows.append([name, len(recs), len(hit), sum(a <= acquisition_by for a in hit), m, h])
    tables["acquisition"] = (header, rows)
    return tables


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def format_tsv(tables) -> str:
    out = []
    for name, (header, rows) in tables.items():
        out.append(f"# {name}")
        out.append("\t".join(header))
        out.extend("\t".join(_fmt(v) for v in row) for row in rows)
    return "\n".join(out) + "\n"


def format_human(tables) -> str:
    out = []
    for name, (header, rows) in tables.items():
        cells = [header] + [[_fmt(v) for v in row] for row in rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
        out.append(f"== {name} ==")
        for r in cells:
            out.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        out.append("")
    return "\n".join(out)


def cmd_compare(args) -> int:
    try:
        tables = compare_tables(args.runs)
    except (OSError, json.JSONDecodeError, KeyError, IndexError) as exc:
        print(f"cannot read runs: {exc}", file=sys.stderr)
        return 1
    if args.format in ("table", "both"):
        print(format_human(tables))
    if args.format in ("tsv", "both"):
        text = format_tsv(tables)
        if args.tsv:
            Path(args.tsv).write_text(text)
        else:
            print(text, end="")
    elif args.tsv:
        Path(args.tsv).write_text(format_tsv(tables))
    return 0


def cmd_validate(args) -> int:
    from .validation import run_all

    ok = True
    for res in run_all(args.suite or None):
        ok &= res.passed
        print(f"{'PASS' if res.passed else 'FAIL'}  {res.name}: {res.detail} ({res.seconds:.1f} s)")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="safembrl", description="Contact-safe MBRL experiments on the arm surrogate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-trial progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment per seed")
    r.add_argument("--config", help="YAML configuration file")
    r.add_argument("--seeds", type=parse_seeds, default=[0], help="e.g. 0-9 or 1,3,5 (default 0)")
    r.add_argument("--out", help="output root (default $SAFEMBRL_OUT or ./runs)")
    r.add_argument("--jobs", type=int, default=1, help="parallel seed workers")
    r.add_argument("--mode", choices=["baseline1", "baseline2", "safe"], help="overrides mbrl_loop.mode")
    r.add_argument("--ln-alpha-s", help="log scaling awareness, or 'off'")
    r.add_argument("--ln-alpha-t", help="log translating awareness, or 'off'")
    r.add_argument("--n-trial", type=int, help="overrides mbrl_loop.n_trial")
    r.add_argument("--run-id", help="run directory name (default: mode plus config hash)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate runs; the first run is the reference")
    c.add_argument("runs", nargs="+", help="run directories")
    c.add_argument("--format", choices=["table", "tsv", "both"], default="both")
    c.add_argument("--tsv", help="write the TSV tables to this file instead of stdout")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("validate", help="run the oracle suites")
    v.add_argument("--suite", action="append", choices=["kernel", "moments", "limits"])
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
