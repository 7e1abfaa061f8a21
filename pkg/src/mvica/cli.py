"""Command-line front end: ``mvica simulate | separate | bench | eval``.

Exit codes: 0 success, 2 usage error, 3 data error (bad files, shapes,
geometry, I/O), 4 numerical failure.
"""

import argparse
import datetime
import logging
import os
import sys
import warnings
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .algorithms import (
    ALGOS,
    NEEDS_ORACLE,
    OracleInfo,
    SeparatorConfig,
    oracle_masks,
    read_masks,
    separate,
    write_demixing,
)
from .errors import BSSError, DataError, LengthMismatch, NumericalError, ShapeMismatch, UsageError
from .metrics import evaluate_scenario, failed_rows, report_rows, write_csv
from .roomsim import export_scenario, load_scenario, make_scenario
from .stft import analyze, read_wav, synthesize, write_wav

log = logging.getLogger("mvica")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
DEFAULT_ALGOS = "mvica-oracle,idlma-oracle,auxiva"
# float32 WAVs: images re-read from disk sum to the mixture only to ~1e-7
FILE_ORACLE_RTOL = 1e-5

DEFAULTS = {
    "seed": 0,
    "algo": "mvica-oracle",
    "algos": DEFAULT_ALGOS,
    "iters": 50,
    "L": 5,
    "eps": 1e-6,
    "frame": 4096,
    "hop": None,
    "workers": 1,
    "n_scenarios": 1,
    "sources": 2,
    "rt60": "100:400",
    "duration": 8.0,
    "mask_kind": "ratio",
}
INT_KEYS = {"seed", "iters", "L", "frame", "hop", "workers", "n_scenarios", "sources"}
FLOAT_KEYS = {"eps", "duration"}


# --- configuration -------------------------------------------------------------


def read_config(path):
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    cfg = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            cfg[key] = value
    return cfg


def _coerce(key, value):
    if value is None:
        return None
    try:
        if key in INT_KEYS:
            return int(value)
        if key in FLOAT_KEYS:
            return float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(args):
    """Merge defaults < config file < command-line flags."""
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        merged.update(read_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    opts = {k: _coerce(k, v) for k, v in merged.items()}
    if opts["hop"] is None:
        opts["hop"] = opts["frame"] // 2
    if opts["n_scenarios"] < 1:
        raise UsageError("n_scenarios must be at least 1")
    if opts["sources"] < 2:
        raise UsageError("need at least 2 sources")
    if opts["workers"] < 1:
        raise UsageError("workers must be at least 1")
    return opts


def parse_rt60(spec):
    """``"300"`` (fixed), ``"100,200,300"`` (cycled) or ``"100:400"`` (uniform range), in ms."""
    spec = str(spec).strip()
    try:
        if ":" in spec:
            lo, hi = (float(v) for v in spec.split(":"))
            if not 0 < lo <= hi:
                raise ValueError
            return ("range", (lo, hi))
        values = [float(v) for v in spec.split(",")]
        if min(values) <= 0:
            raise ValueError
    except ValueError as exc:
        raise UsageError(f"bad rt60 specification {spec!r}") from exc
    return ("list", values)


def rt60_for(spec, index, seed):
    """rt60 in ms for the ``index``-th scenario, deterministic in ``seed``."""
    kind, vals = parse_rt60(spec)
    if kind == "list":
        return vals[index % len(vals)]
    rng = np.random.default_rng([seed, 60])
    return float(np.round(rng.uniform(*vals)))


def separator_config(opts, algo=None):
    try:
        return SeparatorConfig(
            algo=algo or opts["algo"],
            iterations=opts["iters"],
            L=opts["L"],
            eps_load=opts["eps"],
            seed=opts["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def check_algo(algo):
    if algo not in ALGOS:
        raise UsageError(f"unknown algorithm {algo!r}; choose from {', '.join(ALGOS)}")


# --- shared pipeline ---------------------------------------------------------------


def run_algorithm(scn, algo, opts, oracle=None, masks=None, rtol=1e-10):
    """Separate a scenario's mixture and return time-domain estimates (K, n)."""
    S = analyze(scn.mixture, opts["frame"], opts["hop"], scn.fs)
    if oracle is None and (algo in NEEDS_ORACLE or algo == "mvica-mask"):
        oracle = OracleInfo.from_images(scn.images, opts["frame"], opts["hop"], rtol=rtol)
        oracle.check(S.data)
    if algo == "mvica-mask" and masks is None:
        masks = oracle_masks(S.data, oracle.images, opts.get("mask_kind", "ratio"))
    W, Y = separate(S.data, separator_config(opts, algo), oracle, masks)
    return W, synthesize(S.with_data(Y))


def bench_cell(job):
    """Simulate one scenario and evaluate every algorithm on it.

    Failures of individual algorithms become ``failed=1`` rows.
    """
    index, seed, rt60_ms, opts, algos = job
    K = opts["sources"]
    rows = []
    try:
        scn = make_scenario(seed, K, rt60_ms / 1000.0, opts["duration"])
    except BSSError as exc:
        log.warning("scenario %d: %s", seed, exc)
        return [r for algo in algos for r in failed_rows(seed, algo, int(rt60_ms), K)]
    for algo in algos:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                _, y = run_algorithm(scn, algo, opts)
                report = evaluate_scenario(y, scn.images, scn.mixture)
            rows += report_rows(report, seed, algo, int(rt60_ms))
        except (BSSError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("seed %d, %s failed: %s", seed, algo, exc)
            rows += failed_rows(seed, algo, int(rt60_ms), K)
    return rows


def summarize(rows):
    """Mean SIR/SDR deltas grouped by (algo, rt60 bucket, K).

    rt60 buckets are 100 ms wide and labelled by their lower edge.
    """
    groups = defaultdict(list)
    for r in rows:
        if int(r["failed"]):
            continue
        bucket = int(float(r["rt60_ms"]) // 100 * 100)
        groups[(r["algo"], bucket, int(r["n_sources"]))].append(r)
    out = []
    for (algo, bucket, K), grp in sorted(groups.items()):
        out.append({
            "algo": algo,
            "rt60_bucket_ms": bucket,
            "n_sources": K,
            "n_rows": len(grp),
            "sir_delta_db": f"{np.mean([float(r['sir_delta_db']) for r in grp]):.6f}",
            "sdr_delta_db": f"{np.mean([float(r['sdr_delta_db']) for r in grp]):.6f}",
        })
    return out


# --- subcommands -------------------------------------------------------------------


def cmd_simulate(opts, out):
    dirs = []
    for i in range(opts["n_scenarios"]):
        seed = opts["seed"] + i
        rt60_ms = rt60_for(opts["rt60"], i, seed)
        scn = make_scenario(seed, opts["sources"], rt60_ms / 1000.0, opts["duration"])
        path = os.path.join(out, f"scene_{seed:04d}") if opts["n_scenarios"] > 1 else out
        export_scenario(scn, path)
        log.info("wrote %s (rt60 %g ms)", path, rt60_ms)
        dirs.append(path)
    return dirs


def cmd_separate(opts, mixture, out, mask=None, oracle_dir=None):
    x, fs = read_wav(mixture)
    K = x.shape[0]
    if K < 2:
        raise ShapeMismatch(f"{mixture} has {K} channel(s); need at least 2")
    algo = opts["algo"]
    check_algo(algo)
    if algo in NEEDS_ORACLE and oracle_dir is None:
        raise UsageError(f"{algo} needs --oracle SCENARIO_DIR")
    if algo == "mvica-mask" and mask is None and oracle_dir is None:
        raise UsageError("mvica-mask needs --mask FILE (or --oracle to derive masks)")

    scn = load_scenario(oracle_dir) if oracle_dir else None
    if scn is not None and scn.mixture.shape != x.shape:
        raise ShapeMismatch(f"oracle mixture {scn.mixture.shape} vs {mixture} {x.shape}")
    S = analyze(x, opts["frame"], opts["hop"], fs)
    masks = read_masks(mask) if mask else None
    if masks is not None and masks.shape != S.data.shape:
        raise ShapeMismatch(f"mask file holds {masks.shape}, mixture needs {S.data.shape}")
    oracle = None
    if scn is not None and (algo in NEEDS_ORACLE or masks is None):
        oracle = OracleInfo.from_images(scn.images, opts["frame"], opts["hop"], rtol=FILE_ORACLE_RTOL)
        oracle.check(S.data)
    if algo == "mvica-mask" and masks is None:
        masks = oracle_masks(S.data, oracle.images, opts["mask_kind"])

    W, Y = separate(S.data, separator_config(opts), oracle, masks)
    y = synthesize(S.with_data(Y))
    os.makedirs(out, exist_ok=True)
    for k in range(K):
        write_wav(os.path.join(out, f"y_{k}.wav"), y[k], fs)
    write_demixing(os.path.join(out, "demixing.bin"), W)
    if scn is not None:
        report = evaluate_scenario(y, scn.images, scn.mixture)
        rt60_ms = scn.meta.get("rt60_ms", "")
        write_csv(os.path.join(out, "report.csv"), report_rows(report, scn.seed, algo, rt60_ms))
        log.info("%s: SIR improvement %.2f dB", algo, float(np.mean(report.sir_delta)))
    return W


def cmd_bench(opts, out, timestamp=None):
    algos = [a.strip() for a in str(opts["algos"]).split(",") if a.strip()]
    if not algos:
        raise UsageError("no algorithms given")
    for a in algos:
        check_algo(a)
    parse_rt60(opts["rt60"])
    jobs = []
    for i in range(opts["n_scenarios"]):
        seed = opts["seed"] + i
        jobs.append((i, seed, rt60_for(opts["rt60"], i, seed), opts, algos))

    if opts["workers"] > 1:
        with ProcessPoolExecutor(max_workers=opts["workers"]) as pool:
            results = list(pool.map(bench_cell, jobs))
    else:
        results = [bench_cell(job) for job in jobs]
    rows = [r for cell in results for r in cell]

    os.makedirs(out, exist_ok=True)
    stamp = timestamp or datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    write_csv(os.path.join(out, "bench.csv"), rows, header_comment=f"generated {stamp}")
    summary = summarize(rows)
    cols = ["algo", "rt60_bucket_ms", "n_sources", "n_rows", "sir_delta_db", "sdr_delta_db"]
    with open(os.path.join(out, "summary.csv"), "w") as fh:
        fh.write(",".join(cols) + "\n")
        for s in summary:
            fh.write(",".join(str(s[c]) for c in cols) + "\n")
    return rows, summary


def cmd_eval(estimates_dir, scenario_dir, out=None):
    scn = load_scenario(scenario_dir)
    K = scn.images.shape[0]
    ests = []
    for k in range(K):
        y, _ = read_wav(os.path.join(estimates_dir, f"y_{k}.wav"))
        ests.append(y[0])
    lengths = {len(e) for e in ests} | {scn.mixture.shape[1]}
    if len(lengths) != 1:
        raise LengthMismatch(f"estimate lengths {sorted(lengths)} differ from the mixture")
    report = evaluate_scenario(np.stack(ests), scn.images, scn.mixture)
    rows = report_rows(report, scn.seed, "eval", scn.meta.get("rt60_ms", ""))
    write_csv(out or os.path.join(estimates_dir, "eval.csv"), rows)
    return report


# --- entry point -------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (or CSV path for eval)")
    common.add_argument("--frame", type=int, help="STFT frame size (power of two)")
    common.add_argument("--hop", type=int)
    common.add_argument("--algo", help=f"one of {', '.join(ALGOS)}")
    common.add_argument("--iters", type=int, help="sweeps for iterative methods")
    common.add_argument("--L", dest="L", type=int, help="MVICA passes")
    common.add_argument("--eps", type=float, help="relative diagonal loading")
    common.add_argument("--workers", type=int)

    p = argparse.ArgumentParser(prog="mvica", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", parents=[common], help="write scenario directories")
    sim.add_argument("--n-scenarios", dest="n_scenarios", type=int)
    sim.add_argument("--sources", type=int)
    sim.add_argument("--rt60", help="ms: 300 | 100,200,300 | 100:400")
    sim.add_argument("--duration", type=float, help="seconds")

    sep = sub.add_parser("separate", parents=[common], help="separate a mixture WAV")
    sep.add_argument("mixture")
    sep.add_argument("--mask", help="MSK1 mask file")
    sep.add_argument("--oracle", help="scenario directory with ground truth")

    bench = sub.add_parser("bench", parents=[common], help="benchmark sweep")
    bench.add_argument("--algos", help=f"comma list (default {DEFAULT_ALGOS})")
    bench.add_argument("--n-scenarios", dest="n_scenarios", type=int)
    bench.add_argument("--sources", type=int)
    bench.add_argument("--rt60", help="ms: 300 | 100,200,300 | 100:400")
    bench.add_argument("--duration", type=float, help="seconds")

    ev = sub.add_parser("eval", parents=[common], help="score estimates against a scenario")
    ev.add_argument("estimates", help="directory with y_k.wav")
    ev.add_argument("scenario", help="scenario directory")
    return p


def setup_logging():
    level = os.environ.get("BSS_LOG_LEVEL", "warn").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"BSS_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")
    if LOG_LEVELS[level] > logging.WARNING:
        warnings.simplefilter("ignore")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging()
        opts = resolve(args)
        if args.command == "simulate":
            cmd_simulate(opts, args.out or ".")
        elif args.command == "separate":
            cmd_separate(opts, args.mixture, args.out or ".", args.mask, args.oracle)
        elif args.command == "bench":
            _, summary = cmd_bench(opts, args.out or "bench_out")
            for s in summary:
                print(f"{s['algo']:<20} rt60 {s['rt60_bucket_ms']:>3} ms  K={s['n_sources']}  "
                      f"dSIR {float(s['sir_delta_db']):7.2f} dB  dSDR {float(s['sdr_delta_db']):7.2f} dB")
        elif args.command == "eval":
            report = cmd_eval(args.estimates, args.scenario, args.out)
            for k in range(len(report.sir)):
                print(f"source {k}: SIR {report.sir[k]:.2f} dB  SDR {report.sdr[k]:.2f} dB  "
                      f"SI-SDR {report.si_sdr[k]:.2f} dB")
    except UsageError as exc:
        print(f"mvica: error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"mvica: numerical failure: {exc}", file=sys.stderr)
        return 4
    except (DataError, OSError, ValueError) as exc:
        print(f"mvica: data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
