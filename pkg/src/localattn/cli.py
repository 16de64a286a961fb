"""Command-line entry point: verify, bench, train, bandmass, forecast.

Exit codes: 0 success, 1 suite or run failure, 2 usage error. Every
command is deterministic under a fixed --seed.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import resource
import sys
import time
from dataclasses import dataclass

import numpy as np

from .attention import attention_band_mass, full_attention, prob_attention, sample_count
from .data import (
    Scaler,
    baseline_metrics,
    load_csv,
    standardize_split_window,
    synth_series,
    write_manifest,
)
from .lam import LamCounters, default_window, lam_forward
from .model import (
    ForecastModel,
    ModelConfig,
    TrainDivergenceError,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tensor import Tensor, op_counter
from .verify import run_all

__all__ = ["main", "BenchRecord", "bench_records", "parse_config", "BENCH_HEADER"]

BENCH_HEADER = "mechanism,n,L,d_model,wall_ns,dot_products,peak_score_elements,seed"

# memory guard for the quadratic baseline: an n x n float64 score matrix
# plus operands must fit comfortably; larger cells are skipped, not crashed
MEM_LIMIT_BYTES = int(3.5 * 2**30)

CONFIG_KEYS = {
    "kind": str,
    "n": int,
    "m": int,
    "d_model": int,
    "N": int,
    "h": int,
    "L": int,
    "lr": float,
    "epochs": int,
    "batch": int,
    "seed": int,
}

# the sines preset: matches the toy-forecasting acceptance setup
DEFAULT_CONFIG = {
    "kind": "lam",
    "n": 96,
    "m": 24,
    "d_model": 8,
    "N": 2,
    "h": 2,
    "lr": 1e-2,
    "epochs": 20,
    "batch": 32,
    "seed": 0,
}


class UsageError(ValueError):
    """Bad flags, files, or config values; maps to exit code 2."""


# -- verify ------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = run_all(
        trials=args.trials, seed=args.seed, inject_fault=args.inject_fault is not None
    )
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return 1 if failed else 0


# -- bench -------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRecord:
    mechanism: str
    n: int
    window: int
    d_model: int
    wall_ns: int
    dot_products: int
    peak_score_elements: int
    seed: int

    def csv_row(self) -> str:
        return (
            f"{self.mechanism},{self.n},{self.window},{self.d_model},"
            f"{self.wall_ns},{self.dot_products},{self.peak_score_elements},{self.seed}"
        )


def resolve_band(rule: str, n: int) -> int:
    """Band size for one n under an --l-rule value; fixed:<k> clamps to n."""
    if rule in ("4ceil", "ceil4"):
        return default_window(n, rule=rule)
    if rule.startswith("fixed:"):
        try:
            k = int(rule.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad --l-rule {rule!r}: fixed:<k> needs an integer")
        if k < 1:
            raise UsageError(f"bad --l-rule {rule!r}: band must be >= 1")
        return min(k, n)
    raise UsageError(f"unknown --l-rule {rule!r}; expected 4ceil, ceil4 or fixed:<k>")


def _estimated_bytes(mechanism: str, n: int, window: int, d: int) -> int:
    operands = 4 * n * d * 8
    if mechanism == "full":
        return n * n * 8 + operands
    if mechanism == "lam":
        s = max(n // window, 1)
        return s * window * (2 * window - 1) * 8 + 2 * s * (2 * window - 1) * d * 8 + operands
    u = sample_count(n)
    return 2 * n * u * 8 + operands


def _run_mechanism(mechanism: str, q, k, v, window: int, seed: int):
    """One forward; returns (dot_products, peak_score_elements)."""
    if mechanism == "lam":
        counters = LamCounters()
        lam_forward(q, k, v, window, counters=counters)
        return counters.dot_products, counters.peak_score_elements
    if mechanism == "full":
        counters = LamCounters()
        full_attention(q, k, v, counters=counters)
        return counters.dot_products, counters.peak_score_elements
    n = q.shape[0]
    before = op_counter().dot_products
    prob_attention(q, k, v, seed=seed)
    return op_counter().dot_products - before, n * sample_count(n)


def bench_records(n_list, mechanisms, l_rule, repeats, d_model, seed):
    """Timed records plus (mechanism, n, reason) skip notes.

    Each cell is a single attention forward on seeded operands, timed
    as the median of ``repeats`` runs after one warm-up. Counter columns
    come from the deterministic element accounting, not the clock.
    """
    records = []
    skipped = []
    for n in n_list:
        window = resolve_band(l_rule, n)
        rng = np.random.default_rng(seed + n)
        q = Tensor._wrap(rng.normal(size=(n, d_model)))
        k = Tensor._wrap(rng.normal(size=(n, d_model)))
        v = Tensor._wrap(rng.normal(size=(n, d_model)))
        for mechanism in mechanisms:
            need = _estimated_bytes(mechanism, n, window, d_model)
            if need > MEM_LIMIT_BYTES:
                skipped.append(
                    (mechanism, n, window, f"estimated {need} bytes > {MEM_LIMIT_BYTES}")
                )
                continue
            try:
                dots, peak = _run_mechanism(mechanism, q, k, v, window, seed)
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    _run_mechanism(mechanism, q, k, v, window, seed)
                    times.append(time.perf_counter_ns() - t0)
            except MemoryError:
                skipped.append((mechanism, n, window, "MemoryError during run"))
                continue
            records.append(
                BenchRecord(
                    mechanism=mechanism,
                    n=n,
                    window=window,
                    d_model=d_model,
                    wall_ns=int(np.median(times)),
                    dot_products=dots,
                    peak_score_elements=peak,
                    seed=seed,
                )
            )
    return records, skipped


def fit_slopes(records):
    """Least-squares slope of log(wall_ns) vs log(n) per mechanism."""
    slopes = {}
    by_mech: dict[str, list] = {}
    for r in records:
        by_mech.setdefault(r.mechanism, []).append(r)
    for mechanism, rows in by_mech.items():
        if len(rows) < 2:
            continue
        x = np.log([r.n for r in rows])
        y = np.log([r.wall_ns for r in rows])
        slopes[mechanism] = float(np.polyfit(x, y, 1)[0])
    return slopes


def cmd_bench(args) -> int:
    n_list = _parse_int_list(args.n_list, "--n-list")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise UsageError(f"--n-list must be strictly ascending, got {n_list}")
    mechanisms = [m.strip() for m in args.mechanisms.split(",") if m.strip()]
    bad = [m for m in mechanisms if m not in ("full", "lam", "prob")]
    if bad or not mechanisms:
        raise UsageError(f"--mechanisms must name full, lam and/or prob, got {args.mechanisms!r}")
    if args.repeats < 5:
        raise UsageError(f"--repeats must be >= 5 for a stable median, got {args.repeats}")

    records, skipped = bench_records(
        n_list, mechanisms, args.l_rule, args.repeats, args.d_model, args.seed
    )
    lines = [BENCH_HEADER]
    lines += [r.csv_row() for r in records]
    for mechanism, n, window, reason in skipped:
        # empty measurement cells keep the 8-column schema for skipped cells
        lines.append(f"{mechanism},{n},{window},{args.d_model},,,,{args.seed}")
        lines.append(f"# skipped: mechanism={mechanism} n={n} reason={reason}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as handle:
            handle.write(text)
        print(f"wrote {len(records)} records to {args.out}")
    else:
        print(text, end="")

    for mechanism, n, window, reason in skipped:
        print(f"skipped {mechanism} at n={n}: {reason}")
    slopes = fit_slopes(records)
    for mechanism in mechanisms:
        if mechanism in slopes:
            print(f"slope({mechanism}) = {slopes[mechanism]:.3f}")
    if "full" in slopes and "lam" in slopes:
        print(f"slope(full) - slope(lam) = {slopes['full'] - slopes['lam']:.3f}")
    rss_kib = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    print(f"peak RSS (informational): {rss_kib} KiB")
    return 0


# -- train -------------------------------------------------------------------


def parse_config(path: str) -> dict:
    """Flat key=value config; unknown keys are an error naming the key."""
    values = {}
    try:
        with open(path) as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](raw)
        except ValueError:
            raise UsageError(
                f"{path}:{lineno}: bad value {raw!r} for {key} "
                f"(expected {CONFIG_KEYS[key].__name__})"
            )
    return values


def _load_series(source: str, samples: int, d: int, seed: int):
    if source.endswith(".csv"):
        if not os.path.exists(source):
            raise UsageError(f"data file not found: {source}")
        return load_csv(source)
    if source in ("sines", "trend_season", "ar_noise"):
        return synth_series(source, samples, d=d, seed=seed)
    raise UsageError(
        f"--data must be sines, trend_season, ar_noise or a .csv path, got {source!r}"
    )


def cmd_train(args) -> int:
    config = dict(DEFAULT_CONFIG)
    if args.config:
        config.update(parse_config(args.config))
    if args.seed is not None:
        config["seed"] = args.seed

    raw = _load_series(args.data, args.samples, args.d_features, config["seed"])
    dataset = standardize_split_window(
        raw, n=config["n"], m=config["m"], stride=args.stride
    )
    model_config = ModelConfig(
        d_features=raw.d,
        n=config["n"],
        m=config["m"],
        d_model=config["d_model"],
        num_layers=config["N"],
        heads=config["h"],
        window=config.get("L"),
        kind=config["kind"],
        seed=config["seed"],
    )
    model = ForecastModel(model_config)
    print(
        f"training kind={model_config.kind} on {len(dataset.train)} windows "
        f"(val {len(dataset.val)}, test {len(dataset.test)})"
    )
    try:
        report = train(
            model,
            dataset,
            epochs=config["epochs"],
            lr=config["lr"],
            batch=config["batch"],
            log=print,
        )
    except TrainDivergenceError as exc:
        print(f"training diverged: {exc}")
        for key, curve in exc.history.items():
            print(f"  last finite {key}: {curve[-3:] if curve else '[]'}")
        return 1

    os.makedirs(args.out, exist_ok=True)
    loss_path = os.path.join(args.out, "loss.csv")
    with open(loss_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_mse", "val_mse", "train_mae", "val_mae"])
        for epoch in range(report.epochs_run):
            writer.writerow(
                [
                    epoch,
                    repr(report.train_mse[epoch]),
                    repr(report.val_mse[epoch]),
                    repr(report.train_mae[epoch]),
                    repr(report.val_mae[epoch]),
                ]
            )
    ckpt_path = save_checkpoint(
        model,
        os.path.join(args.out, "checkpoint.npz"),
        scaler=dataset.scaler,
        feature_names=dataset.feature_names,
    )
    write_manifest(os.path.join(args.out, "manifest.txt"), dataset)

    base_mse, base_mae = baseline_metrics(dataset.test)
    print(f"epochs run: {report.epochs_run} (early stop: {report.stopped_early})")
    if report.test_mse is not None:
        print(f"test mse: {report.test_mse:.6f}  (repeat-last baseline {base_mse:.6f})")
        print(f"test mae: {report.test_mae:.6f}  (repeat-last baseline {base_mae:.6f})")
    print(f"wrote {ckpt_path}, {loss_path}")
    return 0


# -- bandmass ------------------------------------------------------------------


def _capture_projected_qk(model: ForecastModel, x: Tensor):
    """Run one forward recording each attention block's projected (q, k)."""
    cfg = model.config
    labels = []
    for i in range(cfg.num_layers):
        labels += [f"enc{i}"] * cfg.heads
    for i in range(cfg.num_layers):
        labels += [f"dec{i}.self"] * cfg.heads
        labels += [f"dec{i}.cross"] * cfg.heads
    captured = []
    real_inner = model._inner()

    def probe(ops, q, k, v):
        captured.append((ops.value(q), ops.value(k)))
        return real_inner(ops, q, k, v)

    model.forward(x, inner=probe)
    if len(captured) != len(labels):
        raise RuntimeError(
            f"captured {len(captured)} attention calls, expected {len(labels)}"
        )
    head_cycle = [h for h in range(cfg.heads)] * (len(labels) // cfg.heads)
    return [(labels[i], head_cycle[i], q, k) for i, (q, k) in enumerate(captured)]


def cmd_bandmass(args) -> int:
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        model, scaler, _ = load_checkpoint(args.checkpoint)
    else:
        model = ForecastModel(
            ModelConfig(
                d_features=args.d_features,
                n=args.n,
                m=1,
                d_model=args.d_model,
                num_layers=args.layers,
                heads=args.heads,
                kind="full",
                seed=args.seed,
            )
        )
        scaler = None
    cfg = model.config

    raw = synth_series("sines", cfg.n, d=cfg.d_features, seed=args.seed)
    if scaler is None:
        scaler = Scaler.fit(raw.values)
    x = Tensor._wrap(scaler.transform(raw.values))

    if args.l_list:
        bands = _parse_int_list(args.l_list, "--l-list")
        if any(not 1 <= b <= cfg.n for b in bands):
            raise UsageError(f"--l-list values must lie in [1, {cfg.n}]")
    else:
        bands = sorted({2**p for p in range(int(math.log2(cfg.n)) + 1)} | {cfg.n})

    lines = ["layer,head,L,band_mass"]
    for label, head, q, k in _capture_projected_qk(model, x):
        for band in bands:
            mass = attention_band_mass(q, k, band)
            lines.append(f"{label},{head},{band},{mass!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as handle:
            handle.write(text)
        print(f"wrote {len(lines) - 1} rows to {args.out}")
    else:
        print(text, end="")
    return 0


# -- forecast -------------------------------------------------------------------


def cmd_forecast(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, scaler, _ = load_checkpoint(args.checkpoint)
    if scaler is None:
        raise UsageError(
            f"{args.checkpoint} carries no scaler; train via the CLI to embed one"
        )
    raw = load_csv(args.input)
    cfg = model.config
    if raw.d != cfg.d_features:
        raise UsageError(
            f"{args.input} has {raw.d} features, checkpoint expects {cfg.d_features}"
        )
    if raw.length < cfg.n:
        raise UsageError(
            f"{args.input} has {raw.length} usable rows, need at least {cfg.n}"
        )
    window = scaler.transform(raw.values[-cfg.n :])
    pred = model.forward(Tensor._wrap(window))
    out_values = scaler.inverse(pred.data)
    names = list(raw.feature_names)  # header matches the input file's features
    with open(args.out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for row in out_values:
            writer.writerow([repr(float(v)) for v in row])
    print(f"wrote {out_values.shape[0]} forecast rows to {args.out}")
    return 0


# -- plumbing ---------------------------------------------------------------------


def _parse_int_list(text: str, flag: str):
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"{flag} must be comma-separated integers, got {text!r}")
    if not values:
        raise UsageError(f"{flag} must not be empty")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localattn",
        description="Banded local attention: verification, benchmarks, toy forecasting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the self-verification suites")
    p.add_argument("--trials", type=int, default=200, help="randomized case count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--inject-fault",
        choices=["pad-guard"],
        default=None,
        help="test-only: disable the first-block padding mask to prove the suites catch it",
    )
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time attention mechanisms over a range of n")
    p.add_argument("--n-list", default="512,1024,2048,4096,8192,16384")
    p.add_argument("--mechanisms", default="lam,full")
    p.add_argument(
        "--l-rule",
        default="4ceil",
        help="band rule: 4ceil (4*ceil(log2 n)), ceil4 (ceil(4*log2 n)) or fixed:<k>",
    )
    p.add_argument("--repeats", type=int, default=5, help="timing repetitions (>= 5)")
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train the forecaster on synthetic or CSV data")
    p.add_argument("--config", default=None, help="key=value file; keys: " + ", ".join(CONFIG_KEYS))
    p.add_argument("--data", default="sines", help="sines | trend_season | ar_noise | <path>.csv")
    p.add_argument("--samples", type=int, default=20000, help="synthetic series length")
    p.add_argument("--d-features", type=int, default=3, help="synthetic feature count")
    p.add_argument("--stride", type=int, default=8, help="training window stride")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default="train_out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bandmass", help="report attention mass inside trailing bands")
    p.add_argument("--checkpoint", default=None, help="model to inspect (random when omitted)")
    p.add_argument("--n", type=int, default=96)
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--d-features", type=int, default=3)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--l-list", default=None, help="band sizes; default: powers of two up to n")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_bandmass)

    p = sub.add_parser("forecast", help="forecast m steps from the last n rows of a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="input series CSV")
    p.add_argument("--out", required=True, help="forecast CSV to write")
    p.set_defaults(func=cmd_forecast)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
