"""Benchmark command line: `reppool-bench <subcommand> [flags]`.

Subcommands: topk-bench (selection quality/timing sweeps), grad-check
(finite-difference audit), complexity (attention op counting), train-toy
(scorer-ablation training on the needle task). Flags may also be supplied via
a JSON file (`--config`); explicit flags win. All CSV output is deterministic
given --seed, except the elapsed_seconds column.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from statistics import median

import numpy as np

from . import complexity, gradcheck, models, topk
from .attention import AttentionConfig
from .scorers import SCORE_KINDS, WINDOW_KINDS, ScorerSpec

TOPK_VARIANTS = ("halving-sorted", "halving-unsorted", "iterative", "hard-oracle")


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending field."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in str(text).split(",") if part != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    handle = open(path, "w", newline="") if path else sys.stdout
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if path:
            handle.close()


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags; unknown file keys are errors."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_values = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config: top level must be a JSON object")
        for key, value in file_values.items():
            norm = key.replace("-", "_")
            if norm not in defaults:
                raise ConfigError(f"config: unknown key {key!r}")
            merged[norm] = value
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            merged[key] = flag_value
    return merged


# ---------------------------------------------------------------------------
# topk-bench


TOPK_DEFAULTS = dict(
    n="64", k="8", tau=1.0, seeds=20, dim=16, reps=10, warmup=2, seed=0, out=None
)


def cmd_topk_bench(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, TOPK_DEFAULTS)
    n_list = _int_list(cfg["n"])
    k_list = _int_list(cfg["k"])
    if not n_list:
        raise ConfigError("n: sweep list is empty")
    if not k_list:
        raise ConfigError("k: sweep list is empty")
    tau = float(cfg["tau"])
    if tau < 1.0:
        raise ConfigError(f"tau: must be >= 1, got {tau}")
    seeds = int(cfg["seeds"])
    if seeds < 1:
        raise ConfigError("seeds: must be >= 1")
    dim = int(cfg["dim"])
    reps = int(cfg["reps"])
    warmup = int(cfg["warmup"])
    if reps < 1:
        raise ConfigError("reps: must be >= 1")
    for n in n_list:
        for k in k_list:
            if k >= n:
                raise ConfigError(f"k: {k} must be < n={n}")
            if k & (k - 1):
                raise ConfigError(f"k: {k} must be a power of two")

    rows = []
    for n in n_list:
        for k in k_list:
            for seed in range(seeds):
                cell = np.random.default_rng([int(cfg["seed"]), seed, n, k])
                E = cell.uniform(-1.0, 1.0, size=(n, dim))
                v = cell.uniform(0.0, 1.0, size=n)
                hard = topk.hard_topk(E, v, k)[0].value
                for variant in TOPK_VARIANTS:
                    run = _topk_variant_runner(variant, E, v, k, tau)
                    out, pair_ops = run()
                    for _ in range(warmup):
                        run()
                    times = []
                    for _ in range(reps):
                        t0 = time.perf_counter()
                        run()
                        times.append(time.perf_counter() - t0)
                    score = topk.nccs(out, hard)
                    rows.append([n, k, variant, seed, score, median(times), pair_ops])
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    _write_csv(cfg["out"], ["n", "k", "variant", "seed", "nccs", "elapsed_seconds", "pair_ops"], rows)
    return 0


def _topk_variant_runner(variant: str, E, v, k: int, tau: float):
    if variant == "halving-sorted":
        pool = topk.PoolConfig(k=k, tau=tau, sort=True)
        return lambda: _halving_out(E, v, pool)
    if variant == "halving-unsorted":
        pool = topk.PoolConfig(k=k, tau=tau, sort=False)
        return lambda: _halving_out(E, v, pool)
    if variant == "iterative":
        n = E.shape[0]
        return lambda: (topk.iterative_soft_topk(E, v, k, tau).value, k * n)
    if variant == "hard-oracle":
        return lambda: (topk.hard_topk(E, v, k)[0].value, 0)
    raise ConfigError(f"variant: unknown {variant!r}")


def _halving_out(E, v, pool):
    batch = topk.successive_halving_topk(E, v, pool)
    return batch.pooled.value, batch.pair_evals


# ---------------------------------------------------------------------------
# grad-check


GRAD_DEFAULTS = dict(seeds=1, seed=0, tol=1e-5, eps=1e-5, out=None)


def cmd_grad_check(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, GRAD_DEFAULTS)
    seeds = int(cfg["seeds"])
    if seeds < 1:
        raise ConfigError("seeds: must be >= 1")
    tol = float(cfg["tol"])
    entries = gradcheck.run_suite(seeds=seeds, base_seed=int(cfg["seed"]), eps=float(cfg["eps"]))
    rows = [[e.name, e.report.worst, int(e.report.worst < tol)] for e in entries]
    _write_csv(cfg["out"], ["op", "max_rel_error", "passed"], rows)
    failures = [e for e in entries if e.report.worst >= tol]
    if failures:
        worst = max(failures, key=lambda e: e.report.worst)
        print(f"FAIL {worst.name}: max relative error {worst.report.worst:.3e} >= {tol}",
              file=sys.stderr)
        return 1
    print(f"ok: {len(entries)} gradient checks within {tol}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# complexity


COMPLEXITY_DEFAULTS = dict(
    layers=6, n=8192, dim=768, target=512, block=512, k=512,
    schedule="8192,8192,2048,512,512,512", seed=0, out=None,
)


def cmd_complexity(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, COMPLEXITY_DEFAULTS)
    layers = int(cfg["layers"])
    n = int(cfg["n"])
    d = int(cfg["dim"])
    t = int(cfg["target"])
    m = int(cfg["block"])
    k = int(cfg["k"])
    schedule = tuple(_int_list(cfg["schedule"]))
    try:
        specs = {
            "vanilla": complexity.ArchSpec("vanilla", layers, n, d, t),
            "blockwise": complexity.ArchSpec("blockwise", layers, n, d, t, block_size=m),
            "transpooler": complexity.ArchSpec(
                "transpooler", layers, n, d, t, block_size=m, bottleneck=k
            ),
            "pyramidion": complexity.ArchSpec(
                "pyramidion", layers, n, d, t, block_size=m, bottleneck=k, schedule=schedule
            ),
        }
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    reports = {name: complexity.attn_mults(spec) for name, spec in specs.items()}
    ratios = complexity.compare(reports["blockwise"], reports["pyramidion"])

    header = ["item", *reports, "blockwise_over_pyramidion"]
    rows = []
    for item in (*complexity.OpCountReport.ITEMS, "total", "decoder_total"):
        rows.append([item, *(getattr(reports[a], item) for a in reports), ratios[item]])
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for line in [header, *rows]:
        print("  ".join(str(cell).rjust(w) for cell, w in zip(line, widths)))
    print(f"cross-attention ratio: {ratios['decoder_cross']}")
    print(f"self-attention ratio: {ratios['encoder_self']:.4f}")
    print(f"decoder total ratio (convention-dependent): {ratios['decoder_total']:.4f}")
    m_eff = m if m else n  # dense attention: the block spans the input
    mem = complexity.pyramid_memory(n, k, m_eff, d)
    print(f"pyramid attention memory: {mem:.6g} = {mem / (m_eff * n * d):.6g} * m*n*d")
    if cfg["out"]:
        _write_csv(cfg["out"], header, rows)
    return 0


# ---------------------------------------------------------------------------
# train-toy


TRAIN_DEFAULTS = dict(
    scorer="linear", steps=200, n=256, k=32, payloads=8, payload_vocab=16,
    noise_vocab=16, dim=64, heads=4, ffn=256, block=64, enc_layers=2,
    dec_layers=2, batch=8, lr=1e-3, tau=1.0, eval_every=50, eval_size=32,
    early_stop_auc=None, early_stop_accuracy=0.0, emb_scale=None, seed=0, out=None,
)


def cmd_train_toy(args: argparse.Namespace) -> int:
    cfg = _merge_config(args, TRAIN_DEFAULTS)
    kind = str(cfg["scorer"])
    if kind not in SCORE_KINDS + WINDOW_KINDS:
        raise ConfigError(f"scorer: unknown kind {kind!r}")
    steps = int(cfg["steps"])
    if steps < 0:
        raise ConfigError("steps: must be >= 0")
    task = models.TaskConfig(
        seq_len=int(cfg["n"]),
        payload_count=int(cfg["payloads"]),
        payload_vocab=int(cfg["payload_vocab"]),
        noise_vocab=int(cfg["noise_vocab"]),
        seed=int(cfg["seed"]),
    )
    scorer = ScorerSpec(kind, target_k=int(cfg["k"]), seed=int(cfg["seed"]))
    try:
        model_cfg = models.needle_model_config(
            task,
            model_dim=int(cfg["dim"]),
            head_count=int(cfg["heads"]),
            ffn_dim=int(cfg["ffn"]),
            block_size=int(cfg["block"]),
            bottleneck=int(cfg["k"]),
            encoder_layers=int(cfg["enc_layers"]),
            decoder_layers=int(cfg["dec_layers"]),
            scorer=scorer,
            pool_tau=float(cfg["tau"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    emb_scale = cfg["emb_scale"]
    model = models.PooledEncoderDecoder(
        model_cfg, seed=int(cfg["seed"]),
        emb_init_scale=None if emb_scale is None else float(emb_scale),
    )
    early_auc = cfg["early_stop_auc"]
    report = models.train_toy(
        model,
        task,
        steps,
        lr=float(cfg["lr"]),
        batch_size=int(cfg["batch"]),
        eval_every=int(cfg["eval_every"]),
        eval_size=int(cfg["eval_size"]),
        early_stop_auc=None if early_auc is None else float(early_auc),
        early_stop_accuracy=float(cfg["early_stop_accuracy"]),
    )
    rows = [[step, loss, auc, acc] for step, loss, auc, acc in report.history]
    _write_csv(cfg["out"], ["step", "loss", "auc", "seq_accuracy"], rows)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reppool-bench",
        description="Desk-scale pooling benchmarks: selection quality, gradients, op counts, toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p):
        p.add_argument("--seed", type=int, help="base RNG seed (default 0)")
        p.add_argument("--out", type=str, help="output path (default: stdout)")
        p.add_argument("--csv", action="store_true", help="accepted for compatibility; output is always CSV")
        p.add_argument("--config", type=str, help="JSON file of flag values; flags override")

    p = sub.add_parser("topk-bench", help="selection quality and timing sweep")
    p.add_argument("--n", type=str, help="comma-separated input lengths")
    p.add_argument("--k", type=str, help="comma-separated selection sizes (powers of two)")
    p.add_argument("--tau", type=float, help="pair softmax sharpness (>= 1)")
    p.add_argument("--seeds", type=int, help="instances per (n, k) point")
    p.add_argument("--dim", type=int, help="row width of the sampled matrices")
    p.add_argument("--reps", type=int, help="timed repetitions per cell (median reported)")
    p.add_argument("--warmup", type=int, help="untimed warmup repetitions")
    shared(p)
    p.set_defaults(func=cmd_topk_bench)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    p.add_argument("--seeds", type=int, help="sampling seeds per case")
    p.add_argument("--tol", type=float, help="pass/fail threshold (default 1e-5)")
    p.add_argument("--eps", type=float, help="finite-difference step")
    shared(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("complexity", help="attention multiplication counts and ratios")
    p.add_argument("--layers", type=int, help="encoder/decoder layer count")
    p.add_argument("--n", type=int, help="input length")
    p.add_argument("--dim", type=int, help="model width")
    p.add_argument("--target", type=int, help="decoder target length")
    p.add_argument("--block", type=int, help="attention block size")
    p.add_argument("--k", type=int, help="bottleneck size")
    p.add_argument("--schedule", type=str, help="comma-separated per-layer lengths")
    shared(p)
    p.set_defaults(func=cmd_complexity)

    p = sub.add_parser("train-toy", help="needle-task training with a chosen scorer")
    p.add_argument("--scorer", type=str, help="linear|nonlinear|power-like|embedding|random|index|mean-window|max-window")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--n", type=int, help="sequence length")
    p.add_argument("--k", type=int, help="bottleneck size")
    p.add_argument("--payloads", type=int, help="payload tokens per sequence")
    p.add_argument("--payload-vocab", dest="payload_vocab", type=int)
    p.add_argument("--noise-vocab", dest="noise_vocab", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn", type=int)
    p.add_argument("--block", type=int)
    p.add_argument("--enc-layers", dest="enc_layers", type=int)
    p.add_argument("--dec-layers", dest="dec_layers", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-size", dest="eval_size", type=int)
    p.add_argument("--early-stop-auc", dest="early_stop_auc", type=float)
    p.add_argument("--early-stop-accuracy", dest="early_stop_accuracy", type=float)
    p.add_argument("--emb-scale", dest="emb_scale", type=float,
                   help="embedding init stddev; 0 gives an exactly uniform untrained head")
    shared(p)
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: out: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
