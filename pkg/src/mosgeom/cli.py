"""Command-line entry point: train, bench, verify, dump-curvature.

Exit codes: 0 success, 1 run or suite failure, 2 usage error (argparse),
3 malformed config or checkpoint, 4 missing input file.

BLAS thread counts are pinned before numpy loads (the package __init__ is
import-light for exactly this reason) so benchmark timings are stable and
training runs are reproducible machine to machine.
"""
import argparse
import configparser
import os
import sys

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4


class ConfigError(Exception):
    pass


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


# --------------------------------------------------------------- config

def _convert(raw, kind, key, section):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "intlist":
            return tuple(int(p) for p in raw.split(","))
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(
            f"bad value {raw!r} for {key!r} in [{section}]") from None


_SECTION_SPECS = {
    "task": {"kind": str, "n_samples": int, "seed": int, "noise": float,
             "test_fraction": float, "branching": int, "depth": int,
             "modulus": int, "width": float},
    "layer": {"hidden": int, "n_experts": int, "top_k": int,
              "group_sizes": "intlist", "rank": int,
              "aux_coefficient": float, "gamma": float,
              "epsilon_zero": float, "hyperbolic_init": float,
              "spherical_init": float},
    "optimizer": {"base_lr": float, "curvature_lr_scale": float,
                  "weight_decay": float, "batch_size": int, "epochs": int},
    "schedule": {"warmup_ratio": float},
}

_TASK_KIND_KEYS = {
    "hierarchy": {"branching", "depth", "n_samples", "seed", "noise",
                  "test_fraction"},
    "cycle": {"modulus", "width", "n_samples", "seed", "noise",
              "test_fraction"},
    "mixed": {"branching", "depth", "modulus", "n_samples", "seed", "noise",
              "test_fraction"},
}


def parse_train_config(path):
    """Strict INI parse into per-section dicts of typed values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    sections = {}
    for name in parser.sections():
        if name not in _SECTION_SPECS:
            raise ConfigError(f"unknown section [{name}]")
        spec = _SECTION_SPECS[name]
        out = {}
        for key, raw in parser[name].items():
            if key not in spec:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            out[key] = _convert(raw, spec[key], key, name)
        sections[name] = out
    task = sections.get("task", {})
    kind = task.get("kind", "hierarchy")
    if kind not in _TASK_KIND_KEYS:
        raise ConfigError(f"unknown task kind {kind!r}")
    extra = set(task) - _TASK_KIND_KEYS[kind] - {"kind"}
    if extra:
        raise ConfigError(
            f"key(s) {sorted(extra)} do not apply to task kind {kind!r}")
    return sections


def _resolve_seed(config_seed, flag_seed):
    """Priority: MOSGEOM_SEED env, then --seed, then the config value."""
    seed = config_seed
    if flag_seed is not None:
        seed = flag_seed
    env = os.environ.get("MOSGEOM_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"MOSGEOM_SEED must be an integer, got {env!r}")
    return seed


def _int_list(text):
    try:
        values = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


# ----------------------------------------------------------- subcommands

def cmd_train(args):
    if not os.path.isfile(args.config):
        return _fail(EXIT_MISSING, f"config file not found: {args.config}")
    try:
        sections = parse_train_config(args.config)
        seed = _resolve_seed(sections.get("task", {}).get("seed", 0),
                             args.seed)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))

    from .layer import LayerConfig, LayerError
    from .tasks import TaskError, make_task
    from .training import ModelConfig, TrainingError, train

    task_kw = dict(sections.get("task", {}))
    kind = task_kw.pop("kind", "hierarchy")
    task_kw["seed"] = seed
    layer_kw = dict(sections.get("layer", {}))
    hidden = layer_kw.pop("hidden", 64)
    opt_kw = dict(sections.get("optimizer", {}))
    epochs = opt_kw.pop("epochs", 3)
    sched_kw = sections.get("schedule", {})
    try:
        task = make_task(kind, **task_kw)
        layer_config = LayerConfig(d_in=task.dim, d_out=hidden, **layer_kw)
        model_config = ModelConfig(hidden=hidden, **opt_kw, **sched_kw)
    except (TaskError, LayerError, TrainingError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        records = train(task, model_config, layer_config, epochs=epochs,
                        seed=seed, checkpoint_path=args.checkpoint,
                        trajectory_path=args.trajectory)
    except (TrainingError, LayerError) as exc:
        return _fail(EXIT_FAILURE, f"training failed: {exc}")
    final = records[-1]
    print(f"task={kind} dim={task.dim} classes={task.n_classes} "
          f"steps={final.step + 1} seed={seed}")
    print(f"final loss {final.loss:.6f} aux {final.aux_loss:.6f} "
          f"eval accuracy {final.eval_accuracy}")
    print(f"wrote {args.trajectory} and {args.checkpoint}")
    return EXIT_OK


def cmd_bench(args):
    from .bench import BenchConfig, BenchError, bench_mapping
    try:
        seed = _resolve_seed(0, args.seed)
        config = BenchConfig(dims=args.dims, depths=args.depths,
                             batch=args.batch, repeats=args.repeats,
                             warmup_iters=args.warmup,
                             precision=args.precision, seed=seed)
    except (BenchError, ConfigError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        report = bench_mapping(config)
    except BenchError as exc:
        return _fail(EXIT_FAILURE, str(exc))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    print(f"backend={report.backend} precision={report.precision} "
          f"batch={report.batch} repeats={report.repeats_used}"
          f"{' (auto-increased)' if report.auto_increased else ''}")
    print(f"identity check max error {report.identity_error:.3e}")
    for method, total in sorted(report.totals.items()):
        print(f"total {method:7s} {total:12.1f} us")
    for cell in sorted(report.speedups):
        print(f"speedup {cell:>10s}  {report.speedups[cell]:.2f}x")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_verify(args):
    from .verify import SUITES, format_report, run_suites
    names = args.suite
    if names:
        unknown = sorted(set(names) - set(SUITES))
        if unknown:
            return _fail(EXIT_USAGE,
                         f"unknown suite(s): {', '.join(unknown)}; "
                         f"choose from {', '.join(SUITES)}")
    try:
        seed = _resolve_seed(0, args.seed)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    results = run_suites(names, seed=seed)
    print(format_report(results, verbose=args.verbose))
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAILURE


def cmd_dump_curvature(args):
    if not os.path.isfile(args.checkpoint):
        return _fail(EXIT_MISSING,
                     f"checkpoint not found: {args.checkpoint}")
    from .checkpoint import CheckpointError, load_checkpoint
    try:
        _config, experts, _router, _extras, _opt = \
            load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        return _fail(EXIT_CONFIG, f"bad checkpoint: {exc}")
    print("expert,group,kappa,learnable")
    for i, expert in enumerate(experts):
        print(f"{i},{expert.group_tag},{expert.curvature.kappa!r},"
              f"{int(expert.curvature.learnable)}")
    return EXIT_OK


# ----------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mosgeom",
        description="mixture-of-space geometric expert layers: training, "
                    "mapping benchmark, and self-checks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a synthetic task")
    p_train.add_argument("--config", required=True,
                         help="INI file with [task]/[layer]/[optimizer]/"
                              "[schedule] sections")
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
    p_train.add_argument("--trajectory", default="trajectory.csv",
                         help="output CSV of per-step training records")
    p_train.add_argument("--checkpoint", default="checkpoint.bin",
                         help="output checkpoint container")
    p_train.set_defaults(func=cmd_train)

    p_bench = sub.add_parser(
        "bench", help="time the unified mapping against exp/log")
    p_bench.add_argument("--dims", type=_int_list,
                         default=(512, 1024, 2048, 4096),
                         help="comma-separated layer widths")
    p_bench.add_argument("--depths", type=_int_list, default=(1, 8, 16, 32),
                         help="comma-separated layer counts")
    p_bench.add_argument("--batch", type=int, default=64,
                         help="rows per timed call")
    p_bench.add_argument("--repeats", type=int, default=7,
                         help="timed repeats per cell (median reported)")
    p_bench.add_argument("--warmup", type=int, default=2,
                         help="untimed warmup iterations")
    p_bench.add_argument("--precision", choices=("single", "double"),
                         default="single", help="array precision of the sweep")
    p_bench.add_argument("--seed", type=int, default=None,
                         help="weight and input seed")
    p_bench.add_argument("--out", default="bench_report.json",
                         help="output JSON report path")
    p_bench.set_defaults(func=cmd_bench)

    p_verify = sub.add_parser("verify", help="run the library self-checks")
    p_verify.add_argument("--suite", action="append", default=None,
                          help="suite name; repeatable (default: all)")
    p_verify.add_argument("--seed", type=int, default=None,
                          help="base seed for the suite RNGs")
    p_verify.add_argument("--verbose", action="store_true",
                          help="print every check, not just failures")
    p_verify.set_defaults(func=cmd_verify)

    p_dump = sub.add_parser(
        "dump-curvature",
        help="print per-expert curvature from a checkpoint")
    p_dump.add_argument("checkpoint", help="checkpoint file written by train")
    p_dump.set_defaults(func=cmd_dump_curvature)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
