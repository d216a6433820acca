"""Command-line entry point: ``tbpinn {gen,train,eval,rollout,verify}``.

Options can also come from a ``--config`` file of ``key=value`` lines (``#``
starts a comment); flags given on the command line win. Keys are the long
option names, with dashes or underscores.

Exit codes: 0 success, 1 verification failure, 2 bad arguments (including
too few simulations to split), 3 I/O or
file-format error, 4 divergence, 5 configuration mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import datagen, evaluate, verification
from .dynamics import PhysicsConfig
from .errors import ConfigMismatchError, DivergenceError, EmptySplitError, FormatError
from .integrator import IntegratorConfig
from .loss import AlphaSchedule, LossConfig, ScheduleKind
from .network import Formulation, NetworkConfig
from .trainer import TrainConfig, assemble_pairs, read_checkpoint, train, write_checkpoint

EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_MISMATCH = 5


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _optional_float(text: str):
    return None if str(text).strip().lower() in ("none", "off", "") else float(text)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _default_workers() -> int:
    env = os.environ.get("TBP_WORKERS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


_REQUIRED = object()


class _Options:
    """Collects option defaults so files and flags can be layered."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.defaults: dict[str, object] = {}
        self.types: dict[str, object] = {}
        parser.add_argument("--config", default=argparse.SUPPRESS, help="key=value file with option values")

    def add(self, flag: str, default, type=str, help: str = "", **kw):
        dest = flag.lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        self.types[dest] = type
        shown = "required" if default is _REQUIRED else ("none" if default is None else default)
        self.parser.add_argument(flag, dest=dest, type=type, default=argparse.SUPPRESS, help=f"{help} (default: {shown})", **kw)


def _read_config(path: str, opts: _Options) -> dict:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc}") from None
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key=value")
        if key not in opts.defaults:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            values[key] = opts.types[key](value.strip())
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return values


def _resolve(ns: argparse.Namespace, opts: _Options) -> argparse.Namespace:
    merged = dict(opts.defaults)
    given = vars(ns)
    if "config" in given:
        merged.update(_read_config(given["config"], opts))
    merged.update({k: v for k, v in given.items() if k in opts.defaults})
    missing = [k for k, v in merged.items() if v is _REQUIRED]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return argparse.Namespace(**merged)


# --- subcommands ----------------------------------------------------------------


def _gen_options(p):
    o = _Options(p)
    o.add("--n", 2000, _positive_int, "number of simulations")
    o.add("--seed", 42, int, "master seed")
    o.add("--tol", 1e-10, float, "integrator tolerance")
    o.add("--dt", datagen.DEFAULT_DT, float, "sample spacing")
    o.add("--t-end", datagen.DEFAULT_T_END, float, "end time")
    o.add("--out", _REQUIRED, str, "output dataset path")
    o.add("--workers", _default_workers(), _positive_int, "worker processes (env TBP_WORKERS)")
    o.add("--timing", False, _bool, "record per-simulation wall time (makes files non-reproducible)")
    return o


def cmd_gen(a) -> int:
    icfg = IntegratorConfig(tolerance=a.tol)
    ds = datagen.generate_dataset(a.n, a.seed, PhysicsConfig(), icfg, a.dt, a.t_end, workers=a.workers, record_timing=a.timing)
    datagen.write_dataset(ds, a.out)
    stats = datagen.proximity_stats(ds)
    print(f"converged: {ds.meta.n_converged}/{ds.meta.n_requested}")
    print(
        f"failure rate: global {stats['global_failure_rate']:.4f}; within 0.1 of p2=(-0.5, 0): "
        f"{stats['near_failure_rate']:.4f} over {stats['near_count']} simulations"
    )
    return 0


def _train_options(p):
    o = _Options(p)
    o.add("--dataset", _REQUIRED, str, "dataset file")
    o.add("--out", _REQUIRED, str, "checkpoint path")
    o.add("--report", None, str, "train report CSV (default: train_report.csv next to the checkpoint)")
    o.add("--arch", "resnet", str, "dnn or resnet", choices=["dnn", "resnet"])
    o.add("--formulation", "nar", str, "nar (t -> state) or ar (state, dt -> next state)", choices=["nar", "ar"])
    o.add("--depth", 12, _positive_int, "hidden layers")
    o.add("--width", 256, _positive_int, "units per hidden layer")
    o.add("--activation", "relu", str, "activation", choices=["relu", "gelu", "tanh", "leaky_relu"])
    o.add("--pi", True, _bool, "physics-informed loss on/off")
    o.add("--alpha-schedule", "linear", str, "physics weight schedule", choices=[k.value for k in ScheduleKind])
    o.add("--alpha0", 0.001, float, "initial physics weight")
    o.add("--alpha-max", 0.75, float, "final physics weight")
    o.add("--ramp-epochs", 200, _positive_int, "epochs to reach alpha-max")
    o.add("--warmup-epochs", 0, int, "epochs at zero weight for the warmup schedule")
    o.add("--clamp", None, _optional_float, "upper cap on the physics loss")
    o.add("--extra-collocation", 0, int, "extra random collocation times per initial condition")
    o.add("--lr", 7.5e-4, float, "learning rate")
    o.add("--epochs", 500, _positive_int, "maximum epochs")
    o.add("--batch-size", 2048, _positive_int, "mini-batch size")
    o.add("--early-stop", 10, _positive_int, "early-stopping patience")
    o.add("--plateau-patience", 5, _positive_int, "epochs without improvement before decaying the learning rate")
    o.add("--plateau-factor", 0.7, float, "learning-rate decay factor")
    o.add("--grad-clip", 5.0, _optional_float, "global gradient-norm cap")
    o.add("--weight-decay", 1e-5, float, "decoupled weight decay")
    o.add("--split", 0.95, float, "training fraction of simulations")
    o.add("--max-sims", None, lambda s: None if s.lower() == "none" else _positive_int(s), "use only the first N converged simulations")
    o.add("--seed", 0, int, "initialisation and shuffling seed")
    o.add("--workers", _default_workers(), _positive_int, "parallelism cap (training is vectorised and single-process)")
    o.add("--timing", False, _bool, "write wall-time column to the report")
    o.add("--quiet", False, _bool, "suppress per-epoch lines")
    return o


def _load_dataset(path):
    return datagen.read_dataset(path)


def cmd_train(a) -> int:
    try:
        net = NetworkConfig(a.arch, a.depth, a.width, a.activation, a.formulation)
        schedule = AlphaSchedule(ScheduleKind(a.alpha_schedule), a.alpha0, a.alpha_max, a.ramp_epochs, a.warmup_epochs)
        if not a.pi:
            schedule = AlphaSchedule.off()
        loss_cfg = LossConfig(schedule, a.clamp, extra_collocation=a.extra_collocation)
        tcfg = TrainConfig(
            a.lr, a.epochs, a.batch_size, a.early_stop, a.plateau_patience, a.plateau_factor, a.grad_clip, a.weight_decay, a.split, a.seed
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = _load_dataset(a.dataset)
    data = ds if a.max_sims is None else ds.converged()[: a.max_sims]

    def show(row):
        if not a.quiet:
            print(
                f"epoch {row.epoch:4d}  alpha {row.alpha:.4g}  lr {row.learning_rate:.3g}  "
                f"train {row.train_data_loss:.5f}/{row.train_physics_loss:.4g}  val {row.val_data_loss:.5f}/{row.val_physics_loss:.4g}"
            )

    ck, report = train(data, net, loss_cfg, tcfg, progress=show)
    if a.max_sims is not None:
        ck = replace(ck, dataset_fingerprint=ds.fingerprint)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(ck, out)
    report_path = Path(a.report) if a.report else out.parent / "train_report.csv"
    report.write_csv(report_path, include_timing=a.timing)
    print(f"best epoch {report.best_epoch} ({report.stopped_reason.value}); checkpoint {out}; report {report_path}")
    return 0


def _eval_options(p):
    o = _Options(p)
    o.add("--checkpoint", _REQUIRED, str, "checkpoint file")
    o.add("--dataset", _REQUIRED, str, "dataset file")
    o.add("--out-dir", _REQUIRED, str, "directory for CSV reports")
    o.add("--split", "val", str, "evaluate on the checkpoint's validation split or all converged simulations", choices=["val", "all"])
    o.add("--max-sims", None, lambda s: None if s.lower() == "none" else _positive_int(s), "same restriction as used in training")
    o.add("--workers", _default_workers(), _positive_int, "parallelism cap (evaluation is vectorised and single-process)")
    return o


def _eval_records(ck, ds, split, max_sims):
    recs = ds.converged() if max_sims is None else ds.converged()[:max_sims]
    if split == "val":
        recs = ck.validation_split(recs)
    return recs


def cmd_eval(a) -> int:
    ck = read_checkpoint(a.checkpoint)
    ds = _load_dataset(a.dataset)
    ck.require(dt=ds.meta.dt)
    recs = _eval_records(ck, ds, a.split, a.max_sims)
    X, Y = assemble_pairs(recs, ck.network.formulation)
    pred = evaluate.predict(ck, X)
    report = evaluate.metrics(pred, Y)
    pi = evaluate.pi_error(ck, recs)
    series = evaluate.ecdf(evaluate.per_sample_mae(pred, Y))
    lag = evaluate.error_vs_time(ck, recs)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.write_metrics_csv(out / "metrics.csv", [(ck.model_name, ck.seed, report, pi.value)])
    evaluate.write_component_csv(out / "component_metrics.csv", evaluate.component_metrics(pred, Y))
    evaluate.write_ecdf_csv(out / "ecdf.csv", series)
    evaluate.write_lag_csv(out / "lag_error.csv", lag)
    print(f"model {ck.model_name} seed {ck.seed} on {len(recs)} simulations ({X.shape[0]} rows)")
    print(f"MAE {report.mae:.6g}  RMSE {report.rmse:.6g}  SMAPE {report.smape:.4g}%")
    print(f"physics-informed error {pi.value:.6g} ({pi.n_excluded} colliding rows excluded)")
    print(f"fraction of samples with MAE < 2: {series.fraction_below(2.0):.4f}")
    return 0


def _rollout_options(p):
    o = _Options(p)
    o.add("--checkpoint", _REQUIRED, str, "autoregressive checkpoint")
    o.add("--dataset", _REQUIRED, str, "dataset supplying the initial condition")
    o.add("--sim-id", 0, int, "simulation to start from")
    o.add("--steps", None, lambda s: None if s.lower() == "none" else int(s), "number of steps (default: match the simulation)")
    o.add("--out", _REQUIRED, str, "rollout CSV path")
    return o


def cmd_rollout(a) -> int:
    ck = read_checkpoint(a.checkpoint)
    ds = _load_dataset(a.dataset)
    ck.require(formulation=Formulation.AUTOREGRESSIVE, dt=ds.meta.dt)
    by_id = {r.sim_id: r for r in ds.records}
    if a.sim_id not in by_id:
        raise UsageError(f"no simulation with sim_id {a.sim_id}")
    rec = by_id[a.sim_id]
    steps = len(rec.trajectory) - 1 if a.steps is None else a.steps
    traj = evaluate.rollout(ck, rec.trajectory.states[0], steps, ds.meta.dt)
    evaluate.write_rollout_csv(a.out, traj)
    print(f"rolled out {steps} steps from sim_id {a.sim_id} into {a.out}")
    return 0


def _verify_options(p):
    o = _Options(p)
    o.add("--suite", "all", str, "which suite to run", choices=["dynamics", "integrator", "autodiff", "all"])
    return o


def cmd_verify(a) -> int:
    checks = verification.run_suite(a.suite)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if not failed else EXIT_VERIFY


COMMANDS = {
    "gen": (_gen_options, cmd_gen, "simulate initial conditions and write a dataset"),
    "train": (_train_options, cmd_train, "train a model and write a checkpoint"),
    "eval": (_eval_options, cmd_eval, "evaluate a checkpoint and write CSV reports"),
    "rollout": (_rollout_options, cmd_rollout, "roll an autoregressive model forward"),
    "verify": (_verify_options, cmd_verify, "run self-check suites"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tbpinn", description="Three-body PINN toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    options = {}
    for name, (make, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        options[name] = make(p)
    return parser, options


def main(argv=None) -> int:
    parser, options = build_parser()
    ns = parser.parse_args(argv)
    try:
        args = _resolve(ns, options[ns.command])
        if ns.command == "gen" and args.n < 1:
            raise UsageError("--n must be at least 1")
        return COMMANDS[ns.command][1](args)
    except (UsageError, EmptySplitError) as exc:
        parser.print_usage(sys.stderr)
        print(f"tbpinn {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"tbpinn {ns.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ConfigMismatchError as exc:
        print(f"tbpinn {ns.command}: configuration mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (OSError, FormatError) as exc:
        print(f"tbpinn {ns.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
