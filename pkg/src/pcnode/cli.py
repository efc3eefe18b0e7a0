"""Command line entry point: ``pcnode {gen,train,eval,sweep,plan,inspect}``.

Tables go to stdout as CSV with a header row. Failures exit nonzero with a
one-line ``pcnode: error kind=<tag> ...`` diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, worlds
from .experiment import ExperimentConfig, TrainingError, evaluate, parse_config_text, resolve_epsilon, train
from .pcode import ConfigError
from .planning import Planner, plan_and_execute, rows_to_csv, success_curve, update_totals

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_TRAIN = 4

log = logging.getLogger("pcnode")


class CliError(Exception):
    def __init__(self, kind: str, msg: str, code: int = EXIT_INPUT):
        super().__init__(msg)
        self.kind = kind
        self.code = code


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _load_dataset(path: str) -> worlds.Dataset:
    if not path:
        raise CliError("missing-dataset", "no dataset given (use --dataset or dataset= in the config)")
    if not Path(path).exists():
        raise CliError("missing-dataset", f"{path} does not exist")
    return worlds.load_dataset(path)


def _config(args) -> ExperimentConfig:
    """Preset, then the config file, then --set items, then dedicated flags."""
    values = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    values.update(parse_config_text("\n".join(args.set or [])))
    for name in ("task", "model", "seed", "dataset", "epsilon"):
        val = getattr(args, name, None)
        if val is not None:
            values[name] = val
    task = values.pop("task", "lines")
    return ExperimentConfig.preset(args.preset, task, **values)


def cmd_gen(args) -> None:
    try:
        ds = worlds.generate(args.task, args.n, args.seed)
    except ValueError as exc:
        raise CliError("bad-task", str(exc))
    out = Path(args.out)
    try:
        worlds.save_dataset(ds, out)
    except OSError as exc:
        raise CliError("unwritable", f"{out}: {exc.strerror}")
    flat = ds.obs.reshape(-1, ds.obs_dim)
    sys.stdout.write(_csv(["task", "n", "length", "obs_dim", "seed", "obs_min", "obs_max", "obs_mean", "path"],
                          [[ds.task, ds.n, ds.length, ds.obs_dim, ds.seed, f"{flat.min():.6g}",
                            f"{flat.max():.6g}", f"{flat.mean():.6g}", str(out)]]))


def cmd_train(args) -> None:
    cfg = _config(args)
    data = _load_dataset(cfg.dataset)
    if data.task != cfg.task:
        raise CliError("bad-config", f"dataset holds task {data.task!r}, config says {cfg.task!r}")
    out = Path(args.out or cfg.out or f"runs/{cfg.task}-{cfg.model}-s{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    epsilon, source = resolve_epsilon(cfg.epsilon) if cfg.model == "pcode" else (float("inf"), "unused")
    model, man = train(cfg, data, epsilon=epsilon, eps_source=source, progress=args.verbose)
    ckpt = out / "model.ckpt"
    checkpoint.save(model, ckpt)
    man.checkpoint = str(ckpt)
    man.save(out / "manifest.json")
    (out / "config.txt").write_text(cfg.to_text())
    m = man.metrics
    sys.stdout.write(_csv(["run_id", "task", "model", "test_mse", "sample_mse", "mean_dt", "cell_updates",
                           "final_train_loss", "best_step", "manifest"],
                          [[man.run_id, cfg.task, cfg.model, f"{m['test_mse']:.6g}", f"{m['sample_mse']:.6g}",
                            f"{m['mean_dt']:.4f}", m["cell_updates"], f"{man.final_train_loss:.6g}",
                            man.best_step, str(out / "manifest.json")]]))


METRIC_COLS = ["test_mse", "sample_mse", "mean_dt", "cell_updates", "nfe", "n_test"]


def cmd_eval(args) -> None:
    model = checkpoint.load(args.checkpoint)
    data = _load_dataset(args.dataset)
    if data.obs_dim != model.obs_dim:
        raise CliError("dim-mismatch", f"checkpoint expects obs_dim {model.obs_dim}, dataset has {data.obs_dim}")
    if args.split == "test":
        _, idx = data.split(args.holdout)
        obs = data.obs[idx]
    else:
        obs = data.obs
    m = evaluate(model, obs.astype(np.float64), args.primer)
    row = [model.kind] + [m[c] for c in METRIC_COLS]
    sys.stdout.write(_csv(["model"] + METRIC_COLS, [row]))
    if args.table:
        width = max(len(c) for c in METRIC_COLS)
        for c in METRIC_COLS:
            sys.stderr.write(f"{c:<{width}}  {m[c]}\n")


def cmd_sweep(args) -> None:
    data = _load_dataset(args.dataset)
    base = ExperimentConfig.preset(args.preset, data.task, model="pcode", steps=args.steps or
                                   ExperimentConfig.preset(args.preset, data.task).steps)
    rows = []
    for seed in args.seeds:
        if args.epsilon == "auto":
            rnn_cfg = ExperimentConfig.preset(args.preset, data.task, model="rnn", seed=seed, steps=base.steps)
            _, rman = train(rnn_cfg, data)
            eps, source = rman.final_train_loss, f"baseline:{rman.run_id}"
        else:
            eps, source = resolve_epsilon(args.epsilon)
        for size in args.sizes:
            cfg = ExperimentConfig.preset(args.preset, data.task, model="pcode", seed=seed, latent_dim=size,
                                          steps=base.steps)
            _, man = train(cfg, data, epsilon=eps, eps_source=source, progress=args.verbose)
            m = man.metrics
            rows.append([size, seed, f"{m['mean_dt']:.4f}", f"{m['sample_mse']:.6g}", f"{eps:.6g}"])
    text = _csv(["hidden_size", "seed", "mean_dt", "sample_mse", "epsilon"], rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_plan(args) -> None:
    planners = [Planner("simulator", "simulator"), Planner("random", "random")]
    for spec in args.model or []:
        name, sep, path = spec.partition("=")
        if not sep:
            raise CliError("bad-config", f"--model expects name=checkpoint, got {spec!r}")
        planners.append(Planner(name, "model", checkpoint.load(path)))
    rows = plan_and_execute(planners, args.n_problems, args.budgets, args.seed)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    curve, totals = success_curve(rows), update_totals(rows)
    summary = [[p, b, f"{rate:.3f}", totals[p][b]] for p, per in curve.items() for b, rate in per.items()]
    (sys.stderr if not args.out else sys.stdout).write(
        _csv(["planner", "budget", "success_rate", "cell_updates"], summary))


def cmd_inspect(args) -> None:
    path = Path(args.path)
    if not path.exists():
        raise CliError("missing-file", f"{path} does not exist")
    raw = path.read_bytes()
    if raw.startswith(worlds.MAGIC):
        ds = worlds.loads(raw)
        info = {"type": "dataset", "task": ds.task, "n": ds.n, "length": ds.length, "obs_dim": ds.obs_dim,
                "seed": ds.seed, "has_states": ds.states is not None, **{f"param.{k}": v for k, v in ds.params.items()}}
    elif raw.startswith(checkpoint.MAGIC):
        model = checkpoint.loads(raw)
        info = {"type": "checkpoint", **model.config(), "epsilon": model.epsilon,
                "parameters": sum(p.data.size for p in model.parameters())}
    else:
        try:
            man = json.loads(raw)
        except ValueError:
            raise CliError("unknown-format", f"{path} is not a dataset, checkpoint or manifest")
        info = {"type": "manifest", "run_id": man.get("run_id"), "epsilon": man.get("epsilon"),
                "epsilon_source": man.get("epsilon_source"), "best_step": man.get("best_step"),
                **{f"metric.{k}": v for k, v in man.get("metrics", {}).items()}}
    sys.stdout.write(_csv(["key", "value"], [[k, v] for k, v in info.items()]))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcnode", description="Piecewise-constant latent ODE experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a dataset file")
    g.add_argument("--task", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--preset", choices=("desk", "paper"), default="desk")
    t.add_argument("--task")
    t.add_argument("--model", choices=("pcode", "rnn", "odernn"))
    t.add_argument("--seed", type=int)
    t.add_argument("--dataset")
    t.add_argument("--epsilon", help='number or "from-baseline:<manifest.json>"')
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")
    t.add_argument("--out", help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--holdout", type=float, default=0.1)
    e.add_argument("--primer", type=int, default=5)
    e.add_argument("--table", action="store_true", help="also print a readable table on stderr")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="latent-size sweep of the piecewise model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--sizes", type=_int_list, default=[32, 64, 128])
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.add_argument("--seed", type=int, help="shorthand for a single seed")
    s.add_argument("--steps", type=int)
    s.add_argument("--preset", choices=("desk", "paper"), default="desk")
    s.add_argument("--epsilon", default="auto", help='"auto" trains an RNN baseline per seed')
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plan", help="random-shooting pocket planning")
    p.add_argument("--model", action="append", metavar="NAME=CHECKPOINT")
    p.add_argument("--n-problems", type=int, default=100)
    p.add_argument("--budgets", type=_int_list, default=[1, 5, 10, 20])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan)

    i = sub.add_parser("inspect", help="describe a dataset, checkpoint or manifest")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", None) is not None and args.cmd == "sweep":
        args.seeds = [args.seed]
    try:
        args.func(args)
    except CliError as exc:
        return _fail(exc.kind, str(exc), exc.code)
    except checkpoint.CheckpointError as exc:
        return _fail(f"checkpoint-{exc.reason}", exc.detail, EXIT_INPUT)
    except worlds.DatasetFormatError as exc:
        return _fail("dataset-format", str(exc), EXIT_INPUT)
    except ConfigError as exc:
        return _fail("bad-config", str(exc), EXIT_INPUT)
    except TrainingError as exc:
        return _fail("training", str(exc), EXIT_TRAIN)
    except OSError as exc:
        return _fail("io", f"{exc.filename}: {exc.strerror}", EXIT_INPUT)
    return 0


def _fail(kind: str, msg: str, code: int) -> int:
    sys.stderr.write(f"pcnode: error kind={kind} msg={json.dumps(msg)}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
