"""Command-line entry point: ``mmn gen-data | train | eval | ablate``.

Exit codes: 0 success, 1 runtime or training failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig, load_config_file, resolve
from .datasets import DatasetLoadError, generate_dataset, generate_external_dataset, load_dataset, save_dataset
from .inverse import (MixtureManifoldModel, train_backward, train_forward, train_mmn,
                      manifold_seed)
from .nn import CheckpointError
from .simulators import ConfigurationError, ExternalSimulatorError, get_problem, handle_for
from .training import TrainingError

log = logging.getLogger("mmn")


class UsageError(Exception):
    pass


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _on_off(text: str) -> bool:
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--problem", help="sine, arm or shell")
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output root (default $MMN_OUTPUT_ROOT or ./runs)")
    p.add_argument("--run-id", dest="run_id")
    p.add_argument("--sizes", type=_int_list, help="train,val,test")
    p.add_argument("--sim-cmd", dest="sim_cmd", help="external simulator command")
    p.add_argument("--data", help="dataset CSV (default <run>/dataset.csv)")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int)
    p.add_argument("--n-prime", dest="n_prime", type=int)
    p.add_argument("--augment", type=_on_off)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--forward-batch-size", dest="forward_batch_size", type=int)
    p.add_argument("--forward-lr", dest="forward_lr", type=float)
    p.add_argument("--hidden", dest="forward_hidden", type=_int_list)
    p.add_argument("--backward-hidden", dest="backward_hidden", type=_int_list)
    p.add_argument("--batch-norm", dest="batch_norm", type=_on_off)
    p.add_argument("--patience", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--bundle", help="model bundle directory (default <run>/bundle)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a dataset")
    _common(p)

    p = sub.add_parser("train", help="train forward model and K backward manifolds")
    _common(p)
    _training(p)

    p = sub.add_parser("eval", help="re-simulation error and timing")
    _common(p)
    _training(p)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--na", action="store_true", help="evaluate the neural-adjoint baseline")
    p.add_argument("--restarts", dest="na_restarts", type=int)
    p.add_argument("--steps", dest="na_steps", type=int)
    p.add_argument("--na-lr", dest="na_lr", type=float)
    p.add_argument("--time", action="store_true", help="also time 1000 inferences")
    p.add_argument("--no-sequential", action="store_true", help="skip one-query-at-a-time timing")

    p = sub.add_parser("ablate", help="K sweep or augmentation sweep")
    _common(p)
    _training(p)
    p.add_argument("--sweep", required=True)
    p.add_argument("--max-k", dest="max_k", type=int, default=6)
    p.add_argument("--ratios", type=_float_list, default=[0.5, 1, 2, 5])
    return parser


CONFIG_KEYS = {f for f in RunConfig.__dataclass_fields__}


def effective_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k in CONFIG_KEYS}
    return resolve(file_values, flags)


def _dataset_path(args, cfg: RunConfig) -> Path:
    return Path(args.data) if args.data else cfg.run_dir / "dataset.csv"


def _bundle_path(args, cfg: RunConfig) -> Path:
    return Path(args.bundle) if getattr(args, "bundle", None) else cfg.run_dir / "bundle"


def _load_data(args, cfg: RunConfig):
    path = _dataset_path(args, cfg)
    if not path.exists():
        raise UsageError(f"dataset {path} not found (run gen-data first or pass --data)")
    return load_dataset(path)


def cmd_gen_data(args, cfg: RunConfig) -> int:
    problem = get_problem(cfg.problem)
    if problem.binding == "external":
        ds = generate_external_dataset(problem, handle_for(problem, cfg.sim_cmd), cfg.sizes, cfg.seed)
    else:
        ds = generate_dataset(problem, cfg.sizes, cfg.seed)
    path = _dataset_path(args, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(ds, path)
    cfg.echo()
    print(f"{path} {len(ds)} rows sha256={digest}")
    return 0


def _train_bundle(args, cfg: RunConfig) -> MixtureManifoldModel:
    ds = _load_data(args, cfg)
    problem = get_problem(cfg.problem)
    fm = train_forward(ds, cfg.forward_spec(problem.dim_x, problem.dim_y), cfg.forward_settings(),
                       cfg.seed)
    log.info("forward model: best val %.3g at epoch %d", fm.record.best_val, fm.record.best_epoch)
    bspec = cfg.backward_spec(problem.dim_x, problem.dim_y)
    if cfg.augment:
        model = train_mmn(fm, problem, cfg.k, cfg.n_prime, bspec, cfg.gamma,
                          cfg.backward_settings(), cfg.seed, workers=cfg.workers)
    else:
        _, ytr = ds.part("train")
        _, yv = ds.part("val")
        backwards = [train_backward(fm, ytr, yv, bspec, problem.bounds, cfg.gamma,
                                    cfg.backward_settings(), manifold_seed(cfg.seed, k), index=k,
                                    provenance="real") for k in range(cfg.k)]
        model = MixtureManifoldModel(fm, backwards, problem,
                                     {"seed": cfg.seed, "forward_sha256": fm.digest()})
    model.meta.update({"augment": cfg.augment, "profile": cfg.profile})
    return model


def cmd_train(args, cfg: RunConfig) -> int:
    model = _train_bundle(args, cfg)
    bundle = _bundle_path(args, cfg)
    model.save(bundle)
    curves = cfg.run_dir / "curves"
    curves.mkdir(parents=True, exist_ok=True)
    (curves / "forward.csv").write_text(model.forward.record.curve_csv())
    for bm in model.backwards:
        (curves / f"backward_{bm.index}.csv").write_text(bm.record.curve_csv())
    cfg.echo()
    print(f"bundle written to {bundle} (K={model.K})")
    return 0


def _load_bundle(args, cfg: RunConfig) -> MixtureManifoldModel:
    bundle = _bundle_path(args, cfg)
    if not (bundle / "model.json").exists():
        raise UsageError(f"model bundle {bundle} not found (run train first or pass --bundle)")
    return MixtureManifoldModel.load(bundle)


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_bundle(args, cfg)
    problem = model.problem
    ds = _load_data(args, cfg)
    _, Y = ds.part("test")
    sim = handle_for(problem, cfg.sim_cmd)
    out = cfg.run_dir / ("eval_na" if args.na else "eval")
    if args.na:
        report = ev.evaluate_na(model.forward, problem, Y, sim, cfg.t_max, cfg.na_settings())
    else:
        report = ev.evaluate_mmn(model, Y, sim, cfg.t_max)
    if args.time:
        queries = _timing_queries(ds, Y)
        if args.na:
            report.timing = ev.time_na(model.forward, problem, queries, cfg.na_settings(),
                                       sequential=not args.no_sequential)
        else:
            report.timing = ev.time_mmn(model, queries, sequential=not args.no_sequential)
    report.save(out)
    cfg.echo(out)
    for T, v in report.curve():
        print(f"T={T} mean_resim={v:.6g}")
    if report.timing:
        print(json.dumps(report.timing))
    return 0


def _timing_queries(ds, Y, n: int = 1000):
    if len(Y) >= n:
        return Y[:n]
    return np.resize(ds.Y, (n, ds.Y.shape[1]))


def cmd_ablate(args, cfg: RunConfig) -> int:
    sweep = args.sweep
    if sweep not in ("k", "aug"):
        raise UsageError(f"unknown sweep {sweep!r}; choose k or aug")
    ds = _load_data(args, cfg)
    _, Y = ds.part("test")
    bundle = _bundle_path(args, cfg)
    out = cfg.run_dir / "ablate"
    out.mkdir(parents=True, exist_ok=True)
    if sweep == "k":
        if (bundle / "model.json").exists() and MixtureManifoldModel.load(bundle).K >= args.max_k:
            model = MixtureManifoldModel.load(bundle)
        else:
            cfg.k = args.max_k
            model = _train_bundle(args, cfg)
        result = ev.ablate_K(model, Y, handle_for(model.problem, cfg.sim_cmd), args.max_k)
        (out / "k_sweep.csv").write_text(result.to_csv())
        text = result.to_csv()
    else:
        problem = get_problem(cfg.problem)
        if (bundle / "model.json").exists():
            fm = MixtureManifoldModel.load(bundle).forward
        else:
            fm = train_forward(ds, cfg.forward_spec(problem.dim_x, problem.dim_y),
                               cfg.forward_settings(), cfg.seed)
        result = ev.ablate_augmentation(
            fm, ds, problem, args.ratios, cfg.backward_spec(problem.dim_x, problem.dim_y),
            cfg.gamma, cfg.backward_settings(), cfg.seed, Y, handle_for(problem, cfg.sim_cmd))
        (out / "aug_sweep.csv").write_text(result.to_csv())
        (out / "aug_sweep.json").write_text(json.dumps(result.summary(), indent=2) + "\n")
        text = result.to_csv()
    cfg.echo(out)
    print(text, end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigurationError, DatasetLoadError, CheckpointError) as exc:
        parser.print_usage(sys.stderr)
        print(f"mmn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"mmn {args.command}: training failed in phase {exc.phase or 'unknown'}: {exc}",
              file=sys.stderr)
        return 1
    except (ExternalSimulatorError, FloatingPointError, OSError) as exc:
        print(f"mmn {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
