"""Command-line front end.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Artifacts go to ``--out`` (default ``.``); binary files get a ``.meta.json``
sidecar carrying the config digest, text files carry it in a header comment.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, config_digest, load_config
from .diffusion import DivergenceError
from .dotfwd import MeasurementError
from .dps import DpsConfig, sample_dps, train_unconditional
from .ensemble import (SampleEnsemble, ensemble_stats, read_ensemble, to_physical, write_csv,
                       write_ensemble, write_pgm)
from .gaussian import NumericalError, analytic_posterior
from .grid import Grid
from .network import TrainingError, load_checkpoint, save_checkpoint
from .operator import write_matrix
from .phantom import generate_dataset, read_dataset
from . import pipeline
from .ucos import sample_gaussian_posterior, sample_posterior, train

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USAGE", "EXIT_NUMERICAL"]

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (NumericalError, DivergenceError, TrainingError, MeasurementError,
                    FloatingPointError, np.linalg.LinAlgError)

DATASET_FILE = "dataset.dotdat"
OPERATOR_FILE = "operator.spmat"


class UsageError(Exception):
    pass


def _write_meta(path, cfg, command, **extra):
    meta = {"config_digest": config_digest(cfg), "command": command, "config": cfg, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def _resolve(args):
    cfg = load_config(args.config)
    seed_key = {"gen-data": ("training", "phantom_seed"), "train": ("training", "seed"),
                "sample": ("sampling", "seed")}.get(args.command)
    if args.seed is not None and seed_key:
        cfg[seed_key[0]][seed_key[1]] = args.seed
    if args.method is not None:
        cfg["sampling"]["method"] = args.method
    if args.alpha is not None:
        if not 0.0 <= args.alpha <= 1.0:
            raise ConfigError(f"sampling.alpha: must lie in [0, 1], got {args.alpha}")
        cfg["sampling"]["alpha"] = args.alpha
    if args.samples is not None:
        if args.samples < 1:
            raise ConfigError("sampling.samples: must be positive")
        cfg["sampling"]["samples"] = args.samples
    return cfg


def _operator(cfg, out):
    path = out / OPERATOR_FILE
    if not cfg["problem"]["operator_file"] and path.is_file():
        cfg = json.loads(json.dumps(cfg))
        cfg["problem"]["operator_file"] = str(path)
    return pipeline.build_operator(cfg)


def cmd_gen_data(cfg, out, args):
    spec = pipeline.phantom_spec_for(cfg)
    path = out / DATASET_FILE
    generate_dataset(spec, cfg["training"]["n_phantoms"], path)
    _write_meta(path, cfg, "gen-data")
    print(f"wrote {cfg['training']['n_phantoms']} phantoms to {path}")


def cmd_build_operator(cfg, out, args):
    A = pipeline.build_operator(cfg)
    path = out / OPERATOR_FILE
    write_matrix(path, A)
    _write_meta(path, cfg, "build-operator", domain_shape=list(A.domain_shape))
    print(f"wrote {A.codomain_dim}x{A.domain_dim} operator to {path}")


def _dataset(cfg, out):
    path = out / DATASET_FILE
    if path.is_file():
        return read_dataset(path)
    return generate_dataset(pipeline.phantom_spec_for(cfg), cfg["training"]["n_phantoms"])


def cmd_train(cfg, out, args):
    data = _dataset(cfg, out)
    net = pipeline.network_for(cfg)
    tcfg = pipeline.training_config_for(cfg)
    mode = cfg["training"]["mode"]
    if mode == "ucos":
        setup = pipeline.build_setup(cfg, _operator(cfg, out), with_data=False)
        train(setup.problem, data, net, tcfg)
    else:
        grid = Grid(cfg["problem"]["grid"], pipeline.extent_for(cfg))
        train_unconditional(data, net, tcfg, pipeline.diffusion_covariance(cfg, grid),
                            pipeline.schedule_for(cfg))
    path = out / f"{mode}.spnet"
    save_checkpoint(path, net)
    _write_meta(path, cfg, "train", loss_trace=net.loss_trace)
    digest = config_digest(cfg)
    with open(out / f"{mode}-loss.csv", "w") as fh:
        fh.write(f"# digest {digest}\nepoch,mean_loss\n")
        for k, v in enumerate(net.loss_trace):
            fh.write(f"{k},{v!r}\n")
    print(f"trained {mode} network; epoch losses {net.loss_trace[0]:.4g} -> {net.loss_trace[-1]:.4g}")


def _load_net(cfg, out, mode):
    path = out / f"{mode}.spnet"
    if not path.is_file():
        raise UsageError(f"{path} not found; run `train` with training.mode = {mode} first")
    return load_checkpoint(path, activation=cfg["network"]["activation"])


def cmd_sample(cfg, out, args):
    s = cfg["sampling"]
    method = s["method"]
    setup = pipeline.build_setup(cfg, _operator(cfg, out))
    prob = setup.problem
    digest = config_digest(cfg)
    if method == "gaussian":
        post = analytic_posterior(prob.A, prob.gamma_obs, setup.prior[0], setup.prior[1], prob.y)
        ens = SampleEnsemble(sample_gaussian_posterior(post, s["samples"], s["seed"]),
                             "gaussian", s["seed"], digest)
    elif method == "dps":
        net = _load_net(cfg, out, "unconditional")
        dcfg = DpsConfig(s["rho"], s["normalize_by_residual"], prob.sched)
        ens = sample_dps(prob, net, dcfg, s["samples"], s["seed"], digest)
    else:
        net = _load_net(cfg, out, "ucos")
        alpha = 0.0 if method == "ucos" else s["alpha"]
        ens = sample_posterior(prob, net, alpha, s["samples"], s["seed"], setup.prior, digest)
        ens.method = method
    ens.truth = setup.truth
    path = out / f"ensemble-{method}.spens"
    write_ensemble(path, ens)
    n_bad = int(np.sum(ens.failed_step >= 0))
    if n_bad == len(ens):
        raise DivergenceError(int(ens.failed_step.min()), "every chain diverged")
    if n_bad:
        print(f"warning: {n_bad} of {len(ens)} chains diverged", file=sys.stderr)
    print(f"wrote {len(ens)} {method} samples to {path}")


def cmd_stats(cfg, out, args):
    if not args.ensembles:
        raise UsageError("stats needs at least one ensemble file")
    ensembles = [read_ensemble(p) for p in args.ensembles]
    digests = {e.config_digest for e in ensembles}
    if len(digests) > 1:
        raise UsageError(f"ensembles carry different config digests: {sorted(digests)}")
    for path, ens in zip(args.ensembles, ensembles):
        st = ensemble_stats(ens, ens.truth)
        fields = {"mean": st.mean, "std": st.std}
        if st.bias is not None:
            fields["bias"] = st.bias
        if args.physical:
            fields["mean"] = to_physical(st.mean)
            scale = np.array([0.02, 2.0])[:, None, None]
            fields["std"] = st.std * scale
            if "bias" in fields:
                fields["bias"] = st.bias * scale
        stem = Path(path).stem
        for name, arr in fields.items():
            for ch in range(arr.shape[0]):
                base = out / f"{stem}-{name}-ch{ch}"
                write_csv(base.with_suffix(".csv"), arr[ch], ens.config_digest)
                write_pgm(base.with_suffix(".pgm"), arr[ch], ens.config_digest)
        print(f"{stem}: {st.n_used} samples, mean std {float(st.std.mean()):.4g}")


def cmd_verify(cfg, out, args):
    from .verify import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if not all(ok for _, ok, _ in results):
        raise NumericalError("one or more oracle checks failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-operator": cmd_build_operator,
    "train": cmd_train,
    "sample": cmd_sample,
    "stats": cmd_stats,
    "verify": cmd_verify,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="master seed for the command")
    common.add_argument("--method", choices=["ucos", "ucos-reg", "dps", "gaussian"])
    common.add_argument("--alpha", type=float, help="regularization weight in [0, 1]")
    common.add_argument("--samples", type=int, help="number of posterior samples")
    common.add_argument("--out", default=".", help="output directory")
    parser = argparse.ArgumentParser(prog="ucosdot", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "stats":
            p.add_argument("ensembles", nargs="*", help="ensemble files")
            p.add_argument("--physical", action="store_true",
                           help="export in physical units (mm^-1)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = _resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
