"""Command-line entry point: ``hamp <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dynamics import DynamicsParams, MessageParams, export_snapshots
from .hypergraph import HypergraphError, load_hypergraph
from .io import atomic_write_json
from .metrics import decay_fit
from .optim import save_checkpoint
from .simulate import MODES, simulate
from .synth import SynthSpec, clamped_gate, generate, read_tags, write_synth
from . import trainer as tr

log = logging.getLogger("hamp")

TRAIN_FAMILY = ("train", "depth-sweep", "ablate", "energy-trace")

# flag name -> (config key, type); dynamics keys live under "dynamics"
CONFIG_FLAGS = {
    "mode": ("mode", str),
    "steps": ("steps", int),
    "epochs": ("epochs", int),
    "patience": ("patience", int),
    "lr": ("lr", float),
    "hidden_dim": ("hidden_dim", int),
    "classifier_hidden": ("classifier_hidden", int),
    "classifier_layers": ("classifier_layers", int),
    "dropout": ("dropout", float),
    "gate_norm": ("gate_norm", str),
    "gate_hidden": ("gate_hidden", int),
}
DYNAMICS_FLAGS = {
    "tau": float, "total_time": float, "delta": float, "epsilon": float,
    "beta": float, "omega": float, "gamma": float, "activation": str,
}


def _setup_logging() -> None:
    level = os.environ.get("HAMP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, default=Path("hamp_out"), help="output directory")
    p.add_argument("--seed", type=int, default=None, help="random seed (train family: run only this seed)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for seeds / sweep cells")
    p.add_argument("--single-thread", action="store_true", help="limit BLAS to one thread")


def _add_dynamics_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dynamics")
    for name, typ in DYNAMICS_FLAGS.items():
        kw = {"choices": ["identity", "tanh", "relu"]} if name == "activation" else {}
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None, **kw)


def _add_train_flags(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="JSON training config")
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--steps", type=int, default=None, help="unroll length (T = steps * tau)")
    for name, (_, typ) in CONFIG_FLAGS.items():
        if name in ("mode", "steps"):
            continue
        kw = {"choices": ["sym", "mean"]} if name == "gate_norm" else {}
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None, **kw)
    p.add_argument("--seeds", type=_int_list, default=None, help="comma-separated seeds")
    _add_dynamics_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamp", description="Hypergraph particle-dynamics message passing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic two-group dataset")
    _add_common(p)
    p.add_argument("--config", type=Path, default=None, help="JSON object of generator settings")
    for f in dataclasses.fields(SynthSpec):
        if f.name in ("seed", "split", "connected"):
            continue
        typ = float if f.name in ("gap", "noise") else int
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=typ, default=None)
    p.add_argument("--allow-disconnected", action="store_true")

    p = sub.add_parser("simulate", help="integrate a trajectory and write its energy trace")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, default="hamp1")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--input", type=Path, default=None, help="directory written by gen-synth")
    p.add_argument("--gate", choices=["learned", "clamped", "attraction"], default="learned",
                   help="learned: random gate weights; clamped: +1/-gamma from the tag file; "
                        "attraction: every coefficient +1")
    p.add_argument("--snapshot-every", type=int, default=0)
    _add_dynamics_flags(p)

    for name, help_ in (("train", "train on a dataset"),
                        ("depth-sweep", "retrain over several unroll lengths"),
                        ("ablate", "toggle repulsion / Allen-Cahn / noise"),
                        ("energy-trace", "train, then trace the learned dynamics")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        _add_train_flags(p)
        if name == "depth-sweep":
            p.add_argument("--depths", type=_int_list, default=[4, 16, 64])
        if name == "ablate":
            p.add_argument("--toggles", default="repulsion,allen_cahn",
                           help="comma-separated subset of repulsion,allen_cahn,noise")
            p.add_argument("--epsilon-grid", type=_float_list, default=list(tr.EPSILON_GRID))

    p = sub.add_parser("gradcheck", help="compare backward gradients with finite differences")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, default="hamp1")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("complexity-probe", help="time one step across hypergraph sizes")
    _add_common(p)
    p.add_argument("--base-edges", type=int, default=2000)
    p.add_argument("--factors", type=_int_list, default=[1, 2, 4, 10])
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    return parser


# -- config assembly --------------------------------------------------------------------


def effective_config(args) -> tr.TrainConfig:
    """Config file values overridden by any flag given on the command line."""
    cfg = tr.load_config(args.config)
    changes, dyn = {}, {}
    for name, (key, _) in CONFIG_FLAGS.items():
        val = getattr(args, name, None)
        if val is not None:
            changes[key] = val
    for name in DYNAMICS_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            dyn[name] = val
    if args.seeds is not None:
        changes["seeds"] = args.seeds
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if dyn:
        changes["dynamics"] = dyn
    steps = changes.pop("steps", None)
    cfg = cfg.replace(**changes) if changes else cfg
    if steps is not None:
        cfg = cfg.replace(steps=steps)
    return cfg


# -- commands ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    values = {}
    if args.config is not None:
        import json
        values.update(json.loads(args.config.read_text()))
    for f in dataclasses.fields(SynthSpec):
        v = getattr(args, f.name, None)
        if v is not None and f.name not in ("split", "connected"):
            values[f.name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    if args.allow_disconnected:
        values["connected"] = False
    spec = tr._build(SynthSpec, values, "synthetic")
    synth = generate(spec)
    write_synth(args.out, synth)
    atomic_write_json(args.out / "spec.json", spec.to_dict())
    h = synth.hypergraph
    print(f"gen-synth: {h.num_nodes} nodes, {h.num_edges} hyperedges, "
          f"{h.num_incidences} incidences -> {args.out}")
    return 0


def _dynamics_from_args(args, default: DynamicsParams) -> DynamicsParams:
    dyn = {n: getattr(args, n) for n in DYNAMICS_FLAGS if getattr(args, n, None) is not None}
    return dataclasses.replace(default, **dyn)


def cmd_simulate(args) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.input is not None:
        data = load_hypergraph(args.input / "hypergraph.txt", args.input / "features.csv",
                               args.input / "labels.txt")
        tags_path = args.input / "tags.txt"
        tags = read_tags(tags_path) if tags_path.exists() else None
    else:
        synth = generate(SynthSpec(seed=seed))
        data, tags = synth.dataset, synth.tags
    h, x0 = data.hypergraph, data.features
    groups = data.labels if data.labels is not None and data.num_classes == 2 else None
    dp = _dynamics_from_args(args, DynamicsParams())
    mp = None
    if args.mode != "diffusion" and args.gate != "learned":
        if args.gate == "clamped":
            if tags is None:
                raise ValueError("--gate clamped needs a tags.txt next to the hypergraph")
            fixed = clamped_gate(h, tags, dp.gamma)
        else:
            fixed = np.ones(h.num_incidences)
        mp = MessageParams.identity(x0.shape[1], gamma=dp.gamma, fixed_gate=fixed)
    traj = simulate(h, x0, args.mode, dp, args.steps, mp=mp, groups=groups, seed=seed,
                    snapshot_every=args.snapshot_every)
    args.out.mkdir(parents=True, exist_ok=True)
    traj.trace.to_csv(args.out / "trace.csv")
    if traj.snapshots:
        export_snapshots(args.out / "snapshots.csv", traj.snapshots)
    atomic_write_json(args.out / "config.json", {
        "command": "simulate", "mode": args.mode, "steps": args.steps, "seed": seed,
        "gate": args.gate, "input": args.input, "dynamics": dataclasses.asdict(dp)})
    E = traj.trace.energies
    msg = f"simulate[{args.mode}]: {args.steps} steps, E(0)={E[0]:.4g}, E(end)={E[-1]:.4g}"
    if E.size >= 3 and (E > 0).sum() >= 3:
        fit = decay_fit(traj.trace)
        msg += f", decay rate {fit.rate:.4g} (R^2 {fit.r_squared:.4f})"
    print(msg)
    return 0


def _write_run(out: Path, cfg: tr.TrainConfig, result: tr.RunResult, prefix: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / f"{prefix}results.json", result.to_dict())
    for s in result.successful:
        if s.trace is not None:
            s.trace.to_csv(out / f"{prefix}trace_seed{s.seed}.csv")


def cmd_train(args, cfg) -> int:
    data = tr.load_data(cfg)
    result = tr.train(cfg, data, jobs=args.jobs, single_thread=args.single_thread)
    _write_run(args.out, cfg, result)
    print(f"train[{cfg.mode}]: {result.summary()}")
    return 1 if result.num_failed else 0


def cmd_depth_sweep(args, cfg) -> int:
    data = tr.load_data(cfg)
    rows = tr.depth_sweep(cfg, data, args.depths, out_csv=args.out / "depth_sweep.csv",
                          jobs=args.jobs, single_thread=args.single_thread)
    atomic_write_json(args.out / "results.json", {str(d): r.to_dict() for d, r in rows})
    failed = 0
    for d, r in rows:
        print(f"depth-sweep[{cfg.mode}] depth {d}: {r.summary()}")
        failed += r.num_failed
    return 1 if failed else 0


def cmd_ablate(args, cfg) -> int:
    data = tr.load_data(cfg)
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    rows = tr.ablate(cfg, data, toggles, epsilon_grid=args.epsilon_grid, out_csv=args.out / "ablation.csv",
                     jobs=args.jobs, single_thread=args.single_thread)
    atomic_write_json(args.out / "results.json", {r.label: r.result.to_dict() for r in rows})
    failed = 0
    for r in rows:
        print(f"ablate[{cfg.mode}] {r.label}: {r.result.summary()}")
        failed += r.result.num_failed
    return 1 if failed else 0


def cmd_energy_trace(args, cfg) -> int:
    data = tr.load_data(cfg)
    cfg = cfg.replace(seeds=cfg.seeds[:1])
    res = tr.train_seed(cfg, data, int(cfg.seeds[0]), keep_params=True)
    args.out.mkdir(parents=True, exist_ok=True)
    if res.failed:
        print(f"energy-trace[{cfg.mode}]: seed {res.seed} failed: {res.error}", file=sys.stderr)
        return 1
    res.trace.to_csv(args.out / "trace.csv")
    save_checkpoint(args.out / "params.bin", res.params)
    fit = decay_fit(res.trace) if len(res.trace) >= 3 else None
    extra = f", decay rate {fit.rate:.4g} (R^2 {fit.r_squared:.4f})" if fit else ""
    print(f"energy-trace[{cfg.mode}]: {len(res.trace)} records, test acc {res.test_acc:.4f}{extra}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = 7 if args.seed is None else args.seed
    r = tr.gradcheck(seed, mode=args.mode, steps=args.steps)
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(args.out / "gradcheck.json", {"seed": seed, "mode": args.mode, "steps": args.steps, **r})
    ok = r["max"] < args.tolerance
    print(f"gradcheck[{args.mode}] seed {seed}: max relative error {r['max']:.3e} "
          f"over {r['num_params']} parameters ({'ok' if ok else 'FAIL'})")
    return 0 if ok else 1


def cmd_complexity_probe(args) -> int:
    seed = 0 if args.seed is None else args.seed
    sizes = tr.default_probe_sizes(args.base_edges, args.factors, seed=seed)
    res = tr.complexity_probe(sizes, channels=args.channels, repeats=args.repeats)
    args.out.mkdir(parents=True, exist_ok=True)
    res.to_csv(args.out / "probe.csv")
    for r in res.rows:
        print(f"complexity-probe: {r.incidences} incidences, {1e3 * r.seconds_per_step:.3f} ms/step")
    if res.slope is not None:
        print(f"complexity-probe: log-log slope {res.slope:.3f}")
    return 0


def _dispatch(args) -> int:
    if args.command == "gen-synth":
        return cmd_gen_synth(args)
    if args.command == "simulate":
        return cmd_simulate(args)
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    if args.command == "complexity-probe":
        return cmd_complexity_probe(args)
    cfg = effective_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(args.out / "config.json", cfg.to_dict())
    return {"train": cmd_train, "depth-sweep": cmd_depth_sweep, "ablate": cmd_ablate,
            "energy-trace": cmd_energy_trace}[args.command](args, cfg)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    if args.command == "simulate" and args.steps < 0:
        parser.error("--steps must be >= 0")
    ctx = contextlib.nullcontext()
    if args.single_thread:
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(1)
    try:
        with ctx:
            return _dispatch(args)
    except FileNotFoundError as e:
        print(f"hamp {args.command}: file not found: {e.filename or e}", file=sys.stderr)
    except (tr.ConfigError, HypergraphError, ValueError, RuntimeError, OSError) as e:
        log.debug("failure", exc_info=True)
        print(f"hamp {args.command}: error: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
