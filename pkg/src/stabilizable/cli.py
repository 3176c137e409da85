"""Command-line entry point: gen-data, train, verify, simulate, export-plot."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import simdata, training, verify
from .errors import CheckpointError, ConfigurationError, DatasetFormatError, TrainingDiverged
from .stability import HinfComposite, ProportionalToV, apply_input, sontag_control

log = logging.getLogger("stabilizable")


class UsageError(Exception):
    pass


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(args, inputs, outputs, started: float) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": " ".join(str(a) for a in [args.command, getattr(args, "check", None)] if a),
        "flags": flags,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): git_blob_hash(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": round(time.time() - started, 3),
    }
    Path(str(outputs[0]) + ".manifest.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if args.per_axis < 2:
        raise UsageError("--per-axis must be at least 2")
    if args.system == "vdp":
        field = simdata.VanDerPol(args.mu)
        n = 2
    else:
        a = _floats(args.A)
        n = int(round(np.sqrt(len(a))))
        if n * n != len(a):
            raise UsageError("--A needs n*n comma-separated entries (row-major)")
        field = simdata.LinearTest(np.array(a).reshape(n, n))
    if not args.min < args.max:
        raise UsageError("--min must be below --max")
    data = simdata.grid_dataset(args.per_axis, [(args.min, args.max)] * n, field)
    simdata.write_dataset(data, args.out)
    print(f"N_d = {len(data)}")
    return 0


def _train_config(args) -> training.TrainConfig:
    mode = {"stabilize": "stabilizable", "autonomous": "autonomous", "hji": "hji"}[args.mode]
    weight = ProportionalToV(args.c3) if mode == "autonomous" else training.parse_weight(args.w)
    return training.TrainConfig(
        mode=mode,
        epsilon=args.epsilon,
        weight=weight,
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        hje_weight=args.hje_weight,
        g=args.g,
        R=args.R,
        control=args.control,
        fhat_hidden=tuple(args.hidden),
        alpha_hidden=tuple(args.hidden),
        icnn_hidden=tuple(args.hidden),
    )


def cmd_train(args) -> int:
    data = simdata.read_dataset(args.data)
    config = _train_config(args)
    try:
        ckpt = training.train(config, data)
        status = 0
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        ckpt, status = exc.checkpoint, 1
    training.save_checkpoint(ckpt, args.out)
    loss_log = Path(str(args.out) + ".loss.csv")
    with open(loss_log, "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(ckpt.history):
            fh.write(f"{i},{loss:.17g}\n")
    report = verify.decrease_check(ckpt.model(), data.x)
    print(
        f"epochs run: {len(ckpt.history) - 1}, best epoch {ckpt.best_epoch}, "
        f"loss {ckpt.history[0]:.6g} -> {min(ckpt.history):.6g}, "
        f"max decrease violation on data {report.max_violation:.3e}"
    )
    if not report.passed:
        status = 1
    args._outputs = [args.out, loss_log]
    args._inputs = [args.data]
    return status


def _samples(args, n):
    rng = np.random.default_rng(args.seed)
    return rng.uniform(args.min, args.max, size=(args.samples, n))


def cmd_verify(args) -> int:
    ckpt = training.load_checkpoint(args.ckpt)
    model = ckpt.model()
    args._inputs = [args.ckpt]
    out = Path(args.out)
    args._outputs = [out]
    if args.check == "decrease":
        rep = verify.decrease_check(model, _samples(args, model.n))
        verify.write_report(rep.to_dict(), out)
        print(f"max violation {rep.max_violation:.3e} over {rep.samples} samples")
        return 0 if rep.passed else 1
    if args.check == "roa":
        if not args.data:
            raise UsageError("verify roa needs --data")
        data = simdata.read_dataset(args.data)
        args._inputs.append(args.data)
        rep = verify.roa_check(model, data)
        verify.write_report(rep.to_dict(), out)
        table = out.with_suffix(".csv")
        rep.write_csv(table)
        args._outputs.append(table)
        level = "none" if rep.certified_level is None else f"{rep.certified_level:.6g}"
        print(f"violations: {rep.violations} of {len(data)}")
        print(f"certified level c: {level}")
        ok = np.all(rep.closed_loop_lie_true[rep.in_D] < 0)
        return 0 if ok else 1
    if args.check == "hinf":
        spec = model.weight
        if not isinstance(spec, HinfComposite):
            if args.gamma is None:
                raise UsageError("checkpoint weight is not hinf; pass --gamma")
            spec = simdata.hinf_builtin("vdp", args.gamma)
        shortfall = verify.hinf_weight_check(spec, model.lyap, _samples(args, model.n))
        verify.write_report({"check": "hinf", "max_shortfall": shortfall, "passed": shortfall <= verify.TOL}, out)
        print(f"max shortfall {shortfall:.3e}")
        return 0 if shortfall <= verify.TOL else 1
    if args.check == "invopt":
        rep = verify.inverse_optimality_check(
            model.fhat, model.lyap, args.c3, args.b, _samples(args, model.n)
        )
        verify.write_report(rep.to_dict(), out)
        print("pass" if rep.passed else "fail")
        return 0 if rep.passed else 1
    raise UsageError(f"unknown check {args.check}")


def _plant(name: str, mu: float):
    if name == "learned":
        return None
    if name == "true-vdp":
        return simdata.VanDerPol(mu)
    raise UsageError(f"unknown plant {name!r}")


def cmd_simulate(args) -> int:
    model = training.load_checkpoint(args.ckpt).model()
    x0 = np.array(_floats(args.x0))
    if x0.shape != (model.n,):
        raise UsageError(f"--x0 needs {model.n} entries")
    loop = simdata.ClosedLoop(model, args.controller, _plant(args.plant, args.mu))
    traj = simdata.rk4_integrate(loop, x0, args.dt, args.t_final)
    terms = model.terms(traj.states)
    if model.mode != "autonomous":
        traj.inputs = loop.control(traj.states)
    traj.values = terms.V
    traj.write_csv(args.out)
    args._inputs, args._outputs = [args.ckpt], [args.out]
    print(f"final state {traj.states[-1].tolist()}, |x| = {np.linalg.norm(traj.states[-1]):.3e}")
    if traj.divergent:
        print("integration diverged; partial trajectory written", file=sys.stderr)
        return 1
    return 0


def cmd_export_plot(args) -> int:
    model = training.load_checkpoint(args.ckpt).model()
    if model.n != 2:
        raise UsageError("export-plot works on planar systems")
    data = simdata.grid_dataset(args.per_axis, [(args.min, args.max)] * 2, lambda x: np.zeros_like(x))
    x = data.x
    t = model.terms(x)
    status = 0
    if args.what == "V":
        cols, vals = ["V"], t.V[:, None]
        status = 0 if np.all(t.V >= model.lyap.epsilon * np.sum(x * x, axis=1) - 1e-12) else 1
    elif args.what in ("alpha", "sontag"):
        if model.mode == "autonomous":
            raise UsageError("autonomous models have no controller")
        u = t.alpha if args.what == "alpha" else sontag_control(np.sum(t.gradV * t.f, axis=1), t.LgV)
        cols, vals = [f"u{i}" for i in range(1, u.shape[1] + 1)], u
    elif args.what == "drift":
        cols, vals = ["dx1", "dx2"], t.f
    elif args.what == "phase":
        vals = model.closed_loop(x, args.controller)
        cols = ["dx1", "dx2"]
        if args.controller == "learned":
            ok = np.sum(t.gradV * vals, axis=1) <= -t.W + verify.TOL
            status = 0 if np.all(ok) else 1
    else:
        raise UsageError(f"unknown field {args.what!r}")
    with open(args.out, "w") as fh:
        fh.write(",".join(["x1", "x2", *cols]) + "\n")
        for row in np.hstack([x, vals]):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    args._inputs, args._outputs = [args.ckpt], [args.out]
    if args.svg:
        _render_svg(args, x, vals, cols)
        args._outputs.append(args.svg)
    return status


def _render_svg(args, x, vals, cols) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = args.per_axis
    X, Y = x[:, 0].reshape(k, k), x[:, 1].reshape(k, k)
    fig, ax = plt.subplots(figsize=(5, 5))
    if len(cols) == 2:
        ax.quiver(X, Y, vals[:, 0].reshape(k, k), vals[:, 1].reshape(k, k), angles="xy")
    else:
        cs = ax.contourf(X, Y, vals[:, 0].reshape(k, k), levels=30)
        fig.colorbar(cs, ax=ax)
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_title(args.what)
    fig.savefig(args.svg, format="svg", metadata={"Date": None})
    plt.close(fig)


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true",
                        help="accepted for reproducible runs; all computation is already deterministic")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="stabilizable", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="grid dataset of state/derivative pairs")
    g.add_argument("--system", choices=["vdp", "linear"], default="vdp")
    g.add_argument("--mu", type=float, default=0.3)
    g.add_argument("--A", default="-1,0,0,-1", help="row-major matrix for --system linear")
    g.add_argument("--per-axis", type=int, default=100)
    g.add_argument("--min", type=float, default=-3.0)
    g.add_argument("--max", type=float, default=3.0)
    g.add_argument("--out", default="data.csv")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="learn drift, Lyapunov function and controller")
    t.add_argument("--data", default="data.csv")
    t.add_argument("--mode", choices=["stabilize", "autonomous", "hji"], default="stabilize")
    t.add_argument("--epsilon", type=float, default=10.0)
    t.add_argument("--w", default="quad:500", help="quad:<c> | propV:<c3> | hinf:<gamma>[:<margin>]")
    t.add_argument("--c3", type=float, default=1.0, help="decay rate for --mode autonomous")
    t.add_argument("--lr", type=float, default=0.005)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--epochs", type=int, default=500)
    t.add_argument("--hje-weight", type=float, default=0.0)
    t.add_argument("--g", default="vdp", help="built-in input map")
    t.add_argument("--R", default="identity", help="built-in control cost for --mode hji")
    t.add_argument("--control", choices=["free", "zero"], default="free")
    t.add_argument("--hidden", type=int, nargs="+", default=[64, 64])
    t.add_argument("--out", default="model.json")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", parents=[common], help="certification reports")
    v.add_argument("check", choices=["decrease", "roa", "hinf", "invopt"])
    v.add_argument("--ckpt", default="model.json")
    v.add_argument("--data")
    v.add_argument("--samples", type=int, default=10000)
    v.add_argument("--min", type=float, default=-3.0)
    v.add_argument("--max", type=float, default=3.0)
    v.add_argument("--gamma", type=float)
    v.add_argument("--c3", type=float, default=1.0)
    v.add_argument("--b", type=float, nargs="+", default=[1e2, 1e4, 1e6])
    v.add_argument("--out", default="report.json")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", parents=[common], help="integrate a closed loop")
    s.add_argument("--ckpt", default="model.json")
    s.add_argument("--plant", choices=["learned", "true-vdp"], default="learned")
    s.add_argument("--controller", choices=["learned", "sontag", "zero"], default="learned")
    s.add_argument("--mu", type=float, default=0.3)
    s.add_argument("--x0", default="2,2")
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--t-final", type=float, default=10.0)
    s.add_argument("--out", default="trajectory.csv")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("export-plot", parents=[common], help="sample fields on a grid")
    e.add_argument("--ckpt", default="model.json")
    e.add_argument("--what", choices=["V", "alpha", "sontag", "drift", "phase"], default="V")
    e.add_argument("--controller", choices=["learned", "sontag", "zero"], default="learned")
    e.add_argument("--per-axis", type=int, default=50)
    e.add_argument("--min", type=float, default=-3.0)
    e.add_argument("--max", type=float, default=3.0)
    e.add_argument("--out", default="field.csv")
    e.add_argument("--svg", help="also write a rendering to this SVG file")
    e.set_defaults(func=cmd_export_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    started = time.time()
    try:
        status = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigurationError, DatasetFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    outputs = getattr(args, "_outputs", [args.out])
    inputs = [p for p in getattr(args, "_inputs", []) if p]
    for attr in ("_outputs", "_inputs"):
        if hasattr(args, attr):
            delattr(args, attr)
    write_manifest(args, inputs, outputs, started)
    return status


if __name__ == "__main__":
    sys.exit(main())
