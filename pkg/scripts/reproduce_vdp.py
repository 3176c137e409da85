"""Van der Pol stabilization run: train, then report fit, closed-loop and open-loop behaviour.

    python3 scripts/reproduce_vdp.py --out runs/vdp --seed 1
    python3 scripts/reproduce_vdp.py --out runs/vdp2 --epsilon 1e-3 --w 1000

Writes the dataset, checkpoint, loss log, RoA table and a summary JSON into
``--out``.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from stabilizable import simdata, training, verify
from stabilizable.stability import QuadraticState


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/vdp")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--per-axis", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=10.0)
    p.add_argument("--w", type=float, default=500.0, help="W(x) = w |x|^2")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dt", type=float, default=1e-3, help="RK4 step for closed-loop runs")
    p.add_argument("--starts", type=int, default=10)
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = simdata.grid_dataset(args.per_axis, [(-3, 3), (-3, 3)], simdata.VanDerPol(0.3))
    simdata.write_dataset(data, out / "data.csv")

    config = training.TrainConfig(
        epsilon=args.epsilon, weight=QuadraticState(args.w), epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
    )

    def progress(epoch, _model):
        if epoch % 50 == 0:
            print(f"epoch {epoch}", flush=True)

    start = time.perf_counter()
    ckpt = training.train(config, data, callback=progress)
    train_time = time.perf_counter() - start
    training.save_checkpoint(ckpt, out / "model.json")
    model = ckpt.model()
    mse = float(np.mean((model.drift(data.x) - data.xdot) ** 2))
    print(f"trained {len(ckpt.history) - 1} epochs in {train_time:.0f} s, best {ckpt.best_epoch}, grid MSE {mse:.3e}")

    x0 = np.random.default_rng(0).uniform(-2, 2, (args.starts, 2))
    closed = simdata.rk4_integrate(simdata.ClosedLoop(model), x0, args.dt, 10.0)
    final = np.linalg.norm(closed.states[-1], axis=1)
    print("closed loop final |x|:", np.array2string(final, precision=2))

    probes = np.array([[0.1, 0.0], [0.3, 0.0], [1.0, 0.0], [3.0, 0.0]])
    opened = simdata.rk4_integrate(simdata.ClosedLoop(model, "zero"), probes, 1e-2, 100.0)
    late = np.linalg.norm(opened.states[opened.times >= 50], axis=2)
    for x, lo, hi in zip(probes, late.min(axis=0), late.max(axis=0)):
        print(f"open loop from {x}: |x| in [{lo:.3g}, {hi:.3g}] on t in [50, 100]")

    roa = verify.roa_check(model, data)
    roa.write_csv(out / "roa.csv")
    print(f"RoA: {roa.violations} violations, certified level {roa.certified_level}")

    summary = {
        "config": config.to_dict(),
        "epochs": len(ckpt.history) - 1,
        "best_epoch": ckpt.best_epoch,
        "train_seconds": train_time,
        "grid_mse": mse,
        "closed_loop_final_norms": final.tolist(),
        "open_loop_probes": {str(x.tolist()): [float(lo), float(hi)] for x, lo, hi in zip(probes, late.min(0), late.max(0))},
        "roa": roa.to_dict(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")


if __name__ == "__main__":
    main()
