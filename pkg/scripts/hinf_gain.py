"""L2-gain probe for a model trained with the H-infinity weight.

    python3 scripts/hinf_gain.py --gamma 2 --epochs 50

Trains on the van der Pol grid with W = |x|^2 + 4 |L_gd V|^2 / gamma^2
(+ margin |x|^2), then drives the closed loop from x(0) = 0 with a few
disturbance signals through the input channel and prints the energy ratio
int |z|^2 / int |d|^2 next to gamma^2.
"""
import argparse

import numpy as np

from stabilizable import simdata, training

PROBES = {
    "pulse": lambda t: 1.0 if t <= 1.0 else 0.0,
    "sine": lambda t: np.sin(2.0 * t) * (t <= 5.0),
    "step-down": lambda t: 0.5 if t <= 3.0 else 0.0,
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--margin", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--per-axis", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--t-final", type=float, default=10.0)
    args = p.parse_args()

    data = simdata.grid_dataset(args.per_axis, [(-3, 3), (-3, 3)], simdata.VanDerPol(0.3))
    weight = simdata.hinf_builtin("vdp", args.gamma, args.margin)
    config = training.TrainConfig(weight=weight, epochs=args.epochs, seed=args.seed)
    model = training.train(config, data).model()
    loop = simdata.ClosedLoop(model)
    for name, signal in PROBES.items():
        z, d, ratio = simdata.disturbance_experiment(
            loop, weight.g_d, weight.h, signal, args.dt, args.t_final, n=2
        )
        print(f"{name:10s} |z|^2 {z:.4g}  |d|^2 {d:.4g}  ratio {ratio:.4g}  gamma^2 {args.gamma ** 2:.4g}")


if __name__ == "__main__":
    main()
