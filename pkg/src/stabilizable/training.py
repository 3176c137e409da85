"""Losses, Adam, the minibatch training loop and checkpoint files."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import GradientBundle, NonFiniteError, ParameterBlock
from .errors import CheckpointError, ConfigurationError, TrainingDiverged
from .nets import init_lyapunov, init_mlp
from .simdata import COST_MAPS, INPUT_MAPS, Dataset, hinf_builtin, resolve
from .stability import (
    FreeNetwork,
    HinfComposite,
    ProjectedModel,
    ProportionalToV,
    QuadraticState,
    Structured,
    WeightSpec,
    Zero,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("autonomous", "stabilizable", "hji")


# ----------------------------------------------------------- weight specs


def parse_weight(text: str, hinf_system: str = "vdp") -> WeightSpec:
    """``quad:<c>``, ``propV:<c3>`` or ``hinf:<gamma>[:<margin>]``."""
    kind, _, rest = text.partition(":")
    try:
        args = [float(a) for a in rest.split(":")] if rest else []
    except ValueError:
        raise ConfigurationError(f"bad weight spec {text!r}") from None
    if kind == "quad" and len(args) == 1:
        return QuadraticState(args[0])
    if kind == "propV" and len(args) == 1:
        return ProportionalToV(args[0])
    if kind == "hinf" and len(args) in (1, 2):
        return hinf_builtin(hinf_system, args[0], args[1] if len(args) == 2 else 0.0)
    raise ConfigurationError(f"bad weight spec {text!r}; use quad:<c>, propV:<c3> or hinf:<gamma>")


def weight_to_dict(spec: WeightSpec) -> dict:
    if isinstance(spec, QuadraticState):
        return {"kind": "quad", "c": spec.c}
    if isinstance(spec, ProportionalToV):
        return {"kind": "propV", "c3": spec.c3}
    if isinstance(spec, HinfComposite):
        if spec.name is None:
            raise CheckpointError("only built-in H-infinity setups can be serialized")
        return {"kind": "hinf", "gamma": spec.gamma_hinf, "margin": spec.margin, "builtin": spec.name}
    raise TypeError(spec)


def weight_from_dict(d: dict) -> WeightSpec:
    kind = d.get("kind")
    if kind == "quad":
        return QuadraticState(float(d["c"]))
    if kind == "propV":
        return ProportionalToV(float(d["c3"]))
    if kind == "hinf":
        return hinf_builtin(d["builtin"], float(d["gamma"]), float(d.get("margin", 0.0)))
    raise CheckpointError(f"unknown weight kind {kind!r}")


# ------------------------------------------------------------------ config


@dataclass
class TrainConfig:
    mode: str = "stabilizable"
    epsilon: float = 10.0
    weight: WeightSpec = field(default_factory=lambda: QuadraticState(500.0))
    lr: float = 0.005
    batch_size: int = 32
    epochs: int = 500
    seed: int = 0
    hje_weight: float = 0.0
    g: str = "vdp"
    R: str = "identity"
    control: str = "free"  # free | zero, stabilizable mode only
    fhat_hidden: tuple[int, ...] = (64, 64)
    alpha_hidden: tuple[int, ...] = (64, 64)
    icnn_hidden: tuple[int, ...] = (64, 64)
    d: float = 0.1
    plateau_tol: float = 1e-6
    plateau_epochs: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.lr < 1:
            raise ConfigurationError("step size must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.hje_weight < 0:
            raise ConfigurationError("HJE weight must be nonnegative")
        if self.hje_weight > 0 and self.mode != "hji":
            raise ConfigurationError("the HJE weight is only used in hji mode")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch size and epochs must be positive")
        if self.mode == "autonomous" and not isinstance(self.weight, ProportionalToV):
            raise ConfigurationError("autonomous mode needs W = c3 V (propV:<c3>)")
        if self.control not in ("free", "zero"):
            raise ConfigurationError(f"unknown control {self.control!r}")
        self.fhat_hidden = tuple(self.fhat_hidden)
        self.alpha_hidden = tuple(self.alpha_hidden)
        self.icnn_hidden = tuple(self.icnn_hidden)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["weight"] = weight_to_dict(self.weight)
        for k in ("fhat_hidden", "alpha_hidden", "icnn_hidden"):
            out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weight"] = weight_from_dict(d["weight"])
        return cls(**d)


# ------------------------------------------------------------------ models


def _streams(seed: int):
    fhat, lyap, alpha, shuffle = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(s) for s in (fhat, lyap, alpha, shuffle))


def build_model(config: TrainConfig, n: int) -> ProjectedModel:
    """Fresh model with seeded initial parameters."""
    rng_f, rng_v, rng_a, _ = _streams(config.seed)
    fhat = init_mlp("fhat", [n, *config.fhat_hidden, n], rng_f)
    lyap = init_lyapunov(n, config.icnn_hidden, config.epsilon, rng_v, d=config.d)
    if config.mode == "autonomous":
        return ProjectedModel(fhat, lyap, config.weight, Zero(), None, "autonomous")
    g = resolve(INPUT_MAPS, config.g, "input map")
    m = np.asarray(g(np.zeros((1, n)))).shape[-1]
    if config.mode == "hji":
        control = Structured(resolve(COST_MAPS, config.R, "cost map"), config.R)
    elif config.control == "zero":
        control = Zero()
    else:
        control = FreeNetwork(init_mlp("alpha", [n, *config.alpha_hidden, m], rng_a))
    return ProjectedModel(fhat, lyap, config.weight, control, g, "stabilizable", g_name=config.g)


# ------------------------------------------------------------------ losses


def _loss_graph(model: ProjectedModel, x, xdot, env=None, hje_weight: float = 0.0):
    terms = model.terms_graph(x, env)
    scale = 1.0 / (x.shape[0] * x.shape[1])
    loss = dc.mul(scale, dc.reduce_sum(dc.square(dc.sub(xdot, terms.f))))
    if hje_weight:
        if terms.hji is None:
            raise ConfigurationError("the HJE term needs a structured controller")
        loss = dc.add(loss, dc.mul(hje_weight * scale, dc.reduce_sum(dc.square(terms.hji))))
    return loss


def _unpack(batch):
    if isinstance(batch, Dataset):
        return batch.x, batch.xdot
    x, xdot = batch
    return np.atleast_2d(np.asarray(x, dtype=float)), np.atleast_2d(np.asarray(xdot, dtype=float))


def batch_loss(model: ProjectedModel, batch) -> float:
    """Mean squared fit error of the projected drift, normalized by n |batch|."""
    x, xdot = _unpack(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return float(_loss_graph(model, x, xdot).value)


def batch_loss_hje(model: ProjectedModel, batch, a: float) -> float:
    """Fit loss plus a/(n |batch|) sum of squared HJI residuals."""
    if a < 0:
        raise ConfigurationError("HJE weight must be nonnegative")
    x, xdot = _unpack(batch)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if not isinstance(model.control, Structured):
        raise ConfigurationError("the HJE loss needs a structured controller")
    return float(_loss_graph(model, x, xdot, hje_weight=a).value)


def loss_and_grad(model: ProjectedModel, x, xdot, hje_weight: float = 0.0) -> GradientBundle:
    return dc.value_and_param_grad(
        lambda env, _: _loss_graph(model, x, xdot, env, hje_weight), model.blocks
    )


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    state: AdamState, blocks: Sequence[ParameterBlock], grads: GradientBundle, lr: float
) -> None:
    """One bias-corrected Adam descent step, in place on ``blocks`` and ``state``."""
    for name, g in grads.grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"gradient of {name}", None)
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for block in blocks:
        if not block.trainable:
            continue
        g = grads.grads[block.name]
        if g.shape != block.shape:
            raise ValueError(f"gradient shape {g.shape} != {block.shape} for {block.name}")
        m = state.m.setdefault(block.name, np.zeros(block.shape))
        v = state.v.setdefault(block.name, np.zeros(block.shape))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        block.assign(block.values - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    n: int
    m: int
    blocks: list[ParameterBlock]
    history: list[float] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION
    best_epoch: int = 0

    @property
    def mode(self) -> str:
        return self.config.mode

    def model(self) -> ProjectedModel:
        """Rebuild the projected model with the stored parameters."""
        model = build_model(self.config, self.n)
        stored = {b.name: b for b in self.blocks}
        for block in model.blocks:
            if block.name not in stored:
                raise CheckpointError(f"checkpoint lacks block {block.name}")
            block.assign(stored[block.name].values)
            block.trainable = stored[block.name].trainable
        return model

    @classmethod
    def from_model(cls, config, model: ProjectedModel, history, best_epoch=0) -> "Checkpoint":
        m = 0 if model.g is None else np.asarray(model.g(np.zeros((1, model.n)))).shape[-1]
        blocks = [ParameterBlock(b.name, b.values.copy(), b.trainable) for b in model.blocks]
        return cls(config, model.n, m, blocks, list(history), best_epoch=best_epoch)

    def to_dict(self) -> dict:
        cfg = self.config.to_dict()
        return {
            "version": self.version,
            "mode": self.mode,
            "n": self.n,
            "m": self.m,
            "epsilon": self.config.epsilon,
            "weight_spec": cfg["weight"],
            "config": cfg,
            "blocks": [
                {
                    "name": b.name,
                    "shape": list(b.shape),
                    "trainable": b.trainable,
                    "values": [float(v) for v in b.values.reshape(-1)],
                }
                for b in self.blocks
            ],
            "history": [float(h) for h in self.history],
            "best_epoch": self.best_epoch,
        }


def save_checkpoint(ckpt: Checkpoint, destination) -> None:
    text = json.dumps(ckpt.to_dict(), indent=1, allow_nan=False)
    Path(destination).write_text(text + "\n")


def load_checkpoint(source) -> Checkpoint:
    try:
        raw = json.loads(Path(source).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc})") from None
    if not isinstance(raw, dict) or "version" not in raw:
        raise CheckpointError(f"{source}: not a checkpoint document")
    if raw["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{source}: checkpoint version {raw['version']} is not supported "
            f"(this build reads version {CHECKPOINT_VERSION})"
        )
    try:
        config = TrainConfig.from_dict(raw["config"])
        blocks = []
        for b in raw["blocks"]:
            values = np.array(b["values"], dtype=float).reshape(b["shape"])
            blocks.append(ParameterBlock(b["name"], values, bool(b.get("trainable", True))))
        return Checkpoint(
            config,
            int(raw["n"]),
            int(raw["m"]),
            blocks,
            [float(h) for h in raw["history"]],
            best_epoch=int(raw.get("best_epoch", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint ({exc!r})") from None


# ------------------------------------------------------------------- train


def _full_loss(model, data, hje_weight):
    return float(_loss_graph(model, data.x, data.xdot, hje_weight=hje_weight).value)


def train(
    config: TrainConfig,
    data: Dataset,
    callback: Callable[[int, ProjectedModel], None] | None = None,
) -> Checkpoint:
    """Minibatch Adam on the projected-drift loss.

    Each epoch visits a fresh seeded random partition of the data. Training
    stops at the epoch budget or when the full-data loss changes by less than
    ``plateau_tol`` (relative) over ``plateau_epochs`` epochs. The returned
    checkpoint holds the parameters of the epoch with the lowest full-data
    loss; the history records every epoch, starting from the initial model.
    ``callback(epoch, model)`` runs after every epoch.
    """
    if len(data) < config.batch_size:
        raise ConfigurationError(f"need at least batch_size={config.batch_size} samples")
    model = build_model(config, data.n)
    *_, rng = _streams(config.seed)
    blocks = model.blocks
    state = AdamState()
    a = config.hje_weight

    history = [_full_loss(model, data, a)]
    best = Checkpoint.from_model(config, model, history, 0)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(data))
        try:
            for start in range(0, len(data), config.batch_size):
                idx = perm[start:start + config.batch_size]
                bundle = loss_and_grad(model, data.x[idx], data.xdot[idx], a)
                if not np.isfinite(bundle.value):
                    raise NonFiniteError("loss", None)
                adam_update(state, blocks, bundle, config.lr)
            loss = _full_loss(model, data, a)
        except (NonFiniteError, ValueError) as exc:
            best.history = list(history)
            raise TrainingDiverged(f"epoch {epoch}: {exc}", best) from exc
        history.append(loss)
        if loss <= min(history[:-1]):
            best = Checkpoint.from_model(config, model, history, epoch)
        if callback is not None:
            callback(epoch, model)
        log.info("epoch %d loss %.6g", epoch, loss)
        k = config.plateau_epochs
        if len(history) > k:
            ref = history[-1 - k]
            if abs(history[-1] - ref) <= config.plateau_tol * max(abs(ref), 1e-300):
                break
    best.history = list(history)
    return best
