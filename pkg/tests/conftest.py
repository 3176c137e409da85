import numpy as np
import pytest

from stabilizable import nets, simdata, training
from stabilizable.stability import ProjectedModel, QuadraticState


def tiny_lyapunov(epsilon=0.5):
    """k=1, n=1, w0=1, b0=0, inner d=1, outer d=1."""
    icnn = nets.IcnnParameters.from_arrays(w=[[[1.0]]], b=[[0.0]], d=[1.0, 1.0])
    return nets.LyapunovParameters(icnn, epsilon)


def small_config(**kw):
    base = dict(
        fhat_hidden=(8,), alpha_hidden=(8,), icnn_hidden=(8, 8), epochs=3, batch_size=16, seed=0,
    )
    base.update(kw)
    return training.TrainConfig(**base)


def random_model(seed, **kw) -> ProjectedModel:
    kw.setdefault("weight", QuadraticState(500.0))
    return training.build_model(small_config(seed=seed, **kw), 2)


@pytest.fixture
def tiny_lyap():
    return tiny_lyapunov()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vdp_small():
    return simdata.grid_dataset(8, [(-3, 3), (-3, 3)], simdata.VanDerPol(0.3))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str = "") -> bool:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: [int(p) if p.isdigit() else p for p in k.replace("(", " ").replace(")", "").split()]):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
