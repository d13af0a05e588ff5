import numpy as np
import pytest

from layerwise.model import init_model
from layerwise.plan import ModelSpec, build_plan, load_spec


def small_spec(**overrides) -> ModelSpec:
    base = dict(
        d_model=16, num_layers=2, head_dim=4, alpha_min=0.5, alpha_max=1.0,
        beta_min=0.5, beta_max=2.0, vocab_size=11, context_length=16, kv_group=2,
    )
    base.update(overrides)
    return ModelSpec(**base)


@pytest.fixture
def small_ckpt():
    return init_model(build_plan(small_spec()), seed=3).astype(np.float64)


@pytest.fixture(scope="session")
def tiny_spec():
    return load_spec("tiny.cfg")


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar f at x, one coordinate at a time."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
