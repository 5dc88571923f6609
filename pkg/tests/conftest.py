import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zerocost_i2v import tensor as tz
from zerocost_i2v.tensor import GradTape, Tensor
from zerocost_i2v.vit import ViTConfig, init_backbone

settings.register_profile(
    "default", max_examples=100, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

#: property suites run at least this many random cases each
PROPERTY_CASES = 100


@pytest.fixture
def tiny_cfg():
    """Smallest config that still has several frames, heads and patches."""
    return ViTConfig(depth=2, width=16, heads=4, patch_size=4, image_size=8, frames=3,
                     num_classes=3)


@pytest.fixture
def tiny_backbone(tiny_cfg):
    return init_backbone(tiny_cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_check(fn, inputs: dict, probes: int = 20, h: float = 1e-5,
                            seed: int = 0, floor: float = 1e-6, scale_floor: float = 1e-3):
    """Compare analytic gradients of ``sum(fn(**inputs) * R)`` with central differences.

    Returns the worst relative error ``|fd - an| / max(|fd|, |an|, floor')``
    over ``probes`` random elements of every input, where
    ``floor' = max(floor, scale_floor * G)`` and ``G`` is the largest analytic
    gradient component of the whole function.  Without the scaled floor an
    exactly-zero gradient (e.g. attention key bias) reports pure rounding
    noise as a relative error of order one.
    """
    r = np.random.default_rng(seed)
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in inputs.items()}
    with GradTape() as tape:
        out = fn(**tensors)
        weights = Tensor(r.standard_normal(out.shape))
        loss = tz.sum_(tz.mul(out, weights))
    tape.backward(loss)
    scale = max((float(np.max(np.abs(t.grad))) for t in tensors.values()
                 if t.grad is not None and t.grad.size), default=0.0)
    floor = max(floor, scale_floor * scale)

    def value(arrays):
        y = fn(**{k: Tensor(v) for k, v in arrays.items()})
        return float(np.sum(y.data * weights.data))

    worst = 0.0
    for name, t in tensors.items():
        base = {k: np.array(v.data) for k, v in tensors.items()}
        flat_idx = r.choice(t.data.size, size=min(probes, t.data.size), replace=False)
        for idx in flat_idx:
            pos = np.unravel_index(idx, t.shape)
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][pos] += h
            minus[name][pos] -= h
            fd = (value(plus) - value(minus)) / (2 * h)
            an = float(t.grad[pos]) if t.grad is not None else 0.0
            err = abs(fd - an) / max(abs(fd), abs(an), floor)
            worst = max(worst, err)
    return worst


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``criterion(n, title, passed, detail)`` records a verdict line and asserts it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def check(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
