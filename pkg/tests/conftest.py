import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from egnn.autodiff import Tensor

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def finite_difference_check(loss_fn, params, step=1e-5, rtol=1e-4, atol=1e-8, max_entries=40, rng=None):
    """Compare backprop gradients with central differences.

    ``loss_fn()`` must rebuild the loss from the current ``params`` values.
    At most ``max_entries`` randomly chosen entries per parameter are probed.
    Returns the largest ratio of error to its allowed bound (<= 1 passes).
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            up = loss_fn().item()
            flat[k] = orig - step
            down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2 * step)
            a = g.reshape(-1)[k]
            err = abs(a - numeric)
            bound = atol + rtol * max(abs(a), abs(numeric))
            assert err <= bound, f"gradient mismatch at entry {k}: analytic {a!r} vs numeric {numeric!r}"
            worst = max(worst, err / bound)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


_ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = getattr(item, "criterion_detail", "")
    status = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE_LINES.append(f"criterion {number} [{status}] {title} ({call.duration:.1f}s){' ' + detail if detail else ''}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the acceptance line of this test."""

    def record(text: str) -> None:
        request.node.criterion_detail = text

    return record
