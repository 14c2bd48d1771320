import numpy as np
import pytest
import torch


def finite_difference_check(fn, tensors, n_coords=20, eps=1e-6, seed=0):
    """Compare autograd against central differences on random coordinates.

    ``fn`` maps the list ``tensors`` (float64, requires_grad) to a scalar.
    Returns the largest relative error over the sampled coordinates.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    fn(tensors).backward()
    grads = [t.grad.detach().clone() for t in tensors]
    sizes = np.array([t.numel() for t in tensors])
    worst = 0.0
    for _ in range(n_coords):
        k = rng.choice(len(tensors), p=sizes / sizes.sum())
        i = int(rng.integers(tensors[k].numel()))
        flat = tensors[k].data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            up = fn(tensors).item()
            flat[i] = orig - eps
            down = fn(tensors).item()
            flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = grads[k].view(-1)[i].item()
        denom = max(abs(numeric), abs(analytic), 1e-7)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one summary line per acceptance criterion, printed after the run."""
    def record(number, passed, detail=""):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        line = f"criterion {number:>2}: {status} {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
