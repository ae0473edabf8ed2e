import numpy as np
import pytest


def finite_difference(loss_of_value, value, eps=1e-6):
    """Central-difference gradient of a scalar function of one array.

    Independent of the engine's own grad_check: plain loops, no Tensor types.
    """
    value = np.asarray(value, dtype=np.float64)
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_of_value(value)
        flat[i] = orig - eps
        lo = loss_of_value(value)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def pairwise_auc_oracle(scores, labels) -> float:
    """O(n^2) pair counting with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    assert pos.size and neg.size, "pairwise oracle needs both classes"
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)


@pytest.fixture
def fd():
    return finite_difference


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One status line per acceptance criterion, printed after the run."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(results):
        terminalreporter.write_line(f"{criterion}: {results[criterion]}")
