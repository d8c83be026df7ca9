import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def fd_gradients(model, clean, masked, selection, h=1e-3):
    """Central differences of the loss for every parameter entry, selection held fixed."""
    from fmxcoders.training import recon_loss

    params = {k: np.array(v, dtype=np.float64) for k, v in model.params().items()}
    out = {}
    for name, arr in params.items():
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = recon_loss(model.with_params(params), clean, masked, selection=selection).loss
            arr[idx] = orig - h
            down = recon_loss(model.with_params(params), clean, masked, selection=selection).loss
            arr[idx] = orig
            grad[idx] = (up - down) / (2 * h)
        out[name] = grad
    return out


def gradient_rel_errors(model, clean, masked=None):
    """Relative error ``||fd - analytic|| / ||fd||`` per parameter group."""
    from fmxcoders.training import recon_loss

    model = model.astype(np.float64)
    base = recon_loss(model, clean, masked)
    selection = base.code.values > 0
    fd = fd_gradients(model, clean, masked, selection)
    errs = {}
    for name, g in fd.items():
        denom = max(np.linalg.norm(g), 1e-12)
        errs[name] = float(np.linalg.norm(g - base.grads[name]) / denom)
    return errs


ACCEPTANCE = {}  # criterion number -> (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
