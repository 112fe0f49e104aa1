import numpy as np
import pytest


def numeric_grad(f, x, h=1e-3, coords=None):
    """Central finite differences of scalar f at selected flat coordinates.

    f takes the array and returns a float (computed at full precision by
    the caller); returns dict {flat_index: estimate}. Works on a private copy.
    """
    x = np.array(x, dtype=np.float32)
    flat = x.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    out = {}
    for i in coords:
        keep = flat[i]
        xp = np.float32(keep + h)
        xm = np.float32(keep - h)
        flat[i] = xp
        fp = f(x)
        flat[i] = xm
        fm = f(x)
        flat[i] = keep
        # divide by the realized float32 step, not the nominal one
        out[i] = (fp - fm) / (float(xp) - float(xm))
    return out


def rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
