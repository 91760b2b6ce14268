"""Central finite-difference oracle shared by gradient tests.

The oracle runs in float64 with h = 1e-6. Its own precision is limited by
cancellation: roughly eps * |loss| / h in absolute terms, so comparisons
use a relative tolerance plus that noise floor.
"""
import numpy as np

from mergelab import autodiff as ad
from mergelab.autodiff import Var

H = 1e-6
REL_TOL = 1e-5


def central_diff(build, params, index, coord, h=H):
    """d loss / d params[index].flat[coord] by central differences."""
    def loss_at(offset):
        bumped = [p.copy() for p in params]
        bumped[index].reshape(-1)[coord] += offset
        return float(build([Var(p) for p in bumped]).value)

    return (loss_at(+h) - loss_at(-h)) / (2 * h)


def assert_grads_match(build, params, coords_per_param=10, rng=None, rel_tol=REL_TOL):
    """Compare reverse-mode gradients of build(params) against the oracle.

    `build` maps a list of Vars to a scalar Var; `params` is a list of
    float64 arrays. A sample of coordinates per parameter is checked.
    """
    rng = rng or np.random.default_rng(0)
    vars_ = [Var(p.copy()) for p in params]
    loss = build(vars_)
    grads = ad.backward(loss, vars_)
    floor = 4e-9 * max(1.0, abs(float(loss.value)))
    for i, (p, g) in enumerate(zip(params, grads)):
        n = p.size
        coords = rng.choice(n, size=min(coords_per_param, n), replace=False)
        for c in coords:
            fd = central_diff(build, params, i, c)
            got = float(np.asarray(g).reshape(-1)[c])
            tol = rel_tol * max(abs(fd), abs(got)) + floor
            assert abs(got - fd) <= tol, (
                f"param {i} coord {c}: autodiff {got:.3e} vs finite diff {fd:.3e}"
            )
