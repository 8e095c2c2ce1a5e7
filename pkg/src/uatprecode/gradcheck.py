"""Central finite-difference verification of every registered tape op.

Each op gets random float64 inputs drawn away from kinks and domain edges,
a fixed random cotangent to scalarize the output, and per-coordinate central
differences with step 1e-5. The reported figure is the max of
|analytic - fd| / (|analytic| + 1e-12) over all probed coordinates.
"""

from __future__ import annotations

import numpy as np

from . import adiff

FD_STEP = 1e-5
FD_TOL = 1e-5

# op name -> (input generator, op kwargs). Generators return a list of input
# arrays; all are treated as differentiable leaves.
def _pair(rng):
    shape = tuple(rng.integers(2, 5, size=2))
    return [rng.uniform(-2.0, 2.0, shape), rng.uniform(-2.0, 2.0, shape)]


def _pair_broadcast(rng):
    m, n = rng.integers(2, 5, size=2)
    return [rng.uniform(-2.0, 2.0, (m, n)), rng.uniform(-2.0, 2.0, (1, n))]


def _single(rng, lo=-2.0, hi=2.0, away_from=None, margin=1e-3):
    shape = tuple(rng.integers(2, 5, size=2))
    x = rng.uniform(lo, hi, shape)
    if away_from is not None:
        # keep a margin so the FD stencil never straddles a kink
        x = np.where(np.abs(x - away_from) < margin, x + 2 * margin, x)
    return [x]


def _divisor_pair(rng):
    a, b = _pair(rng)
    b = np.where(np.abs(b) < 0.2, b + 0.5 * np.sign(b + 1e-9), b)
    return [a, b]


def _matmul_inputs(rng):
    m, k, n = rng.integers(2, 5, size=3)
    return [rng.uniform(-2.0, 2.0, (m, k)), rng.uniform(-2.0, 2.0, (k, n))]


def _affine_inputs(rng):
    m, k, n = rng.integers(2, 5, size=3)
    return [rng.uniform(-2.0, 2.0, (2, m, k)), rng.uniform(-2.0, 2.0, (k, n)),
            rng.uniform(-2.0, 2.0, (n,))]


CASES = {
    "matmul": (_matmul_inputs, {}),
    "affine": (_affine_inputs, {}),
    "add": (_pair_broadcast, {}),
    "subtract": (_pair, {}),
    "multiply": (_pair, {}),
    "divide": (_divisor_pair, {}),
    "negate": (_single, {}),
    "exp": (lambda rng: _single(rng, -1.5, 1.5), {}),
    "log2": (lambda rng: _single(rng, 0.2, 4.0), {}),
    "sqrt": (lambda rng: _single(rng, 0.2, 4.0), {}),
    "tanh": (_single, {}),
    "relu": (lambda rng: _single(rng, away_from=0.0), {}),
    "softplus": (_single, {}),
    "sin": (_single, {}),
    "cos": (_single, {}),
    "sum": (_single, {"axis": 1}),
    "mean": (_single, {"axis": 0}),
    "broadcast_to": (lambda rng: [rng.uniform(-2, 2, (1, 3))], {"shape": (4, 3)}),
    "reshape": (lambda rng: [rng.uniform(-2, 2, (2, 6))], {"shape": (3, 4)}),
    "transpose": (_single, {}),
    "concatenate": (None, {}),  # special-cased: list-of-tensors signature
    "slice": (lambda rng: [rng.uniform(-2, 2, (4, 4))],
              {"key": (slice(1, 3), slice(0, 2))}),
    "cabs2": (_pair, {}),
}


def _scalarized(rec, kind, leaf_tensors, kwargs, weights):
    if kind == "concatenate":
        out = adiff.concatenate(leaf_tensors, axis=0)
    else:
        out = adiff.forward(kind, *leaf_tensors, **kwargs)
    return adiff.sum_(adiff.multiply(out, rec.constant(weights))), out


def check_op(kind, rng=None, trials=10, points_per_trial=10):
    """Max FD relative error for one op kind over random probe coordinates."""
    if rng is None:
        rng = np.random.default_rng(0)
    gen, kwargs = CASES[kind]
    if kind == "concatenate":
        gen = _pair
    max_rel = 0.0
    for _ in range(trials):
        inputs = gen(rng)
        rec = adiff.ComputationRecord()
        leaves = [rec.leaf(x) for x in inputs]
        probe_out = (adiff.concatenate(leaves, axis=0) if kind == "concatenate"
                     else adiff.forward(kind, *leaves, **kwargs))
        weights = rng.uniform(0.5, 1.5, probe_out.values.shape)
        scalar, _ = _scalarized(rec, kind, leaves, kwargs, weights)
        grads = rec.backward(scalar, leaves)

        def objective(arrays):
            r2 = adiff.ComputationRecord()
            ls = [r2.leaf(x) for x in arrays]
            s, _ = _scalarized(r2, kind, ls, kwargs, weights)
            return float(s.values)

        for _ in range(points_per_trial):
            which = int(rng.integers(len(inputs)))
            flat_idx = int(rng.integers(inputs[which].size))
            shifted = [x.copy() for x in inputs]
            shifted[which].flat[flat_idx] += FD_STEP
            f_plus = objective(shifted)
            shifted[which].flat[flat_idx] -= 2 * FD_STEP
            f_minus = objective(shifted)
            fd = (f_plus - f_minus) / (2 * FD_STEP)
            analytic = grads[leaves[which]].flat[flat_idx]
            rel = abs(analytic - fd) / (abs(analytic) + 1e-12)
            max_rel = max(max_rel, rel)
    return max_rel


def check_all(ops=None, seed=0, trials=10, points_per_trial=10):
    """FD-check every (or the selected) op kind; returns {name: max_rel_err}."""
    rng = np.random.default_rng(seed)
    names = list(CASES) if ops is None else list(ops)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ValueError(f"unknown op kinds: {unknown}")
    return {name: check_op(name, rng, trials, points_per_trial) for name in names}
