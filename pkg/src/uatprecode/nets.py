"""Policy and multiplier networks.

Two architectures share one weight container:

* "mlp": fully connected net over the flat input encoding.
* "edgegnn": permutation-equivariant net over the user x antenna edge grid.
  Each edge updates from its own feature plus mean-pooled features of its
  user row and antenna column (shared weights), so permuting users permutes
  the baseband columns and leaves the analog phases untouched.

The policy head is decoded by the owning problem (structural projections live
there); the multiplier head always ends in softplus, so multipliers are
nonnegative by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import adiff
from .problems import PrecoderPair, PrecodingProblem

ARCHS = ("mlp", "edgegnn")
ACTIVATIONS = {"relu": adiff.relu, "tanh": adiff.tanh}

CKPT_MAGIC = b"UATCKPT1"


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    hidden_layers: int
    widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.widths) != self.hidden_layers:
            raise ValueError("widths must list one size per hidden layer")

    def to_json(self):
        return {"arch": self.arch, "hidden_layers": self.hidden_layers,
                "widths": list(self.widths), "activation": self.activation}

    @classmethod
    def from_json(cls, d):
        return cls(arch=d["arch"], hidden_layers=d["hidden_layers"],
                   widths=tuple(d["widths"]), activation=d["activation"])


@dataclass
class NetworkWeights:
    role: str  # "policy" | "multiplier"
    spec: NetworkSpec
    params: dict  # name -> float64 ndarray, insertion-ordered

    def validate_finite(self):
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite parameter {name}")


def _uniform_fanin(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def _init_linear(params, rng, name, d_in, d_out):
    params[f"{name}.w"] = _uniform_fanin(rng, d_in, (d_in, d_out))
    params[f"{name}.b"] = np.zeros(d_out)


_ROLE_STREAM = {"policy": 0x706f6c, "multiplier": 0x6d756c}


def _weights_rng(seed, role):
    key = np.array([seed, _ROLE_STREAM[role]], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _out_dim(problem, role):
    return problem.policy_raw_dim if role == "policy" else problem.n_constraints


def init_weights(spec: NetworkSpec, problem, role: str, seed: int) -> NetworkWeights:
    """Fan-in uniform weights, zero biases, reproducible from the seed."""
    if role not in ("policy", "multiplier"):
        raise ValueError(f"unknown role {role!r}")
    rng = _weights_rng(seed, role)
    params = {}
    if spec.arch == "mlp":
        dims = [problem.mlp_in_dim, *spec.widths, _out_dim(problem, role)]
        for i in range(len(dims) - 1):
            _init_linear(params, rng, f"layer{i}", dims[i], dims[i + 1])
    else:
        if not isinstance(problem, PrecodingProblem):
            raise ValueError("edgegnn requires the precoding problem's edge grid")
        cfg = problem.cfg
        feat = [3, *spec.widths]
        for i in range(spec.hidden_layers):
            for part in ("self", "row", "col"):
                params[f"layer{i}.{part}.w"] = _uniform_fanin(
                    rng, feat[i], (feat[i], feat[i + 1]))
            params[f"layer{i}.b"] = np.zeros(feat[i + 1])
        w = feat[-1]
        if role == "policy":
            _init_linear(params, rng, "head.phases", w, cfg.n_rf)
            _init_linear(params, rng, "head.wbb", w, 2 * cfg.n_rf)
        else:
            _init_linear(params, rng, "head.lam", w, 1)
    return NetworkWeights(role=role, spec=spec, params=params)


# ---------------------------------------------------------------------------
# Tape-side forward passes
# ---------------------------------------------------------------------------

def _leafify(rec, weights: NetworkWeights):
    """Register every parameter as a differentiable leaf on the record."""
    return {name: rec.leaf(arr, name) for name, arr in weights.params.items()}


def _mlp_body(rec, x, p, spec, n_layers_total):
    act = ACTIVATIONS[spec.activation]
    h = x
    for i in range(n_layers_total):
        h = adiff.affine(h, p[f"layer{i}.w"], p[f"layer{i}.b"])
        if i < n_layers_total - 1:
            h = act(h)
    return h


def _gnn_body(rec, grid, p, spec):
    """Edge update from own, user-row mean, and antenna-column mean features.

    Pooled terms are multiplied while still collapsed (they are constant along
    the pooled axis) and only broadcast in the final sum."""
    act = ACTIVATIONS[spec.activation]
    h = grid
    for i in range(spec.hidden_layers):
        own = adiff.matmul(h, p[f"layer{i}.self.w"])
        row = adiff.matmul(adiff.mean(h, axis=2, keepdims=True), p[f"layer{i}.row.w"])
        col = adiff.matmul(adiff.mean(h, axis=1, keepdims=True), p[f"layer{i}.col.w"])
        h = act(adiff.add(adiff.add(adiff.add(own, row), col), p[f"layer{i}.b"]))
    return h


def policy_forward_tape(weights: NetworkWeights, rec, inp, problem, param_leaves=None):
    """Run the policy on a batch already registered on `rec`; returns the
    problem's decoded decision variable (feasible by construction)."""
    spec = weights.spec
    p = _leafify(rec, weights) if param_leaves is None else param_leaves
    if spec.arch == "mlp":
        x = problem.flat_features(rec, inp)
        raw = _mlp_body(rec, x, p, spec, spec.hidden_layers + 1)
        parts = problem.split_policy_raw(raw)
    else:
        cfg = problem.cfg
        h = _gnn_body(rec, problem.grid_features(rec, inp), p, spec)
        ant = adiff.mean(h, axis=1)   # (N, N_T, W): user-pooled, permutation invariant
        usr = adiff.mean(h, axis=2)   # (N, K, W): antenna-pooled, permutation equivariant
        phases = adiff.affine(ant, p["head.phases.w"], p["head.phases.b"])
        bb = adiff.affine(usr, p["head.wbb.w"], p["head.wbb.b"])
        re = adiff.transpose(adiff.slice_(bb, (slice(None), slice(None),
                                               slice(0, cfg.n_rf))), (0, 2, 1))
        im = adiff.transpose(adiff.slice_(bb, (slice(None), slice(None),
                                               slice(cfg.n_rf, None))), (0, 2, 1))
        parts = (phases, re, im)
    return problem.decode_policy(rec, inp, *parts), p


def multiplier_forward_tape(weights: NetworkWeights, rec, inp, problem,
                            param_leaves=None):
    """Nonnegative multipliers, shape (N, n_constraints)."""
    spec = weights.spec
    p = _leafify(rec, weights) if param_leaves is None else param_leaves
    if spec.arch == "mlp":
        x = problem.flat_features(rec, inp)
        raw = _mlp_body(rec, x, p, spec, spec.hidden_layers + 1)
    else:
        h = _gnn_body(rec, problem.grid_features(rec, inp), p, spec)
        usr = adiff.mean(h, axis=2)
        raw = adiff.affine(usr, p["head.lam.w"], p["head.lam.b"])
        raw = adiff.reshape(raw, (inp.n, problem.n_constraints))
    return adiff.softplus(raw), p


# ---------------------------------------------------------------------------
# Single-sample conveniences
# ---------------------------------------------------------------------------

def encode_input(sample, cfg, arch="mlp") -> np.ndarray:
    """The network's input encoding of one channel sample.

    mlp: length 2*K*N_T + 1 vector of interleaved (re, im) entries plus the
    SNR feature log10(snr)/2. edgegnn: (K, N_T, 3) grid with the SNR feature
    broadcast to every edge.
    """
    snr_feat = np.log10(sample.snr) / 2.0
    if arch == "mlp":
        flat = np.empty(2 * cfg.k * cfg.n_t + 1)
        flat[0:-1:2] = sample.h_norm.real.ravel()
        flat[1:-1:2] = sample.h_norm.imag.ravel()
        flat[-1] = snr_feat
        return flat
    grid = np.empty((cfg.k, cfg.n_t, 3))
    grid[..., 0] = sample.h_norm.real
    grid[..., 1] = sample.h_norm.imag
    grid[..., 2] = snr_feat
    return grid


def _single_sample_inputs(rec, problem, sample):
    batch = problem.batch_from_arrays(sample.h_norm[None], np.array([sample.snr]))
    return problem.make_inputs(rec, batch)


def forward_policy(weights: NetworkWeights, problem: PrecodingProblem,
                   sample) -> PrecoderPair:
    """One sample through the policy; output satisfies the structural
    constraints (unit-modulus analog entries, total power exactly 1)."""
    rec = adiff.ComputationRecord()
    inp = _single_sample_inputs(rec, problem, sample)
    y, _ = policy_forward_tape(weights, rec, inp, problem)
    return PrecoderPair(
        phases=y.phases.values[0].copy(),
        w_bb=y.wbb_re.values[0] + 1j * y.wbb_im.values[0],
    )


def forward_multiplier(weights: NetworkWeights, problem, sample) -> np.ndarray:
    rec = adiff.ComputationRecord()
    inp = _single_sample_inputs(rec, problem, sample)
    lam, _ = multiplier_forward_tape(weights, rec, inp, problem)
    return lam.values[0].copy()


def grad_output_wrt_input(weights: NetworkWeights, problem, sample,
                          cotangent: dict) -> np.ndarray:
    """Vector-Jacobian product of the policy against the channel input.

    `cotangent` maps output names to arrays: "phases", "wbb_re", "wbb_im"
    seed the decoded precoder; "raw" seeds the pre-decode head. The SNR
    feature is a constant input, so the returned gradient is the complex
    K x N_T array of channel sensitivities only.
    """
    rec = adiff.ComputationRecord()
    inp = _single_sample_inputs(rec, problem, sample)
    spec = weights.spec
    p = _leafify(rec, weights)
    outputs = {}
    if spec.arch == "mlp":
        x = problem.flat_features(rec, inp)
        raw = _mlp_body(rec, x, p, spec, spec.hidden_layers + 1)
        outputs["raw"] = raw
        parts = problem.split_policy_raw(raw)
    else:
        y_tmp, _ = policy_forward_tape(weights, rec, inp, problem, param_leaves=p)
        parts = None
        outputs.update(phases=y_tmp.phases, wbb_re=y_tmp.wbb_re, wbb_im=y_tmp.wbb_im)
    if parts is not None:
        y = problem.decode_policy(rec, inp, *parts)
        if hasattr(y, "phases"):
            outputs.update(phases=y.phases, wbb_re=y.wbb_re, wbb_im=y.wbb_im)
        else:
            outputs["powers"] = y

    terms = []
    for name, cot in cotangent.items():
        if name not in outputs:
            raise KeyError(f"unknown policy output {name!r}")
        out = outputs[name]
        c = rec.constant(np.asarray(cot, dtype=np.float64).reshape(out.values.shape))
        terms.append(adiff.sum_(adiff.multiply(out, c)))
    total = terms[0]
    for t in terms[1:]:
        total = adiff.add(total, t)
    grads = rec.backward(total, [inp.h_re, inp.h_im])
    return (grads[inp.h_re][0] + 1j * grads[inp.h_im][0])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, weights: NetworkWeights, epoch: int, seed: int,
                    extra: dict | None = None) -> None:
    order = list(weights.params)
    header = {
        "spec": weights.spec.to_json(),
        "role": weights.role,
        "shapes": {name: list(weights.params[name].shape) for name in order},
        "order": order,
        "epoch": epoch,
        "seed": seed,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name in order:
            f.write(np.ascontiguousarray(weights.params[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (NetworkWeights, header dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack_from("<I", blob, len(CKPT_MAGIC))
    hstart = len(CKPT_MAGIC) + 4
    header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    spec = NetworkSpec.from_json(header["spec"])
    params = {}
    offset = hstart + hlen
    for name in header["order"]:
        shape = tuple(header["shapes"][name])
        nbytes = int(np.prod(shape)) * 8
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)),
                            offset=offset).reshape(shape)
        params[name] = arr.copy()
        offset += nbytes
    return NetworkWeights(role=header["role"], spec=spec, params=params), header
