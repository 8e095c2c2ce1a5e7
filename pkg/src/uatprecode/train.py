"""Primal-dual training with adversarial hardening.

The base loop alternates descent on the policy weights and ascent on the
multiplier weights of the sample-averaged Lagrangian. From a configurable
epoch onward, each batch additionally runs an inner loop that chains
adversarially perturbed copies of the batch and updates on those:

* method "uat": the perturbation direction is the input-gradient of the
  policy's optimality gap. The through-network part is a vector-Jacobian
  product of the cost against the input; the unknown optimal side is replaced
  by its sensitivity expansion, with the multiplier network standing in for
  the optimal multipliers. Constraints that do not depend on the input drop
  out of that term entirely.
* method "pgd_baseline": plain normalized-gradient ascent on the raw cost
  with steps, a projection radius and a step count taken from supervised
  adversarial training, followed by a single update on the final examples.

Both perturbations leave the SNR input untouched and re-normalize channel
inputs back to the unit sphere.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adiff
from .adiff import ComputationRecord
from .nets import NetworkWeights, init_weights, multiplier_forward_tape, policy_forward_tape

METHODS = ("pdl", "uat", "pgd_baseline")
COST_MODES = ("objective_only", "objective_plus_violation")

DEGENERATE_NORM = 1e-12

PGD_STEPS = 7
PGD_STEP_SIZE = 2.0 / 64.0
PGD_RADIUS = 8.0 / 64.0


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch, batch_index, what):
        super().__init__(
            f"non-finite {what} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


class DegenerateDirectionError(RuntimeError):
    """Adversarial numerator below the degeneracy threshold."""


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 100
    batches: int | None = None             # default: dataset size // batch_size
    lr_policy: float = 1e-3
    lr_multiplier: float = 1e-3
    at_start_epoch: int | None = None      # default: half the epochs
    adv_iters: int = 5
    perturb_range: float = 5.0 / 64.0
    seed: int = 0
    method: str = "pdl"
    cost_mode: str = "objective_only"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.cost_mode not in COST_MODES:
            raise ValueError(f"unknown cost mode {self.cost_mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.method != "pdl" and self.adv_iters < 1:
            raise ValueError("adv_iters must be >= 1 for adversarial methods")
        if self.perturb_range <= 0:
            raise ValueError("perturb_range must be positive")
        if self.at_start_epoch is not None and self.at_start_epoch > self.epochs:
            raise ValueError("at_start_epoch must not exceed epochs")

    @property
    def adv_from_epoch(self):
        return self.at_start_epoch if self.at_start_epoch is not None \
            else max(1, self.epochs // 2)


@dataclass
class AdvState:
    """Chained adversarial batch inside one inner loop."""
    batch: dict
    iteration: int


class Adam:
    """Adaptive-moment update; `maximize` flips to gradient ascent."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 maximize=False):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.maximize = maximize
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if self.maximize:
                g = -g
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class TrainState:
    problem: object
    policy: NetworkWeights
    multiplier: NetworkWeights | None
    opt_policy: Adam
    opt_multiplier: Adam | None
    updates: int = 0

    @classmethod
    def fresh(cls, problem, policy_spec, multiplier_spec, cfg: TrainConfig):
        policy = init_weights(policy_spec, problem, "policy", cfg.seed)
        multiplier = None
        opt_mult = None
        if problem.n_constraints > 0:
            multiplier = init_weights(multiplier_spec, problem, "multiplier",
                                      cfg.seed)
            opt_mult = Adam(multiplier.params, cfg.lr_multiplier, maximize=True)
        return cls(problem=problem, policy=policy, multiplier=multiplier,
                   opt_policy=Adam(policy.params, cfg.lr_policy),
                   opt_multiplier=opt_mult)


# ---------------------------------------------------------------------------
# Lagrangian and the primal-dual step
# ---------------------------------------------------------------------------

def _build_lagrangian(problem, state, rec, inp):
    """Batch-mean Lagrangian on the record.

    Returns (L, mean_F, policy leaves, multiplier leaves); the two leaf dicts
    stay separate because the roles reuse parameter names.
    """
    y, pol_leaves = policy_forward_tape(state.policy, rec, inp, problem)
    mult_leaves = {}
    if hasattr(problem, "rates_tensor"):
        r = problem.rates_tensor(rec, inp, y)
        f = problem.objective(rec, inp, y, rates_t=r)
        g = problem.constraints(rec, inp, y, rates_t=r) \
            if problem.n_constraints else None
    else:
        f = problem.objective(rec, inp, y)
        g = problem.constraints(rec, inp, y) if problem.n_constraints else None
    mean_f = adiff.mean(f)
    if g is not None and state.multiplier is not None:
        lam, mult_leaves = multiplier_forward_tape(state.multiplier, rec, inp,
                                                   problem)
        lagr = adiff.add(mean_f, adiff.mean(
            adiff.sum_(adiff.multiply(lam, g), axis=-1)))
    else:
        lagr = mean_f
    return lagr, mean_f, pol_leaves, mult_leaves


def lagrangian(problem, state: TrainState, batch) -> float:
    """Batch-mean Lagrangian value (reduces to mean F without multipliers)."""
    rec = ComputationRecord()
    inp = problem.make_inputs(rec, batch, differentiable=False)
    lagr, _, _, _ = _build_lagrangian(problem, state, rec, inp)
    return float(lagr.values)


def pdl_step(problem, state: TrainState, batch, epoch=0, batch_index=0):
    """One descent step on the policy and one ascent step on the multipliers,
    both from a single backward pass. Returns (lagrangian, mean_F) values."""
    rec = ComputationRecord()
    inp = problem.make_inputs(rec, batch, differentiable=False)
    lagr, mean_f, pol_leaves, mult_leaves = _build_lagrangian(problem, state,
                                                              rec, inp)
    if not np.isfinite(lagr.values):
        raise NonFiniteLossError(epoch, batch_index, "loss")
    grads = rec.backward(lagr,
                         list(pol_leaves.values()) + list(mult_leaves.values()))
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(epoch, batch_index, "gradient")
    state.opt_policy.step(state.policy.params,
                          {name: grads[t] for name, t in pol_leaves.items()})
    if state.multiplier is not None:
        state.opt_multiplier.step(
            state.multiplier.params,
            {name: grads[t] for name, t in mult_leaves.items()})
    state.updates += 1
    return float(lagr.values), float(mean_f.values)


# ---------------------------------------------------------------------------
# Adversarial directions (gap ascent)
# ---------------------------------------------------------------------------

def _through_network_cost(problem, state, rec, inp_net, inp_const, cost_mode):
    """Cost with the decision variable produced from differentiable inputs
    while the cost's own input slot is held constant. Its input-gradient is
    exactly the (dF/dy)(df_y/dx) term."""
    y, _ = policy_forward_tape(state.policy, rec, inp_net, problem)
    if hasattr(problem, "rates_tensor"):
        r = problem.rates_tensor(rec, inp_const, y)
        f = problem.objective(rec, inp_const, y, rates_t=r)
        g = problem.constraints(rec, inp_const, y, rates_t=r) \
            if problem.n_constraints else None
    else:
        f = problem.objective(rec, inp_const, y)
        g = problem.constraints(rec, inp_const, y) if problem.n_constraints else None
    if cost_mode == "objective_plus_violation" and g is not None:
        f = adiff.add(f, adiff.sum_(adiff.relu(g), axis=-1))
    return f, y


def adversarial_direction_batch(problem, state: TrainState, batch,
                                cost_mode="objective_only"):
    """Per-sample unit directions of steepest gap increase.

    Returns (direction arrays in input-leaf order, valid mask); rows whose
    numerator norm falls below the degeneracy threshold are masked out.
    """
    rec = ComputationRecord()
    inp_net = problem.make_inputs(rec, batch, differentiable=True)
    inp_const = problem.make_inputs(rec, batch, differentiable=False)
    f, y = _through_network_cost(problem, state, rec, inp_net, inp_const,
                                 cost_mode)
    scalar = adiff.sum_(f)
    wanted = list(problem.input_leaf_list(inp_net))
    inp_g = None
    if problem.n_constraints and state.multiplier is not None:
        # sensitivity term: multipliers weight the input-gradient of the
        # constraints at the frozen decision variable
        lam, _ = multiplier_forward_tape(
            state.multiplier, rec, inp_const, problem,
            param_leaves={k: rec.constant(v)
                          for k, v in state.multiplier.params.items()})
        inp_g = problem.make_inputs(rec, batch, differentiable=True)
        g_fixed = problem.constraints(rec, inp_g, problem.detach_y(rec, y))
        scalar = adiff.subtract(
            scalar,
            adiff.sum_(adiff.multiply(rec.constant(lam.values), g_fixed)))
        wanted += list(problem.input_leaf_list(inp_g))
    grads = rec.backward(scalar, wanted)

    n_leaves = len(problem.input_leaf_list(inp_net))
    nums = []
    for i in range(n_leaves):
        num = grads[wanted[i]]
        if inp_g is not None:
            num = num + grads[wanted[n_leaves + i]]
        nums.append(num)
    n = nums[0].shape[0]
    sq = np.zeros(n)
    for num in nums:
        sq += np.sum(num.reshape(n, -1) ** 2, axis=1)
    norms = np.sqrt(sq)
    valid = norms >= DEGENERATE_NORM
    safe = np.where(valid, norms, 1.0)
    shape_one = (n,) + (1,) * (nums[0].ndim - 1)
    dirs = [np.where(valid.reshape(shape_one), num / safe.reshape(shape_one), 0.0)
            for num in nums]
    return dirs, valid


def adversarial_direction(problem, state: TrainState, sample,
                          cost_mode="objective_only") -> np.ndarray:
    """Unit gap-ascent direction for one channel sample (complex K x N_T)."""
    batch = problem.batch_from_arrays(sample.h_norm[None],
                                      np.array([sample.snr]))
    dirs, valid = adversarial_direction_batch(problem, state, batch, cost_mode)
    if not valid[0]:
        raise DegenerateDirectionError("direction numerator below 1e-12")
    return dirs[0][0] + 1j * dirs[1][0]


def adversarial_example(sample, d: np.ndarray, eps: float):
    """x~ = (x + eps d) / ||x + eps d||_F with the SNR input left alone."""
    from .channels import ChannelSample  # local import to avoid cycle at init

    perturbed = sample.h_norm + eps * d
    fro = np.linalg.norm(perturbed)
    if fro < DEGENERATE_NORM:
        raise ValueError("perturbed sample has degenerate norm")
    return ChannelSample(h_norm=perturbed / fro, snr=sample.snr)


def uat_inner(problem, state: TrainState, batch, cfg: TrainConfig, epoch,
              batch_index):
    """Chained perturb-then-update rounds on one batch (the adversarial
    phase); each round spends one more parameter update."""
    adv = AdvState(batch=batch, iteration=0)
    for _ in range(cfg.adv_iters):
        dirs, valid = adversarial_direction_batch(problem, state, adv.batch,
                                                  cfg.cost_mode)
        adv.batch = problem.perturb(adv.batch, dirs, cfg.perturb_range,
                                    keep=valid)
        adv.iteration += 1
        pdl_step(problem, state, adv.batch, epoch, batch_index)
    return adv


def uat_epoch(problem, state: TrainState, batches, cfg: TrainConfig, epoch=1):
    """One full epoch of the adversarial phase: the base update plus
    adv_iters chained adversarial updates per batch."""
    for b, batch in enumerate(batches):
        pdl_step(problem, state, batch, epoch, b)
        uat_inner(problem, state, batch, cfg, epoch, b)
    return state


# ---------------------------------------------------------------------------
# Supervised-AT style baseline
# ---------------------------------------------------------------------------

def _total_cost_gradient(problem, state, batch, cost_mode):
    """d cost / d input through every path (network and direct)."""
    rec = ComputationRecord()
    inp = problem.make_inputs(rec, batch, differentiable=True)
    f, _ = _through_network_cost(problem, state, rec, inp, inp, cost_mode)
    leaves = problem.input_leaf_list(inp)
    grads = rec.backward(adiff.sum_(f), leaves)
    return [grads[leaf] for leaf in leaves]


def pgd_baseline_examples(problem, state: TrainState, batch,
                          cost_mode="objective_only", steps=PGD_STEPS,
                          step_size=PGD_STEP_SIZE, radius=PGD_RADIUS,
                          trace=None):
    """Normalized-gradient ascent on the raw cost: `steps` steps of length
    `step_size`, each projected back onto the radius ball around the original
    input and re-normalized to the unit sphere. Zero-gradient samples stay."""
    orig_re = batch["h_re"]
    orig_im = batch["h_im"]
    cur = batch
    for _ in range(steps):
        nums = _total_cost_gradient(problem, state, cur, cost_mode)
        n = nums[0].shape[0]
        norms = np.sqrt(sum(np.sum(a.reshape(n, -1) ** 2, axis=1) for a in nums))
        valid = norms >= DEGENERATE_NORM
        safe = np.where(valid, norms, 1.0)
        shape_one = (n,) + (1,) * (nums[0].ndim - 1)
        d_re, d_im = (np.where(valid.reshape(shape_one),
                               a / safe.reshape(shape_one), 0.0) for a in nums)
        re = cur["h_re"] + step_size * d_re
        im = cur["h_im"] + step_size * d_im
        # project onto the ball around the original sample
        delta_re = re - orig_re
        delta_im = im - orig_im
        dist = np.sqrt(np.sum(delta_re.reshape(n, -1) ** 2, axis=1)
                       + np.sum(delta_im.reshape(n, -1) ** 2, axis=1))
        shrink = np.where(dist > radius, radius / np.maximum(dist, 1e-300), 1.0)
        re = orig_re + delta_re * shrink.reshape(shape_one)
        im = orig_im + delta_im * shrink.reshape(shape_one)
        if trace is not None:
            post_re = re - orig_re
            post_im = im - orig_im
            trace.append(np.sqrt(
                np.sum(post_re.reshape(n, -1) ** 2, axis=1)
                + np.sum(post_im.reshape(n, -1) ** 2, axis=1)))
        fro = np.sqrt(np.sum(re * re + im * im, axis=(-2, -1), keepdims=True))
        re = re / fro
        im = im / fro
        cur = {"h_re": re, "h_im": im, "snr": batch["snr"]}
    return cur


def pgd_inner(problem, state: TrainState, batch, cfg: TrainConfig, epoch,
              batch_index):
    examples = pgd_baseline_examples(problem, state, batch, cfg.cost_mode)
    pdl_step(problem, state, examples, epoch, batch_index)


# ---------------------------------------------------------------------------
# Metrics and the outer loop
# ---------------------------------------------------------------------------

VIOLATION_TOL = 1e-6


def policy_metrics(problem, state_or_weights, batch, tau=VIOLATION_TOL,
                   chunk=1000):
    """(mean feasible-zeroed objective value, violation ratio) on arrays."""
    weights = state_or_weights.policy if isinstance(state_or_weights, TrainState) \
        else state_or_weights
    n = next(iter(batch.values())).shape[0]
    sr_sum = 0.0
    viol = 0
    for lo in range(0, n, chunk):
        sub = {k: v[lo:lo + chunk] for k, v in batch.items()}
        rec = ComputationRecord()
        inp = problem.make_inputs(rec, sub, differentiable=False)
        y, _ = policy_forward_tape(weights, rec, inp, problem)
        f = problem.objective(rec, inp, y).values
        if problem.n_constraints:
            g = problem.constraints(rec, inp, y).values
            bad = np.any(g > tau, axis=-1)
        else:
            bad = np.zeros(f.shape[0], dtype=bool)
        sr_sum += float(np.sum(np.where(bad, 0.0, -f)))
        viol += int(np.sum(bad))
    return sr_sum / n, viol / n


@dataclass
class TrainResult:
    policy: NetworkWeights
    multiplier: NetworkWeights | None
    log: list = field(default_factory=list)


def _shuffle_rng(seed, epoch):
    key = np.array([seed, (1 << 62) + epoch], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def train(problem, policy_spec, multiplier_spec, data_batch, cfg: TrainConfig,
          log_file=None, id_eval_size=2000) -> TrainResult:
    """Run the full loop over a stacked data batch (dict of arrays).

    The base phase runs every epoch; the adversarial phase (per `cfg.method`)
    joins from `cfg.adv_from_epoch`. Deterministic given `cfg.seed`.
    """
    n = next(iter(data_batch.values())).shape[0]
    n_batches = cfg.batches if cfg.batches is not None else n // cfg.batch_size
    if n_batches < 1 or n < n_batches * cfg.batch_size:
        raise ValueError(
            f"dataset of {n} samples cannot fill {n_batches} x {cfg.batch_size}")
    state = TrainState.fresh(problem, policy_spec, multiplier_spec, cfg)
    eval_slice = {k: v[: min(id_eval_size, n)] for k, v in data_batch.items()}
    result = TrainResult(policy=state.policy, multiplier=state.multiplier)

    for epoch in range(1, cfg.epochs + 1):
        tic = time.perf_counter()
        perm = _shuffle_rng(cfg.seed, epoch).permutation(n)
        perm = perm[: n_batches * cfg.batch_size].reshape(n_batches,
                                                          cfg.batch_size)
        adversarial = cfg.method != "pdl" and epoch >= cfg.adv_from_epoch
        lagr_sum = 0.0
        f_sum = 0.0
        for b in range(n_batches):
            batch = {k: v[perm[b]] for k, v in data_batch.items()}
            lagr_v, f_v = pdl_step(problem, state, batch, epoch, b)
            lagr_sum += lagr_v
            f_sum += f_v
            if adversarial:
                if cfg.method == "uat":
                    uat_inner(problem, state, batch, cfg, epoch, b)
                else:
                    pgd_inner(problem, state, batch, cfg, epoch, b)
        asr, vr = policy_metrics(problem, state, eval_slice)
        entry = {
            "epoch": epoch,
            "method": cfg.method,
            "mean_lagrangian": lagr_sum / n_batches,
            "mean_F": f_sum / n_batches,
            "id_asr": asr,
            "id_vr": vr,
            "updates_so_far": state.updates,
            "wall_ms": (time.perf_counter() - tic) * 1e3,
        }
        result.log.append(entry)
        if log_file is not None:
            import json
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()
    return result
