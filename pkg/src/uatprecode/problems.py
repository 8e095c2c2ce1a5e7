"""Constrained resource-allocation problems.

Two instances of the generic constrained problem (minimize F subject to
G_i <= 0) live here:

* QoS-constrained hybrid precoding: maximize the sum-rate of K single-antenna
  users served through N_T antennas and N_RF phase-shifted RF chains, subject
  to per-user minimum rates. Total-power and constant-modulus constraints are
  structural: phases parameterize the analog precoder (unit modulus by
  construction) and an output-scaling projection pins ||W_RF W_BB||_F^2 = 1.
  Everything runs in canonical form: unit-norm channel, unit total power,
  noise 1/snr, which is an exact reparameterization of the raw problem.

* A K-channel power-allocation toy whose optimum is closed-form water-filling.
  It exists so sensitivity formulas can be validated against ground truth that
  the precoding problem cannot provide.

Each problem also exposes a tape-side API (objective / constraints built on a
ComputationRecord) used by training.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import adiff
from .adiff import ComputationRecord, Tensor

_LN2 = float(np.log(2.0))

P_TOT = 1.0  # canonical total power


@dataclass(frozen=True)
class PrecodingConfig:
    n_t: int
    n_rf: int
    k: int
    gamma: tuple  # per-user rate requirements, bits/s/Hz

    def __post_init__(self):
        if not (self.k <= self.n_rf <= self.n_t):
            raise ValueError(
                f"need k <= n_rf <= n_t, got k={self.k}, n_rf={self.n_rf}, n_t={self.n_t}")
        if len(self.gamma) != self.k or any(g <= 0 for g in self.gamma):
            raise ValueError("gamma must hold k positive entries")

    @property
    def gamma_array(self):
        return np.asarray(self.gamma, dtype=np.float64)


@dataclass
class PrecoderPair:
    """Analog phases (radians) and complex baseband precoder."""

    phases: np.ndarray  # (N_T, N_RF) real
    w_bb: np.ndarray    # (N_RF, K) complex

    @property
    def w_rf(self):
        return np.exp(1j * self.phases)

    def effective(self):
        return self.w_rf @ self.w_bb


def digital_rates(h: np.ndarray, v: np.ndarray, sigma2: float) -> np.ndarray:
    """Per-user rates for channel rows h_k^T and effective precoder columns v_i.

    R_k = log2(1 + |h_k^H v_k|^2 / (sum_{i != k} |h_k^H v_i|^2 + sigma2)).
    """
    t = np.conj(h) @ v
    p = np.abs(t) ** 2
    sig = np.diagonal(p, axis1=-2, axis2=-1)
    interf = p.sum(axis=-1) - sig
    return np.log2(1.0 + sig / (interf + sigma2))


def rates(cfg: PrecodingConfig, sample, y: PrecoderPair) -> np.ndarray:
    """Canonical-form rates: unit-norm channel, P_tot = 1, noise 1/snr."""
    return digital_rates(sample.h_norm, y.effective(), 1.0 / sample.snr)


def objective_F(cfg: PrecodingConfig, sample, y: PrecoderPair) -> float:
    """Negated sum-rate (the problem is posed as a minimization)."""
    return float(-np.sum(rates(cfg, sample, y)))


def constraints_G(cfg: PrecodingConfig, sample, y: PrecoderPair) -> np.ndarray:
    """QoS gaps gamma_k - R_k; feasible iff every entry <= 0."""
    return cfg.gamma_array - rates(cfg, sample, y)


def project_power(cfg: PrecodingConfig, y: PrecoderPair) -> PrecoderPair:
    """Scale the baseband precoder so ||W_RF W_BB||_F^2 == P_tot."""
    fro2 = float(np.sum(np.abs(y.effective()) ** 2))
    if fro2 <= 0.0:
        raise ValueError("cannot project a zero effective precoder")
    scale = np.sqrt(P_TOT / fro2)
    return PrecoderPair(phases=y.phases.copy(), w_bb=y.w_bb * scale)


# ---------------------------------------------------------------------------
# Tape-side precoding problem (batched)
# ---------------------------------------------------------------------------

class PrecodingProblem:
    """Batched, differentiable view of the hybrid precoding problem.

    Batches are dicts with h_re/h_im of shape (N, K, N_T) and snr of shape
    (N,). The channel parts become differentiable leaves (adversarial
    directions need their gradients); snr is a constant input by contract.
    """

    normalize_inputs = True

    def __init__(self, cfg: PrecodingConfig):
        self.cfg = cfg
        self.n_constraints = cfg.k

    # -- input plumbing ------------------------------------------------------

    def make_inputs(self, rec: ComputationRecord, batch,
                    differentiable=True) -> SimpleNamespace:
        snr = np.asarray(batch["snr"], dtype=np.float64)
        wrap = rec.leaf if differentiable else rec.constant
        return SimpleNamespace(
            h_re=wrap(batch["h_re"]),
            h_im=wrap(batch["h_im"]),
            snr=snr,
            snr_feature=np.log10(snr) / 2.0,
            n=snr.shape[0],
        )

    def input_leaf_list(self, inp):
        return [inp.h_re, inp.h_im]

    def detach_y(self, rec, y) -> SimpleNamespace:
        """Freeze the decision variable: rate terms see it as a constant."""
        return SimpleNamespace(v_re=rec.constant(y.v_re.values.copy()),
                               v_im=rec.constant(y.v_im.values.copy()))

    def perturb(self, batch, direction, eps, keep=None) -> dict:
        """x~ = (x + eps * d) / ||x + eps * d||_F per sample; snr untouched.

        `direction` lists per-sample arrays in input_leaf_list order; rows
        where `keep` is False (degenerate directions) stay at their previous
        value bit-for-bit.
        """
        d_re, d_im = direction
        re = batch["h_re"] + eps * d_re
        im = batch["h_im"] + eps * d_im
        fro = np.sqrt(np.sum(re * re + im * im, axis=(-2, -1), keepdims=True))
        if np.any(fro < 1e-12):
            raise ValueError("perturbed channel collapsed to zero norm")
        re = re / fro
        im = im / fro
        if keep is not None and not np.all(keep):
            re[~keep] = batch["h_re"][~keep]
            im[~keep] = batch["h_im"][~keep]
        return {"h_re": re, "h_im": im, "snr": batch["snr"]}

    def flat_features(self, rec, inp) -> Tensor:
        """(N, 2*K*N_T + 1): interleaved (re, im) channel entries, then SNR."""
        k, n_t = self.cfg.k, self.cfg.n_t
        pairs = adiff.stack_last([inp.h_re, inp.h_im])  # (N, K, N_T, 2)
        flat = adiff.reshape(pairs, (inp.n, 2 * k * n_t))
        snr_col = rec.constant(inp.snr_feature.reshape(-1, 1))
        return adiff.concatenate([flat, snr_col], axis=1)

    def grid_features(self, rec, inp) -> Tensor:
        """(N, K, N_T, 3): re, im, broadcast SNR feature per user-antenna edge."""
        k, n_t = self.cfg.k, self.cfg.n_t
        re = adiff.reshape(inp.h_re, (inp.n, k, n_t, 1))
        im = adiff.reshape(inp.h_im, (inp.n, k, n_t, 1))
        snr_grid = rec.constant(
            np.broadcast_to(inp.snr_feature[:, None, None, None],
                            (inp.n, k, n_t, 1)).copy())
        return adiff.concatenate([re, im, snr_grid], axis=3)

    # -- decision variable ---------------------------------------------------

    @property
    def mlp_in_dim(self):
        return 2 * self.cfg.k * self.cfg.n_t + 1

    @property
    def policy_raw_dim(self):
        c = self.cfg
        return c.n_t * c.n_rf + 2 * c.n_rf * c.k

    def split_policy_raw(self, raw: Tensor) -> tuple:
        """Flat policy head -> (phases, wbb_re, wbb_im) tensors."""
        c = self.cfg
        n = raw.values.shape[0]
        n_ph = c.n_t * c.n_rf
        phases = adiff.reshape(adiff.slice_(raw, (slice(None), slice(0, n_ph))),
                               (n, c.n_t, c.n_rf))
        re = adiff.reshape(
            adiff.slice_(raw, (slice(None), slice(n_ph, n_ph + c.n_rf * c.k))),
            (n, c.n_rf, c.k))
        im = adiff.reshape(
            adiff.slice_(raw, (slice(None), slice(n_ph + c.n_rf * c.k, None))),
            (n, c.n_rf, c.k))
        return phases, re, im

    def decode_policy(self, rec, inp, phases, wbb_re, wbb_im) -> SimpleNamespace:
        """Apply the structural constraints: unit-modulus analog stage and
        total-power scaling. Returns the scaled pair plus the effective
        precoder v = W_RF @ W_BB used by the rate expression."""
        wrf_re = adiff.cos(phases)
        wrf_im = adiff.sin(phases)
        v_re, v_im = adiff.complex_matmul(wrf_re, wrf_im, wbb_re, wbb_im)
        fro2 = adiff.sum_(adiff.cabs2(v_re, v_im), axis=(-2, -1), keepdims=True)
        if np.any(fro2.values <= 0.0):
            raise ValueError("zero effective precoder in batch; cannot project power")
        scale = adiff.divide(rec.constant(np.sqrt(P_TOT)), adiff.sqrt(fro2))
        return SimpleNamespace(
            phases=phases,
            wbb_re=adiff.multiply(wbb_re, scale),
            wbb_im=adiff.multiply(wbb_im, scale),
            v_re=adiff.multiply(v_re, scale),
            v_im=adiff.multiply(v_im, scale),
        )

    # -- objective / constraints --------------------------------------------

    def rates_tensor(self, rec, inp, y) -> Tensor:
        """(N, K) per-user rates, differentiable in channel and precoder."""
        k = self.cfg.k
        # t_{ki} = h_k^H v_i ; conjugation folds into the sign of h_im
        t_re = adiff.add(adiff.matmul(inp.h_re, y.v_re),
                         adiff.matmul(inp.h_im, y.v_im))
        t_im = adiff.subtract(adiff.matmul(inp.h_re, y.v_im),
                              adiff.matmul(inp.h_im, y.v_re))
        p = adiff.cabs2(t_re, t_im)  # (N, K, K)
        eye = rec.constant(np.eye(k))
        sig = adiff.sum_(adiff.multiply(p, eye), axis=-1)
        interf = adiff.subtract(adiff.sum_(p, axis=-1), sig)
        sigma2 = rec.constant((1.0 / inp.snr)[:, None])
        sinr = adiff.divide(sig, adiff.add(interf, sigma2))
        return adiff.log2(adiff.add(sinr, rec.constant(1.0)))

    def objective(self, rec, inp, y, rates_t=None) -> Tensor:
        """Per-sample F = -sum_k R_k, shape (N,)."""
        r = self.rates_tensor(rec, inp, y) if rates_t is None else rates_t
        return adiff.negate(adiff.sum_(r, axis=-1))

    def constraints(self, rec, inp, y, rates_t=None) -> Tensor:
        """Per-sample QoS gaps gamma - R, shape (N, K)."""
        r = self.rates_tensor(rec, inp, y) if rates_t is None else rates_t
        return adiff.subtract(rec.constant(self.cfg.gamma_array), r)

    # -- dataset adapters -----------------------------------------------------

    def batch_from_arrays(self, h: np.ndarray, snr: np.ndarray) -> dict:
        return {"h_re": np.ascontiguousarray(h.real),
                "h_im": np.ascontiguousarray(h.imag),
                "snr": np.asarray(snr, dtype=np.float64)}


# ---------------------------------------------------------------------------
# Water-filling toy problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyPowerProblem:
    """Allocate a power budget over K parallel channels with gains g."""

    gains: np.ndarray
    budget: float

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=np.float64)
        object.__setattr__(self, "gains", g)
        if np.any(g <= 0) or self.budget <= 0:
            raise ValueError("gains and budget must be positive")


def toy_objective(p: np.ndarray, gains: np.ndarray) -> float:
    """Sum capacity of the allocation (maximization form)."""
    return float(np.sum(np.log2(1.0 + p * gains)))


def toy_optimal(prob: ToyPowerProblem):
    """Closed-form water-filling optimum and its budget multiplier.

    p_k = max(0, mu - 1/g_k) with the water level mu chosen so the powers sum
    to the budget; the multiplier of the budget constraint is 1/(mu ln 2).
    """
    g = prob.gains
    inv = 1.0 / g
    order = np.argsort(inv)
    inv_sorted = inv[order]
    csum = np.cumsum(inv_sorted)
    # largest active-set size m with water level above the m-th floor
    m_active = 1
    for m in range(1, len(g) + 1):
        mu = (prob.budget + csum[m - 1]) / m
        if mu > inv_sorted[m - 1]:
            m_active = m
    mu = (prob.budget + csum[m_active - 1]) / m_active
    p = np.maximum(0.0, mu - inv)
    multiplier = 1.0 / (mu * _LN2)
    return p, multiplier


def toy_envelope_gradient(prob: ToyPowerProblem) -> np.ndarray:
    """d(optimal sum capacity)/d(gains) via the sensitivity formula.

    The budget constraint does not involve the gains, so the derivative is
    just the partial of the objective at the optimal allocation:
    p_k / ((1 + p_k g_k) ln 2), zero on inactive channels.
    """
    p, _ = toy_optimal(prob)
    return p / ((1.0 + p * prob.gains) * _LN2)


def toy_grid_search(prob: ToyPowerProblem, resolution: float = 1e-3):
    """Exhaustive search over the budget lattice {p_k = n_k * resolution}.

    Enumerates every lattice allocation with sum <= budget via dynamic
    programming over integer budget units (identical optimum to a dense mesh,
    independent of the water-filling formula). Returns (p, objective).
    """
    g = prob.gains
    units = int(round(prob.budget / resolution))
    step = prob.budget / units
    alloc_vals = np.log2(1.0 + np.arange(units + 1) * step * g[0])
    best = alloc_vals.copy()
    choice = [np.arange(units + 1)]
    for gk in g[1:]:
        vals = np.log2(1.0 + np.arange(units + 1) * step * gk)
        new_best = np.full(units + 1, -np.inf)
        new_choice = np.zeros(units + 1, dtype=np.int64)
        for a in range(units + 1):
            cand = best[: units + 1 - a] + vals[a]
            seg = new_best[a:]
            better = cand > seg
            seg[better] = cand[better]
            new_choice[a:][better] = a
        best = new_best
        choice.append(new_choice)
    top = int(np.argmax(best))
    # walk the choices back to the allocation itself
    alloc_units = np.zeros(len(g), dtype=np.int64)
    u = top
    for j in range(len(g) - 1, 0, -1):
        alloc_units[j] = choice[j][u]
        u -= alloc_units[j]
    alloc_units[0] = u
    p = alloc_units * step
    return p, float(best[top])


def toy_dense_grid(prob: ToyPowerProblem, resolution: float = 1e-3):
    """Plain meshgrid brute force for K <= 3 (cross-check for the lattice DP)."""
    g = prob.gains
    k = len(g)
    if k > 3:
        raise ValueError("dense grid is only tractable for K <= 3")
    units = int(round(prob.budget / resolution))
    step = prob.budget / units
    ax = np.arange(units + 1) * step
    if k == 1:
        p = np.array([prob.budget])
        return p, toy_objective(p, g)
    if k == 2:
        p1 = ax
        p2 = prob.budget - p1
        obj = np.log2(1 + p1 * g[0]) + np.log2(1 + p2 * g[1])
        i = int(np.argmax(obj))
        p = np.array([p1[i], p2[i]])
        return p, float(obj[i])
    p1, p2 = np.meshgrid(ax, ax, indexing="ij")
    p3 = prob.budget - p1 - p2
    ok = p3 >= -1e-12
    obj = np.where(
        ok,
        np.log2(1 + p1 * g[0]) + np.log2(1 + p2 * g[1])
        + np.log2(1 + np.maximum(p3, 0.0) * g[2]),
        -np.inf,
    )
    i, j = np.unravel_index(np.argmax(obj), obj.shape)
    p = np.array([p1[i, j], p2[i, j], max(p3[i, j], 0.0)])
    return p, float(obj[i, j])


class ToyAllocationProblem:
    """Batched, differentiable toy problem for training-path validation.

    mode "project": the policy head is scaled so allocations exactly use the
    budget; there are no learned constraints (the budget is structural).
    mode "multiplier": the head is only kept nonnegative and the budget enters
    as the single constraint G = sum(p) - budget <= 0.
    """

    normalize_inputs = False

    def __init__(self, k: int, budget: float = 1.0, mode: str = "project"):
        if mode not in ("project", "multiplier"):
            raise ValueError(f"unknown toy mode {mode!r}")
        self.k = k
        self.budget = float(budget)
        self.mode = mode
        self.n_constraints = 0 if mode == "project" else 1

    def make_inputs(self, rec, batch, differentiable=True) -> SimpleNamespace:
        gains = np.asarray(batch["gains"], dtype=np.float64)
        wrap = rec.leaf if differentiable else rec.constant
        return SimpleNamespace(gains=wrap(gains), n=gains.shape[0])

    def input_leaf_list(self, inp):
        return [inp.gains]

    def detach_y(self, rec, y) -> Tensor:
        return rec.constant(y.values.copy())

    def perturb(self, batch, direction, eps, keep=None) -> dict:
        (d,) = direction
        gains = batch["gains"] + eps * d
        if keep is not None and not np.all(keep):
            gains[~keep] = batch["gains"][~keep]
        return {"gains": gains}

    def flat_features(self, rec, inp) -> Tensor:
        return inp.gains

    @property
    def mlp_in_dim(self):
        return self.k

    @property
    def policy_raw_dim(self):
        return self.k

    def split_policy_raw(self, raw):
        return (raw,)

    def decode_policy(self, rec, inp, raw) -> Tensor:
        powers = adiff.softplus(raw)
        if self.mode == "project":
            total = adiff.sum_(powers, axis=-1, keepdims=True)
            powers = adiff.multiply(powers,
                                    adiff.divide(rec.constant(self.budget), total))
        return powers

    def objective(self, rec, inp, y) -> Tensor:
        cap = adiff.log2(adiff.add(adiff.multiply(y, inp.gains), rec.constant(1.0)))
        return adiff.negate(adiff.sum_(cap, axis=-1))

    def constraints(self, rec, inp, y) -> Tensor:
        if self.mode != "multiplier":
            raise ValueError("projection-mode toy problem has no constraints")
        total = adiff.sum_(y, axis=-1, keepdims=True)
        return adiff.subtract(total, rec.constant(self.budget))

    def batch_from_gains(self, gains: np.ndarray) -> dict:
        return {"gains": np.asarray(gains, dtype=np.float64)}
