"""Metrics, the zero-forcing reference and the OOD sweep harness.

ASR (average sum-rate) zeroes a sample's sum-rate when any QoS constraint is
violated beyond the tolerance; VR is the violating fraction. The reference
column is a fully digital zero-forcing precoder with equal per-user power --
a clearly labeled sanity baseline, deliberately *not* a numerical optimum.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import channels as ch
from .adiff import ComputationRecord
from .nets import load_checkpoint, policy_forward_tape
from .problems import PrecodingConfig, PrecodingProblem, digital_rates

VIOLATION_TOL = 1e-6


@dataclass
class MetricsReport:
    asr: float
    vr: float
    n_samples: int
    violation_tol: float
    per_sample_rates: np.ndarray | None = None

    @property
    def per_sample_sr(self):
        """Feasible-zeroed per-sample sum-rates (needs per_sample_rates)."""
        if self.per_sample_rates is None:
            raise ValueError("report was built without per-sample rates")
        return self._sr

    def __post_init__(self):
        if not (0.0 <= self.vr <= 1.0) or self.asr < 0.0:
            raise ValueError("metrics out of range")


def _finish_report(rates, gamma, tau, keep_rates):
    if tau == np.inf:
        bad = np.zeros(rates.shape[0], dtype=bool)
    elif tau == -np.inf:
        bad = np.ones(rates.shape[0], dtype=bool)
    else:
        bad = np.any(rates < gamma - tau, axis=-1)
    sr = np.where(bad, 0.0, rates.sum(axis=-1))
    report = MetricsReport(
        asr=float(sr.mean()),
        vr=float(bad.mean()),
        n_samples=rates.shape[0],
        violation_tol=tau,
        per_sample_rates=rates if keep_rates else None,
    )
    report._sr = sr
    return report


def policy_rates(weights, problem: PrecodingProblem, h, snr, chunk=512):
    """Per-user rates of the learned policy over stacked samples."""
    n = h.shape[0]
    out = np.empty((n, problem.cfg.k))
    for lo in range(0, n, chunk):
        sub = problem.batch_from_arrays(h[lo:lo + chunk], snr[lo:lo + chunk])
        rec = ComputationRecord()
        inp = problem.make_inputs(rec, sub, differentiable=False)
        y, _ = policy_forward_tape(weights, rec, inp, problem)
        out[lo:lo + chunk] = problem.rates_tensor(rec, inp, y).values
    return out


def asr_vr(weights, problem: PrecodingProblem, dataset,
           tau=VIOLATION_TOL, keep_rates=False) -> MetricsReport:
    """ASR/VR of a trained policy on a dataset."""
    h, snr = dataset.stacked()
    rates = policy_rates(weights, problem, h, snr)
    return _finish_report(rates, problem.cfg.gamma_array, tau, keep_rates)


# ---------------------------------------------------------------------------
# Zero-forcing reference
# ---------------------------------------------------------------------------

def zf_precoder(h: np.ndarray, k: int) -> np.ndarray:
    """Fully digital ZF columns with equal per-user power summing to 1.

    Solves conj(h) @ w_i = delta_ki via the pseudo-inverse (rank threshold
    1e-10), then scales each column to power 1/K.
    """
    pinv = np.linalg.pinv(np.conj(h), rcond=1e-10)
    norms = np.linalg.norm(pinv, axis=0)
    norms = np.where(norms < 1e-300, 1.0, norms)
    return pinv / norms / np.sqrt(k)


def zf_rates(sample, k: int) -> np.ndarray:
    w = zf_precoder(sample.h_norm, k)
    return digital_rates(sample.h_norm, w, 1.0 / sample.snr)


def zf_report(dataset, gamma, tau=VIOLATION_TOL, keep_rates=False) -> MetricsReport:
    k = len(gamma)
    rates = np.stack([zf_rates(s, k) for s in dataset.samples])
    return _finish_report(rates, np.asarray(gamma), tau, keep_rates)


# ---------------------------------------------------------------------------
# OOD sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepSpec:
    """A list of test distributions plus shared evaluation settings."""

    test_specs: list  # (ChannelModelSpec, param_name, param_value)
    n_test: int = 2000
    snr_db: float = 10.0
    seed: int = 7777

    def __post_init__(self):
        if self.n_test < 1:
            raise ValueError("n_test must be >= 1")


def preset_sweep(name: str, n_test=2000, snr_db=10.0, seed=7777) -> SweepSpec:
    """The standard OOD grids: Rician kappa in dB, correlation coefficients
    for users and antennas separately, and sparse path counts."""
    specs = []
    if name == "rician":
        for kdb in (0.0, 5.0, 10.0, 15.0, 20.0):
            spec = ch.ChannelModelSpec(family="rician", kappa=10.0 ** (kdb / 10.0))
            specs.append((spec, "kappa_db", kdb))
    elif name == "correlated":
        for rho in (0.2, 0.4, 0.6, 0.8):
            specs.append((ch.ChannelModelSpec(family="correlated", rho_u=rho),
                          "rho_u", rho))
        for rho in (0.2, 0.4, 0.6, 0.8):
            specs.append((ch.ChannelModelSpec(family="correlated", rho_a=rho),
                          "rho_a", rho))
    elif name == "sparse":
        for n_paths in (5, 4, 3, 2):
            specs.append((ch.ChannelModelSpec(family="sparse", n_paths=n_paths),
                          "n_paths", n_paths))
    elif name == "rayleigh":
        specs.append((ch.ChannelModelSpec(family="rayleigh"), "none", 0.0))
    else:
        raise ValueError(f"unknown preset {name!r}")
    return SweepSpec(test_specs=specs, n_test=n_test, snr_db=snr_db, seed=seed)


CSV_COLUMNS = ("model", "method", "family", "param_name", "param_value",
               "snr_db", "n_test", "asr_bps_hz", "vr", "asr_rel_reference")


def _load_policy_checkpoint(path):
    weights, header = load_checkpoint(path)
    extra = header.get("extra", {})
    cfg = PrecodingConfig(n_t=extra["n_t"], n_rf=extra["n_rf"], k=extra["k"],
                          gamma=tuple(extra["gamma"]))
    return weights, PrecodingProblem(cfg)


def ood_sweep(sweep: SweepSpec, checkpoints: list) -> list:
    """Evaluate each checkpoint on each test distribution.

    `checkpoints` rows are dicts {model, method, path}. Missing checkpoint
    files yield rows with empty metrics so the sweep keeps going. Returns the
    result rows; render with `rows_to_csv` / `rows_to_markdown`.
    """
    if not checkpoints:
        raise ValueError("no checkpoints given")
    loaded = []
    reference_problem = None
    for entry in checkpoints:
        try:
            weights, problem = _load_policy_checkpoint(entry["path"])
            reference_problem = problem
        except (OSError, ValueError, KeyError):
            weights, problem = None, None
        loaded.append((entry, weights, problem))
    if reference_problem is None:
        raise ValueError("no checkpoint in the sweep could be loaded")

    cfg = reference_problem.cfg
    rows = []
    for j, (model_spec, pname, pval) in enumerate(sweep.test_specs):
        testset = ch.generate_dataset(model_spec, cfg.k, cfg.n_t, sweep.n_test,
                                      snr_range_db=(sweep.snr_db, sweep.snr_db),
                                      seed=sweep.seed + j)
        ref = zf_report(testset, cfg.gamma, tau=np.inf)
        rows.append({
            "model": "reference", "method": "zf",
            "family": model_spec.family, "param_name": pname,
            "param_value": pval, "snr_db": sweep.snr_db,
            "n_test": sweep.n_test, "asr_bps_hz": ref.asr, "vr": ref.vr,
            "asr_rel_reference": 1.0,
        })
        for entry, weights, problem in loaded:
            row = {
                "model": entry["model"], "method": entry["method"],
                "family": model_spec.family, "param_name": pname,
                "param_value": pval, "snr_db": sweep.snr_db,
                "n_test": sweep.n_test,
            }
            if weights is None:
                row.update(asr_bps_hz="", vr="", asr_rel_reference="absent")
            else:
                rep = asr_vr(weights, problem, testset)
                row.update(asr_bps_hz=rep.asr, vr=rep.vr,
                           asr_rel_reference=(rep.asr / ref.asr if ref.asr > 0
                                              else ""))
            rows.append(row)
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".6g")
    return v


def rows_to_markdown(rows) -> str:
    """One table per (family, param_name): rows are model/method pairs,
    columns are the parameter values, cells are ASR (VR)."""
    groups = {}
    for row in rows:
        groups.setdefault((row["family"], row["param_name"]), []).append(row)
    out = []
    for (family, pname), grows in groups.items():
        pvals = sorted({r["param_value"] for r in grows})
        pairs = []
        for r in grows:
            tag = (r["model"], r["method"])
            if tag not in pairs:
                pairs.append(tag)
        out.append(f"### {family} ({pname})\n")
        header = "| model | method | " + " | ".join(_fmt(p) if isinstance(p, str)
                                                    else f"{pname}={_fmt(p)}"
                                                    for p in pvals) + " |"
        out.append(header)
        out.append("|" + "---|" * (2 + len(pvals)))
        for model, method in pairs:
            cells = []
            for p in pvals:
                match = [r for r in grows
                         if (r["model"], r["method"]) == (model, method)
                         and r["param_value"] == p]
                if not match or match[0]["asr_bps_hz"] == "":
                    cells.append("absent")
                else:
                    r = match[0]
                    cells.append(f"{r['asr_bps_hz']:.3f} (vr {r['vr']:.3f})")
            out.append(f"| {model} | {method} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


def curves_from_log(log_entries) -> str:
    """Per-epoch training curves as CSV (epoch vs logged metrics)."""
    cols = ("epoch", "method", "mean_lagrangian", "mean_F", "id_asr", "id_vr",
            "updates_so_far")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    for entry in log_entries:
        writer.writerow({k: _fmt(entry[k]) if isinstance(entry[k], float)
                         else entry[k] for k in cols})
    return buf.getvalue()


def bootstrap_gain_ci(sr_a: np.ndarray, sr_b: np.ndarray, n_boot=1000,
                      seed=0, level=0.95):
    """Percentile bootstrap CI of mean(sr_a) - mean(sr_b), paired by sample."""
    if sr_a.shape != sr_b.shape:
        raise ValueError("paired bootstrap needs equal-length metrics")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xb00],
                                                            dtype=np.uint64)))
    diffs = sr_a - sr_b
    n = diffs.shape[0]
    idx = rng.integers(0, n, size=(n_boot, n))
    means = diffs[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    return (float(np.quantile(means, alpha)),
            float(np.quantile(means, 1.0 - alpha)))
