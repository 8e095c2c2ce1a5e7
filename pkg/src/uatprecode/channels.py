"""Channel samplers and dataset persistence.

Four small-scale fading families are supported: Rayleigh, Rician, spatially
correlated, and L-path sparse. Every stored sample is the unit-Frobenius-norm
channel matrix together with its linear-scale SNR (||H||_F^2 * P_tot / sigma^2),
which is the exact input contract of the learned precoders.

Sampling uses counter-based Philox streams keyed by (seed, sample index), so
generation order (or parallelism) cannot change the result.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("rayleigh", "rician", "correlated", "sparse")

MAGIC = b"UATDS001"


class DatasetFormatError(Exception):
    """Base class for dataset file errors."""


class MalformedHeaderError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class ChannelModelSpec:
    """Which fading family to draw from, with its parameters.

    kappa is the Rician factor in linear scale; rho_a / rho_u are antenna and
    user correlation coefficients; n_paths is the sparse-model path count.
    Only the fields relevant to `family` are read.
    """

    family: str
    kappa: float = 0.0
    rho_a: float = 0.0
    rho_u: float = 0.0
    n_paths: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown channel family {self.family!r}")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not (0.0 <= self.rho_a < 1.0) or not (0.0 <= self.rho_u < 1.0):
            raise ValueError("correlation coefficients must lie in [0, 1)")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")


@dataclass
class ChannelSample:
    """Unit-Frobenius-norm channel plus linear SNR."""

    h_norm: np.ndarray  # complex, K x N_T, ||.||_F == 1
    snr: float

    def validate(self, tol=1e-9):
        if abs(np.linalg.norm(self.h_norm) - 1.0) > tol:
            raise ValueError("h_norm is not unit Frobenius norm")
        if not self.snr > 0:
            raise ValueError("snr must be positive")


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    spec: ChannelModelSpec = None
    k: int = 0
    n_t: int = 0
    seed: int = 0
    snr_range_db: tuple = (0.0, 20.0)

    def __len__(self):
        return len(self.samples)

    def stacked(self):
        """(h_norm array [count, K, N_T] complex, snr array [count])."""
        h = np.stack([s.h_norm for s in self.samples])
        snr = np.array([s.snr for s in self.samples])
        return h, snr


def array_response(phi: float, n_t: int) -> np.ndarray:
    """Uniform linear array steering vector, half-wavelength spacing."""
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    m = np.arange(n_t)
    return np.exp(1j * np.pi * m * np.sin(phi))


def _crandn(rng, shape):
    """Circularly-symmetric complex Gaussian, unit variance per entry."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below 1e-12 are clamped to zero; negative ones beyond noise
    mean the matrix is not PSD and are rejected.
    """
    w, v = np.linalg.eigh(mat)
    if np.any(w < -1e-9):
        raise ValueError("correlation matrix is not positive semi-definite")
    w = np.where(w < 1e-12, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def sample_rayleigh(rng, k, n_t):
    return _crandn(rng, (k, n_t))


def sample_rician(rng, k, n_t, kappa, phi=None):
    """Rician rows: sqrt(k/(k+1)) * LOS steering + sqrt(1/(k+1)) * scatter.

    `phi` pins the departure angles (length-k array) for moment tests;
    by default each user's angle is uniform on [0, 2pi).
    """
    if phi is None:
        phi = rng.uniform(0.0, 2.0 * np.pi, k)
    los = np.stack([array_response(p, n_t) for p in np.atleast_1d(phi)])
    scatter = _crandn(rng, (k, n_t))
    return np.sqrt(kappa / (kappa + 1.0)) * los + np.sqrt(1.0 / (kappa + 1.0)) * scatter


def user_correlation(k, rho_u):
    return np.where(np.eye(k, dtype=bool), 1.0, rho_u)


def antenna_correlation(n_t, rho_a):
    idx = np.arange(n_t)
    return rho_a ** np.abs(idx[:, None] - idx[None, :])


def sample_correlated(rng, k, n_t, rho_a, rho_u):
    r_u_half = _sqrt_psd(user_correlation(k, rho_u))
    r_a_half = _sqrt_psd(antenna_correlation(n_t, rho_a))
    z = _crandn(rng, (k, n_t))
    return r_u_half @ z @ r_a_half


def sample_sparse(rng, k, n_t, n_paths):
    gains = _crandn(rng, (k, n_paths))
    phis = rng.uniform(0.0, 2.0 * np.pi, (k, n_paths))
    steer = np.exp(1j * np.pi * np.sin(phis)[..., None] * np.arange(n_t))
    return np.sqrt(n_t / n_paths) * np.einsum("kl,kln->kn", gains, steer)


def sample(spec: ChannelModelSpec, k: int, n_t: int, rng) -> np.ndarray:
    """One unnormalized K x N_T channel matrix from the given family."""
    if k < 1 or n_t < 1:
        raise ValueError("dimensions must be positive")
    if spec.family == "rayleigh":
        return sample_rayleigh(rng, k, n_t)
    if spec.family == "rician":
        return sample_rician(rng, k, n_t, spec.kappa)
    if spec.family == "correlated":
        return sample_correlated(rng, k, n_t, spec.rho_a, spec.rho_u)
    if spec.family == "sparse":
        return sample_sparse(rng, k, n_t, spec.n_paths)
    raise ValueError(f"unknown family {spec.family!r}")


def normalize_and_attach_snr(h: np.ndarray, p_tot_over_sigma2_db: float) -> ChannelSample:
    """Split a raw channel into (unit-norm direction, SNR scalar)."""
    fro = np.linalg.norm(h)
    if fro == 0.0:
        raise ValueError("cannot normalize a zero channel matrix")
    snr = float(fro**2 * 10.0 ** (p_tot_over_sigma2_db / 10.0))
    return ChannelSample(h_norm=h / fro, snr=snr)


def _sample_rng(seed: int, index: int):
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate_dataset(spec: ChannelModelSpec, k: int, n_t: int, count: int,
                     snr_range_db=(0.0, 20.0), seed: int = 0) -> Dataset:
    """Draw `count` samples; sample i depends only on (seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = float(snr_range_db[0]), float(snr_range_db[1])
    samples = []
    for i in range(count):
        rng = _sample_rng(seed, i)
        ratio_db = rng.uniform(lo, hi) if hi > lo else lo
        h = sample(spec, k, n_t, rng)
        samples.append(normalize_and_attach_snr(h, ratio_db))
    return Dataset(samples=samples, spec=spec, k=k, n_t=n_t, seed=seed,
                   snr_range_db=(lo, hi))


# ---------------------------------------------------------------------------
# Persistence: magic, length-prefixed JSON header, float64 payload, CRC-64
# ---------------------------------------------------------------------------

_CRC64_POLY = 0xC96C5795D7870F42  # reflected ECMA-182 (CRC-64/XZ)


def _crc64_tables():
    t0 = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        t0.append(crc)
    tables = [t0]
    for t in range(1, 8):
        prev = tables[-1]
        tables.append([t0[prev[i] & 0xFF] ^ (prev[i] >> 8) for i in range(256)])
    return tables


_CRC64_TABLES = _crc64_tables()


def crc64(data: bytes) -> int:
    """CRC-64/XZ, slice-by-8."""
    crc = 0xFFFFFFFFFFFFFFFF
    t0, t1, t2, t3, t4, t5, t6, t7 = _CRC64_TABLES
    view = memoryview(data)
    n = len(view)
    end8 = n - (n % 8)
    for i in range(0, end8, 8):
        crc ^= int.from_bytes(view[i:i + 8], "little")
        crc = (t7[crc & 0xFF] ^ t6[(crc >> 8) & 0xFF]
               ^ t5[(crc >> 16) & 0xFF] ^ t4[(crc >> 24) & 0xFF]
               ^ t3[(crc >> 32) & 0xFF] ^ t2[(crc >> 40) & 0xFF]
               ^ t1[(crc >> 48) & 0xFF] ^ t0[(crc >> 56) & 0xFF])
    for i in range(end8, n):
        crc = t0[(crc ^ view[i]) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def _payload_bytes(dataset: Dataset) -> bytes:
    k, n_t = dataset.k, dataset.n_t
    out = np.empty((len(dataset), 2 * k * n_t + 1), dtype="<f8")
    for i, s in enumerate(dataset.samples):
        inter = np.empty(2 * k * n_t)
        inter[0::2] = s.h_norm.real.ravel()
        inter[1::2] = s.h_norm.imag.ravel()
        out[i, :-1] = inter
        out[i, -1] = s.snr
    return out.tobytes()


def save_dataset(dataset: Dataset, path) -> None:
    spec = dataset.spec
    header = {
        "family": spec.family,
        "kappa": spec.kappa,
        "rho_a": spec.rho_a,
        "rho_u": spec.rho_u,
        "n_paths": spec.n_paths,
        "k": dataset.k,
        "n_t": dataset.n_t,
        "count": len(dataset),
        "snr_range_db": list(dataset.snr_range_db),
        "seed": dataset.seed,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _payload_bytes(dataset)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<Q", crc64(payload)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise MalformedHeaderError(f"bad magic in {path}")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    hstart = len(MAGIC) + 4
    if len(blob) < hstart + hlen:
        raise MalformedHeaderError("header extends past end of file")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
        spec = ChannelModelSpec(family=header["family"], kappa=header["kappa"],
                                rho_a=header["rho_a"], rho_u=header["rho_u"],
                                n_paths=header["n_paths"])
        k, n_t, count = header["k"], header["n_t"], header["count"]
        snr_range = tuple(header["snr_range_db"])
        seed = header["seed"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedHeaderError(f"unparseable header: {exc}") from None

    row = 2 * k * n_t + 1
    payload_len = count * row * 8
    pstart = hstart + hlen
    if len(blob) < pstart + payload_len + 8:
        raise TruncatedPayloadError(
            f"payload needs {payload_len + 8} bytes, file has {len(blob) - pstart}")
    payload = blob[pstart:pstart + payload_len]
    (stored_crc,) = struct.unpack_from("<Q", blob, pstart + payload_len)
    if crc64(payload) != stored_crc:
        raise ChecksumError("payload CRC-64 mismatch")

    flat = np.frombuffer(payload, dtype="<f8").reshape(count, row)
    samples = []
    for i in range(count):
        inter = flat[i, :-1]
        h = (inter[0::2] + 1j * inter[1::2]).reshape(k, n_t)
        samples.append(ChannelSample(h_norm=h, snr=float(flat[i, -1])))
    return Dataset(samples=samples, spec=spec, k=k, n_t=n_t, seed=seed,
                   snr_range_db=snr_range)
