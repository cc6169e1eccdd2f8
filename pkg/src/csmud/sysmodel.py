"""Synthetic system model for grant-free multiuser detection.

Each of ``K`` users owns a BPSK pilot of length ``Ns``; its ``L``-tap channel
is convolved with the pilot, giving a Toeplitz block of the dictionary.
Active users superimpose at the receiver:

    y = S @ x + noise,   x = blockwise (a_k * h_k)

so ``x`` is block sparse with one block per active user.

Seeding: pilots come from ``SeedSequence(seed, spawn_key=(0,))`` and sample
``i`` of split ``s`` from ``SeedSequence(seed, spawn_key=(1, s, i))``, with
split codes train=0, val=1, test=2. Every sample is therefore independent
of how generation is chunked or parallelised.
"""

from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SPLITS = ("train", "val", "test")
DATASET_MAGIC = b"CSMUDDS\x00"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised for a dataset file with a bad header, version or payload."""


@dataclass(frozen=True)
class SystemConfig:
    K: int
    Ns: int
    L: int
    n: int
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1 or self.Ns < 1 or self.L < 1:
            raise ValueError(f"K, Ns, L must be >= 1, got {self.K}, {self.Ns}, {self.L}")
        if not 0 <= self.n <= self.K:
            raise ValueError(f"need 0 <= n <= K, got n={self.n}, K={self.K}")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")

    @property
    def M(self) -> int:
        """Measurement length Ns + L - 1."""
        return self.Ns + self.L - 1

    @property
    def signal_length(self) -> int:
        return self.K * self.L

    @property
    def underdetermined(self) -> bool:
        return self.K > self.M / self.L

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        unknown = set(d) - {"K", "Ns", "L", "n", "snr_db", "seed"}
        if unknown:
            raise ValueError(f"unknown SystemConfig fields: {sorted(unknown)}")
        return cls(
            K=int(d["K"]),
            Ns=int(d["Ns"]),
            L=int(d["L"]),
            n=int(d["n"]),
            snr_db=float(d.get("snr_db", 10.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class PilotSet:
    symbols: np.ndarray  # (K, Ns), entries +1/-1

    def __post_init__(self):
        s = self.symbols
        if s.ndim != 2 or not np.all(np.abs(s) == 1) or not np.all(np.imag(s) == 0):
            raise ValueError("pilot symbols must be a 2-D array of +1/-1")
        if len({row.tobytes() for row in np.ascontiguousarray(s.real)}) != s.shape[0]:
            raise ValueError("pilot rows must be pairwise distinct")

    @property
    def K(self) -> int:
        return self.symbols.shape[0]

    @property
    def Ns(self) -> int:
        return self.symbols.shape[1]


@dataclass(eq=False)
class Dictionary:
    """Stacked pilot-convolution matrix ``[S_1, ..., S_K]``."""

    matrix: np.ndarray
    block_size: int
    user_count: int

    def __post_init__(self):
        if self.matrix.shape[1] != self.block_size * self.user_count:
            raise ValueError("matrix width must equal block_size * user_count")

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    def block(self, k: int) -> np.ndarray:
        L = self.block_size
        return self.matrix[:, k * L:(k + 1) * L]

    def columns(self, users: Sequence[int]) -> np.ndarray:
        return self.matrix[:, block_columns(users, self.block_size)]

    @cached_property
    def adjoint(self) -> np.ndarray:
        return np.ascontiguousarray(self.matrix.conj().T)

    @cached_property
    def spectral_norm_sq(self) -> float:
        """Squared largest singular value by power iteration (50 its, rtol 1e-6)."""
        A = self.matrix
        v = np.ones(A.shape[1], dtype=np.complex128) / np.sqrt(A.shape[1])
        lam = 0.0
        for _ in range(50):
            w = self.adjoint @ (A @ v)
            new = float(np.linalg.norm(w))
            if new == 0.0:
                return 0.0
            v = w / new
            if abs(new - lam) <= 1e-6 * new:
                lam = new
                break
            lam = new
        return lam


@dataclass(frozen=True)
class GroundTruth:
    active_set: tuple
    h: np.ndarray
    x: np.ndarray


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    noise_var: float
    snr_db: float


@dataclass(frozen=True)
class SplitPolicy:
    """How many users are active per sample.

    ``n`` fixes the count; otherwise it is drawn uniformly from
    ``1..n_max`` (test split only).
    """

    split: str
    n: int | None = None
    n_max: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if (self.n is None) == (self.n_max is None):
            raise ValueError("give exactly one of n and n_max")
        if self.split in ("train", "val"):
            if self.n is None:
                raise ValueError("train/val splits need a fixed active count n")
            if self.n < 1:
                raise ValueError("train/val splits need n >= 1 (n=0 gives an empty label)")
        if self.n is not None and self.n < 0:
            raise ValueError("n must be >= 0")
        if self.n_max is not None and self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    @property
    def code(self) -> int:
        return SPLITS.index(self.split)

    def to_dict(self) -> dict:
        return {"split": self.split, "n": self.n, "n_max": self.n_max}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPolicy":
        return cls(split=d["split"], n=d.get("n"), n_max=d.get("n_max"))


@dataclass(eq=False)
class Dataset:
    config: SystemConfig
    policy: SplitPolicy
    y: np.ndarray  # (count, M) complex128
    x: np.ndarray  # (count, K*L) complex128
    active: list = field(default_factory=list)  # list of sorted tuples
    noise_var: float = 0.0

    @property
    def split(self) -> str:
        return self.policy.split

    def __len__(self) -> int:
        return self.y.shape[0]

    def __iter__(self) -> Iterator[tuple]:
        for i in range(len(self)):
            yield self.y[i], self.active[i], self.x[i]

    @property
    def samples(self) -> list:
        return list(self)

    def labels(self) -> np.ndarray:
        """(count, K) 0/1 activity matrix."""
        out = np.zeros((len(self), self.config.K))
        for i, a in enumerate(self.active):
            out[i, list(a)] = 1.0
        return out

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.config, self.policy, self.y[idx], self.x[idx],
                       [self.active[i] for i in idx], self.noise_var)

    def empirical_snr_db(self, dictionary: Dictionary) -> float:
        clean = self.x @ dictionary.matrix.T
        noise = self.y - clean
        return float(10 * np.log10(np.sum(np.abs(clean) ** 2) / np.sum(np.abs(noise) ** 2)))


def block_columns(users: Sequence[int], L: int) -> np.ndarray:
    users = np.asarray(list(users), dtype=np.int64)
    return (users[:, None] * L + np.arange(L)[None, :]).ravel()


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def generate_pilots(K: int, Ns: int, rng: np.random.Generator) -> PilotSet:
    """K distinct iid uniform BPSK rows; duplicates are redrawn."""
    if K > 2 ** min(Ns, 62):
        raise ValueError(f"cannot draw {K} distinct BPSK pilots of length {Ns}")
    rows = []
    seen = set()
    while len(rows) < K:
        row = rng.choice(np.array([1.0, -1.0]), size=Ns)
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            rows.append(row)
    return PilotSet(np.array(rows).reshape(K, Ns))


def build_conv_matrix(pilot, L: int) -> np.ndarray:
    """(Ns+L-1) x L Toeplitz matrix; column j is the pilot shifted down by j."""
    if L < 1:
        raise ValueError("L must be >= 1")
    pilot = np.asarray(pilot)
    Ns = pilot.shape[0]
    C = np.zeros((Ns + L - 1, L), dtype=np.complex128)
    for j in range(L):
        C[j:j + Ns, j] = pilot
    return C


def assemble_dictionary(pilots: PilotSet, L: int) -> Dictionary:
    blocks = [build_conv_matrix(p, L) for p in pilots.symbols]
    return Dictionary(np.ascontiguousarray(np.hstack(blocks)), L, pilots.K)


def make_dictionary(config: SystemConfig) -> Dictionary:
    """The dictionary implied by a config (pilots seeded from ``config.seed``)."""
    pilots = generate_pilots(config.K, config.Ns, _rng(config.seed, 0))
    return assemble_dictionary(pilots, config.L)


def sample_channel(K: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """iid CN(0, 1/L) taps, so each user's expected channel energy is 1."""
    z = rng.standard_normal((K * L, 2))
    return (z[:, 0] + 1j * z[:, 1]) * np.sqrt(0.5 / L)


def sample_activity(K: int, n: int, rng: np.random.Generator) -> tuple:
    if not 0 <= n <= K:
        raise ValueError(f"need 0 <= n <= K, got n={n}, K={K}")
    return tuple(sorted(int(k) for k in rng.choice(K, size=n, replace=False)))


def sample_ground_truth(K: int, L: int, n: int, rng: np.random.Generator) -> GroundTruth:
    active = sample_activity(K, n, rng)
    h = sample_channel(K, L, rng)
    x = np.zeros_like(h)
    cols = block_columns(active, L)
    x[cols] = h[cols]
    return GroundTruth(active, h, x)


def noise_variance_for(signal_power: float, snr_db: float) -> float:
    """Noise variance per complex entry giving ``snr_db`` at ``signal_power`` per entry."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    return float(signal_power / 10 ** (snr_db / 10))


def calibrate_noise_variance(dictionary: Dictionary, ensemble, snr_db: float, *,
                             analytic: bool = False, n_active: float | None = None,
                             tap_var: float | None = None) -> float:
    """Noise variance such that E||S x||^2 / (M sigma^2) = 10^(snr_db/10).

    By default the signal power is the ensemble mean of ``||S x||^2 / M``
    over the rows of ``ensemble``. With ``analytic=True`` it is computed
    from the expected active count and tap variance instead, assuming a
    uniformly random support.
    """
    M = dictionary.M
    if analytic:
        if n_active is None:
            raise ValueError("analytic calibration needs n_active")
        tv = 1.0 / dictionary.block_size if tap_var is None else tap_var
        fro = float(np.sum(np.abs(dictionary.matrix) ** 2))
        power = n_active / dictionary.user_count * tv * fro / M
        return noise_variance_for(power, snr_db)
    X = np.atleast_2d(np.asarray(ensemble))
    if X.size == 0:
        raise ValueError("empty ensemble")
    clean = X @ dictionary.matrix.T
    power = float(np.mean(np.sum(np.abs(clean) ** 2, axis=1))) / M
    return noise_variance_for(power, snr_db)


def complex_noise(size, noise_var: float, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((*np.atleast_1d(size), 2))
    return (z[..., 0] + 1j * z[..., 1]) * np.sqrt(noise_var / 2)


def synthesize_measurement(dictionary: Dictionary, x, noise_var: float,
                           rng: np.random.Generator, snr_db: float = np.nan) -> Measurement:
    x = np.asarray(x)
    if x.shape != (dictionary.matrix.shape[1],):
        raise ValueError(f"x has shape {x.shape}, dictionary needs ({dictionary.matrix.shape[1]},)")
    if noise_var < 0:
        raise ValueError("noise_var must be >= 0")
    y = dictionary.matrix @ x
    if noise_var > 0:
        y = y + complex_noise(dictionary.M, noise_var, rng)
    return Measurement(y, float(noise_var), float(snr_db))


def _draw_chunk(args):
    config, policy, seed, start, stop = args
    K, L, M = config.K, config.L, config.M
    m = stop - start
    X = np.zeros((m, K * L), dtype=np.complex128)
    W = np.empty((m, M), dtype=np.complex128)
    active = []
    for j, i in enumerate(range(start, stop)):
        rng = _rng(seed, 1, policy.code, i)
        n = policy.n if policy.n is not None else int(rng.integers(1, policy.n_max + 1))
        gt = sample_ground_truth(K, L, n, rng)
        X[j] = gt.x
        W[j] = complex_noise(M, 1.0, rng)
        active.append(gt.active_set)
    return X, W, active


def generate_dataset(config: SystemConfig, policy: SplitPolicy, count: int,
                     seed: int | None = None, *, workers: int = 1,
                     analytic_snr: bool = False, noiseless: bool = False,
                     dictionary: Dictionary | None = None) -> Dataset:
    """Draw ``count`` labelled samples; output is independent of ``workers``.

    The noise variance is calibrated on the drawn ensemble itself unless
    ``analytic_snr`` is set; ``noiseless`` returns ``y = S x`` exactly.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not isinstance(policy, SplitPolicy):
        raise ValueError("policy must be a SplitPolicy")
    if policy.n is not None and policy.n > config.K or (policy.n_max or 0) > config.K:
        raise ValueError("active count exceeds K")
    seed = config.seed if seed is None else seed
    D = make_dictionary(config) if dictionary is None else dictionary

    chunk = max(1, -(-count // max(1, workers * 4)))
    jobs = [(config, policy, seed, s, min(s + chunk, count)) for s in range(0, count, chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_draw_chunk, jobs))
    else:
        parts = [_draw_chunk(j) for j in jobs]
    X = np.concatenate([p[0] for p in parts])
    W = np.concatenate([p[1] for p in parts])
    active = [a for p in parts for a in p[2]]

    clean = X @ D.matrix.T
    if noiseless:
        return Dataset(config, policy, clean, X, active, 0.0)
    if analytic_snr:
        mean_n = policy.n if policy.n is not None else (policy.n_max + 1) / 2
        nv = calibrate_noise_variance(D, None, config.snr_db, analytic=True, n_active=mean_n)
    else:
        power = float(np.mean(np.sum(clean.real ** 2 + clean.imag ** 2, axis=1))) / D.M
        nv = noise_variance_for(power, config.snr_db)
    Y = clean + np.sqrt(nv) * W
    return Dataset(config, policy, Y, X, active, nv)


# --- binary container -------------------------------------------------------

def _varint(v: int) -> bytes:
    out = bytearray()
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _read_varint(buf, pos: int) -> tuple:
    shift = 0
    v = 0
    while True:
        if pos >= len(buf):
            raise DatasetFormatError("truncated payload (varint)")
        b = buf[pos]
        pos += 1
        v |= (b & 0x7F) << shift
        if not b & 0x80:
            return v, pos
        shift += 7


def _interleave(z: np.ndarray) -> bytes:
    return np.ascontiguousarray(z).astype("<c16").tobytes()


def save_dataset(dataset: Dataset, path) -> None:
    payload = bytearray()
    for y, a, x in dataset:
        payload += _interleave(y)
        payload += _interleave(x)
        payload += _varint(len(a))
        for k in a:
            payload += _varint(int(k))
    header = {
        "config": dataset.config.to_dict(),
        "policy": dataset.policy.to_dict(),
        "split": dataset.split,
        "count": len(dataset),
        "noise_var": dataset.noise_var,
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(bytes([DATASET_VERSION]))
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        f.write(payload)


def read_dataset_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(13)
        if len(head) < 13 or head[:8] != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
        if head[8] != DATASET_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {head[8]}")
        (hl,) = struct.unpack("<I", head[9:13])
        hb = f.read(hl)
    if len(hb) != hl:
        raise DatasetFormatError(f"{path}: truncated header")
    try:
        return json.loads(hb.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"{path}: corrupt header: {e}") from None


def load_dataset(path) -> Dataset:
    header = read_dataset_header(path)
    raw = Path(path).read_bytes()
    (hl,) = struct.unpack("<I", raw[9:13])
    payload = raw[13 + hl:]
    if len(payload) != header["payload_bytes"]:
        raise DatasetFormatError(
            f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise DatasetFormatError(f"{path}: payload checksum mismatch")
    config = SystemConfig.from_dict(header["config"])
    policy = SplitPolicy.from_dict(header["policy"])
    count = header["count"]
    M, KL = config.M, config.signal_length
    Y = np.empty((count, M), dtype=np.complex128)
    X = np.empty((count, KL), dtype=np.complex128)
    active = []
    pos = 0
    for i in range(count):
        end = pos + 16 * M
        Y[i] = np.frombuffer(payload, dtype="<c16", count=M, offset=pos)
        pos = end
        X[i] = np.frombuffer(payload, dtype="<c16", count=KL, offset=pos)
        pos += 16 * KL
        m, pos = _read_varint(payload, pos)
        a = []
        for _ in range(m):
            k, pos = _read_varint(payload, pos)
            a.append(k)
        active.append(tuple(a))
    if pos != len(payload):
        raise DatasetFormatError(f"{path}: trailing bytes in payload")
    return Dataset(config, policy, Y, X, active, float(header["noise_var"]))
