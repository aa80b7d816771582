"""Sparse coding data ``x = M z + xi`` and the RandomMask augmentation."""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DictionaryConstructionError, DimensionError
from .linalg import as_mat, qr_orthonormalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dictionary:
    """Column-orthonormal dictionary ``M`` (d1 x d).

    The orthogonal complement is never stored; anything that needs the dense
    part of a vector ``v`` uses ``v - M M^T v`` or ``|v|^2 - |M^T v|^2``.
    """

    M: np.ndarray
    retries: int = 0

    def __post_init__(self):
        m = as_mat(self.M, name="M")
        if m.shape[0] < m.shape[1]:
            raise DimensionError(f"dictionary needs d1 >= d, got {m.shape}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "M", m)

    @property
    def d(self):
        return self.M.shape[1]

    @property
    def d1(self):
        return self.M.shape[0]

    @property
    def infinity_bound(self):
        return float(np.abs(self.M).max())

    def orthonormality_residual(self):
        return float(np.abs(self.M.T @ self.M - np.eye(self.d)).max())

    def sparse_coords(self, v):
        """``M^T v`` for a vector or a batch of row vectors."""
        return np.asarray(v) @ self.M

    def dense_part(self, v):
        v = np.asarray(v, dtype=np.float64)
        return v - (v @ self.M) @ self.M.T


def infinity_norm_limit(d1, c_inf):
    # max(ln d1, 1) keeps the tiny-d1 case (d1 = 1 needs |M| = 1) feasible
    return c_inf * math.sqrt(max(math.log(d1), 1.0) / d1)


def build_dictionary(d, d1, c_inf, rng, max_retries=100):
    """QR of a Gaussian matrix, redrawn until ``max |M_j|_inf`` is small enough."""
    if not 1 <= d <= d1:
        raise DimensionError(f"need 1 <= d <= d1, got d={d}, d1={d1}")
    limit = infinity_norm_limit(d1, c_inf)
    for attempt in range(max_retries):
        q = qr_orthonormalize(rng.normal((d1, d)))
        if np.abs(q).max() <= limit:
            if attempt:
                log.info("dictionary accepted after %d rejections", attempt)
            return Dictionary(q, retries=attempt)
    raise DictionaryConstructionError(
        f"no dictionary with max|M|_inf <= {limit:.4g} after {max_retries} draws; c_inf={c_inf} is too tight for d1={d1}"
    )


@dataclass(frozen=True)
class LatentConfig:
    """``Pr(|z_j| = 1) = p_active``, split evenly between +1 and -1."""

    p_active: float
    c_z: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.p_active <= 1.0:
            raise ValueError(f"p_active must lie in [0, 1], got {self.p_active}")

    @classmethod
    def default(cls, d, c_z=2.0):
        return cls(p_active=c_z * math.log(math.log(d)) / d, c_z=c_z)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_xi_sq: float

    def __post_init__(self):
        if not self.sigma_xi_sq > 0:
            raise ValueError(f"sigma_xi_sq must be positive, got {self.sigma_xi_sq}")

    @classmethod
    def default(cls, d):
        return cls(sigma_xi_sq=math.sqrt(math.log(d)) / d)

    @property
    def sigma(self):
        return math.sqrt(self.sigma_xi_sq)


@dataclass
class Sample:
    """One sample (1-D arrays) or a batch of samples (2-D, one per row)."""

    z: np.ndarray
    xi: np.ndarray
    x: np.ndarray

    def __len__(self):
        return 1 if self.x.ndim == 1 else self.x.shape[0]

    def __iter__(self):
        if self.x.ndim == 1:
            yield self
            return
        for k in range(self.x.shape[0]):
            yield Sample(self.z[k], self.xi[k], self.x[k])

    def __getitem__(self, k):
        return Sample(self.z[k], self.xi[k], self.x[k])

    def to_records(self):
        rows = [self] if self.x.ndim == 1 else list(self)
        return [
            {"z": [int(v) for v in s.z], "xi": s.xi.tolist(), "x": s.x.tolist()} for s in rows
        ]


@dataclass
class AugmentedPair:
    """The two RandomMask views ``x+ = 2Dx`` and ``x++ = 2(I - D)x``.

    ``mask`` is the diagonal of ``D``; it is ``None`` for the degenerate
    no-augmentation pair ``(x, x)``.
    """

    x_plus: np.ndarray
    x_plusplus: np.ndarray
    mask: np.ndarray = field(default=None)


def sample_latent(cfg, d, rng, n=None):
    """Ternary latent(s): +1 w.p. p/2, -1 w.p. p/2, 0 otherwise."""
    shape = (d,) if n is None else (n, d)
    u = rng.uniform(shape)
    half = 0.5 * cfg.p_active
    return np.where(u < half, 1.0, np.where(u < cfg.p_active, -1.0, 0.0))


def sample_inputs(dictionary, lat_cfg, noise_cfg, n, rng):
    """A batch of ``n`` samples. Latents are drawn before noise."""
    if n < 1:
        raise DimensionError("need at least one sample")
    z = sample_latent(lat_cfg, dictionary.d, rng, n)
    xi = noise_cfg.sigma * rng.normal((n, dictionary.d1))
    return Sample(z, xi, z @ dictionary.M.T + xi)


def sample_input(dictionary, lat_cfg, noise_cfg, rng, z=None):
    """One draw from the sparse coding distribution.

    Passing ``z`` forces the latent (used by tests); noise is still drawn.
    """
    if z is None:
        z = sample_latent(lat_cfg, dictionary.d, rng)
    else:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (dictionary.d,):
            raise DimensionError(f"forced z must have shape ({dictionary.d},)")
    xi = noise_cfg.sigma * rng.normal((dictionary.d1,))
    return Sample(z, xi, dictionary.M @ z + xi)


def sample_negatives(dictionary, lat_cfg, noise_cfg, count, rng):
    """``count`` unaugmented samples, returned as one batched :class:`Sample`."""
    if count < 1:
        raise DimensionError("need at least one negative")
    return sample_inputs(dictionary, lat_cfg, noise_cfg, count, rng)


def random_mask(x, rng, mask=None):
    """Apply RandomMask to ``x`` (1-D or a batch of rows).

    ``mask`` forces the diagonal of ``D`` (tests only); otherwise each
    coordinate is kept in ``x+`` with probability 1/2.
    """
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        mask = rng.bernoulli_half(x.shape)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match x {x.shape}")
    return AugmentedPair(
        x_plus=np.where(mask, 2.0 * x, 0.0),
        x_plusplus=np.where(mask, 0.0, 2.0 * x),
        mask=mask,
    )


# ---------------------------------------------------------------------------
# dumps
# ---------------------------------------------------------------------------


def write_dictionary_csv(path, dictionary):
    """Row-major CSV with a two-line header ``d,<d>`` / ``d1,<d1>``."""
    with open(path, "w") as fh:
        fh.write(f"d,{dictionary.d}\n")
        fh.write(f"d1,{dictionary.d1}\n")
        for row in dictionary.M:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_dictionary_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise ValueError(f"{path}: missing dictionary header")
    try:
        key_d, d = lines[0].split(",")
        key_d1, d1 = lines[1].split(",")
        d, d1 = int(d), int(d1)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed dictionary header") from exc
    if key_d != "d" or key_d1 != "d1":
        raise ValueError(f"{path}: header must be 'd,<int>' then 'd1,<int>'")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[2:]]
    m = np.array(rows, dtype=np.float64)
    if m.shape != (d1, d):
        raise DimensionError(f"{path}: header says ({d1}, {d}) but body is {m.shape}")
    return Dictionary(m)


def write_dataset_jsonl(path, samples):
    with open(path, "w") as fh:
        for rec in samples.to_records():
            fh.write(json.dumps(rec))
            fh.write("\n")


def read_dataset_jsonl(path):
    z, xi, x = [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            z.append(rec["z"])
            xi.append(rec["xi"])
            x.append(rec["x"])
    return Sample(np.array(z, dtype=np.float64), np.array(xi), np.array(x))
