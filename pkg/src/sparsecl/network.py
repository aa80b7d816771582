"""One-hidden-layer encoder with symmetrized-ReLU (soft-threshold) neurons."""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DimensionError
from .linalg import as_mat, as_vec

CKPT_MAGIC = b"SPCLCKPT"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")  # magic, version, m, d1


@dataclass(frozen=True)
class InitConfig:
    sigma0_sq: float

    def __post_init__(self):
        if self.sigma0_sq < 0:
            raise ValueError("sigma0_sq must be non-negative")

    @classmethod
    def default(cls, d, d1):
        return cls(sigma0_sq=1.0 / (d1 * d * d))


class NetworkParams:
    """Weights ``W`` (m x d1), biases ``b`` (m) and the frozen init ``W0``."""

    def __init__(self, W, b, W0=None):
        W = as_mat(W, name="W").copy()
        m, d1 = W.shape
        if m < 1 or d1 < 1:
            raise DimensionError("network needs m >= 1 and d1 >= 1")
        b = as_vec(b, m, name="b").copy()
        if np.any(b < 0):
            raise ValueError("biases must be non-negative")
        W0 = W.copy() if W0 is None else as_mat(W0, (m, d1), name="W0").copy()
        W0.setflags(write=False)
        self.W = W
        self.b = b
        self._W0 = W0

    @property
    def W0(self):
        return self._W0

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def d1(self):
        return self.W.shape[1]

    def copy(self):
        return NetworkParams(self.W, self.b, self._W0)

    def row_norms(self):
        return np.linalg.norm(self.W, axis=1)

    def init_row_norms(self):
        return np.linalg.norm(self._W0, axis=1)

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return (
            np.array_equal(self.W, other.W)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self._W0, other._W0)
        )

    def __repr__(self):
        return f"NetworkParams(m={self.m}, d1={self.d1})"


@dataclass
class ForwardResult:
    rep: np.ndarray
    pre: np.ndarray
    active: np.ndarray


def init_params(m, d1, cfg, rng):
    """Gaussian rows ``N(0, sigma0_sq I)`` and zero biases."""
    if m < 1:
        raise DimensionError("need at least one neuron")
    W = math.sqrt(cfg.sigma0_sq) * rng.normal((m, d1))
    return NetworkParams(W, np.zeros(m))


def forward(params, x):
    """Representation of one input (1-D) or a batch of inputs (rows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d1 or x.ndim not in (1, 2):
        raise DimensionError(f"input must have trailing dim {params.d1}, got shape {x.shape}")
    pre = x @ params.W.T
    rep, active = _kernels.soft_threshold(pre, params.b)
    return ForwardResult(rep=rep, pre=pre, active=active)


def weight_jacobian_row(params, x, i):
    """``d h_i / d w_i``: ``x`` when neuron ``i`` is active on ``x``, else 0.

    The kink ``|u| = b`` counts as active (subgradient 1).
    """
    x = as_vec(x, params.d1, name="x")
    if not 0 <= i < params.m:
        raise IndexError(f"neuron index {i} out of range for m={params.m}")
    u = float(params.W[i] @ x)
    return x.copy() if abs(u) >= params.b[i] else np.zeros_like(x)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params):
    """Write ``params``: header then little-endian float64 ``W``, ``b``, ``W0``."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.m, params.d1))
        for arr in (params.W, params.b, params.W0):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, m, d1 = _HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    n = m * d1
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * n + m:
        raise ValueError(f"{path}: expected {2 * n + m} floats, found {body.size}")
    W = body[:n].reshape(m, d1)
    b = body[n : n + m]
    W0 = body[n + m :].reshape(m, d1)
    return NetworkParams(W.astype(np.float64), b.astype(np.float64), W0.astype(np.float64))
