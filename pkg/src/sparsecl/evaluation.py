"""Diagnostics and downstream linear probes for a trained encoder."""

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import expit

from .data import sample_inputs
from .errors import DecompositionError, DimensionError, ProbeError
from .linalg import solve_spd
from .network import forward

SINGLETON_THRESHOLD = 0.5
DENSE_THRESHOLD = 0.25
COVERAGE_THRESHOLD = 0.8


@dataclass
class AlignmentStats:
    """Per-neuron and per-atom view of ``C = W M`` (m x d)."""

    sparse_energy: np.ndarray
    dense_energy: np.ndarray
    top_atom: np.ndarray
    top_value: np.ndarray
    second_value: np.ndarray
    singleton_score: np.ndarray
    winner_count: np.ndarray
    max_coord: np.ndarray
    singleton_threshold: float = SINGLETON_THRESHOLD

    @property
    def total_energy(self):
        return self.sparse_energy + self.dense_energy

    @property
    def sparse_fraction(self):
        tot = self.total_energy
        return np.divide(self.sparse_energy, tot, out=np.zeros_like(tot), where=tot > 0)

    @property
    def pooled_sparse_fraction(self):
        """``sum_i |M^T w_i|^2 / sum_i |w_i|^2``."""
        tot = self.total_energy.sum()
        return float(self.sparse_energy.sum() / tot) if tot > 0 else 0.0

    @property
    def coverage(self):
        return float(np.mean(self.winner_count >= 1))

    def structured_fraction(self, dense_threshold=DENSE_THRESHOLD):
        """Share of neurons with norm >= median that are clean singletons.

        Clean means ``singleton_score >= threshold`` and a dense fraction of
        at most ``dense_threshold``.
        """
        norms = np.sqrt(self.total_energy)
        big = norms >= np.median(norms)
        good = (self.singleton_score >= self.singleton_threshold) & (
            1.0 - self.sparse_fraction <= dense_threshold
        )
        return float(good[big].mean())


def alignment_stats(params, dictionary, singleton_threshold=SINGLETON_THRESHOLD):
    if params.d1 != dictionary.d1:
        raise DimensionError(f"network d1={params.d1} but dictionary d1={dictionary.d1}")
    coords = params.W @ dictionary.M
    sparse = np.einsum("ij,ij->i", coords, coords)
    total = np.einsum("ij,ij->i", params.W, params.W)
    # clip rounding so the decomposition stays non-negative
    dense = np.maximum(total - sparse, 0.0)
    mag = np.abs(coords)
    top_atom = np.argmax(mag, axis=1)
    if mag.shape[1] > 1:
        part = -np.partition(-mag, 1, axis=1)
        top_value, second_value = part[:, 0], part[:, 1]
    else:
        top_value, second_value = mag[:, 0], np.zeros(mag.shape[0])
    single = np.divide(top_value**2, sparse, out=np.zeros_like(sparse), where=sparse > 0)
    single = np.clip(single, 0.0, 1.0)
    winners = np.bincount(top_atom[single >= singleton_threshold], minlength=dictionary.d)
    return AlignmentStats(
        sparse_energy=sparse,
        dense_energy=dense,
        top_atom=top_atom,
        top_value=top_value,
        second_value=second_value,
        singleton_score=single,
        winner_count=winners,
        max_coord=mag.max(axis=0),
        singleton_threshold=singleton_threshold,
    )


@dataclass
class LuckySets:
    """Init-time neuron sets per atom; ``star[j]`` is a subset of ``loose[j]``."""

    loose: list
    star: list
    c0: float
    gamma: float
    c1: float
    c2: float

    def star_sizes(self):
        return np.array([len(s) for s in self.star])

    def loose_sizes(self):
        return np.array([len(s) for s in self.loose])


def lucky_sets(W0, dictionary, c0=0.01, gamma=0.005):
    """Atoms each init neuron is unusually aligned with.

    ``loose[j]``: ``<w_i, M_j>^2 >= c2 ln d / d * |M^T w_i|^2``.
    ``star[j]``: the same with ``c1`` for atom ``j`` and at most the ``c2``
    level on every other atom.
    """
    W0 = np.asarray(W0, dtype=np.float64)
    d = dictionary.d
    c1 = 2.0 + 2.0 * (1.0 - gamma) * c0
    c2 = c1 - gamma * c0
    sq = (W0 @ dictionary.M) ** 2
    scale = sq.sum(axis=1, keepdims=True) * math.log(d) / d
    above2 = sq >= c2 * scale
    above1 = sq >= c1 * scale
    # star needs every other atom at or below the c2 level
    strict2 = sq > c2 * scale
    n_strict = strict2.sum(axis=1)
    loose, star = [], []
    for j in range(d):
        loose.append(np.flatnonzero(above2[:, j]).tolist())
        others_ok = (n_strict - strict2[:, j]) == 0
        star.append(np.flatnonzero(above1[:, j] & others_ok).tolist())
    return LuckySets(loose, star, c0, gamma, c1, c2)


@dataclass
class CosineResult:
    mean: float
    n_zero: int
    n_samples: int


def rep_noise_cosine(params, dictionary, lat_cfg, noise_cfg, n_samples, rng):
    """Mean of ``cos(f(x), f(xi))`` for ``x = M z + xi`` with the same ``xi``.

    Pairs where either representation is exactly zero contribute 0 and are
    counted in ``n_zero``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    s = sample_inputs(dictionary, lat_cfg, noise_cfg, n_samples, rng)
    fx = forward(params, s.x).rep
    fxi = forward(params, s.xi).rep
    nx = np.linalg.norm(fx, axis=1)
    nxi = np.linalg.norm(fxi, axis=1)
    ok = (nx > 0) & (nxi > 0)
    cos = np.zeros(n_samples)
    cos[ok] = np.einsum("ij,ij->i", fx[ok], fxi[ok]) / (nx[ok] * nxi[ok])
    return CosineResult(float(cos.mean()), int((~ok).sum()), n_samples)


def activation_sparsity(params, dictionary, lat_cfg, noise_cfg, n_samples, rng, per_sample=False):
    """Mean fraction of neurons with ``|<w_i, x>| >= b_i``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    s = sample_inputs(dictionary, lat_cfg, noise_cfg, n_samples, rng)
    frac = forward(params, s.x).active.mean(axis=1)
    return frac if per_sample else float(frac.mean())


def wstar_sample(d, rng):
    """Ground-truth task direction with i.i.d. uniform +-1 coordinates."""
    if d < 1:
        raise DimensionError("d must be >= 1")
    return rng.signs((d,))


@dataclass
class ProbeResult:
    task: str
    n_train: int
    n_test: int
    score: float
    label_energy: float
    wstar: np.ndarray = field(repr=False)
    ridge_mu: float = None
    logistic_steps: int = None
    converged: bool = True

    @property
    def normalized_mse(self):
        if self.task != "regression":
            raise AttributeError("normalized_mse only applies to regression probes")
        return self.score / self.label_energy

    def to_dict(self):
        out = asdict(self)
        out["wstar"] = [float(v) for v in self.wstar]
        if self.task == "regression":
            out["normalized_mse"] = self.normalized_mse
        return out


def probe_regression(params, dictionary, lat_cfg, noise_cfg, wstar, n_train, n_test, ridge_mu, rng, encoder=None):
    """Ridge regression of ``y = <w*, z>`` on frozen features.

    An intercept is fitted by centering with the training means. ``encoder``
    replaces the network (e.g. an oracle that returns ``z``); it receives the
    sample batch and returns features.
    """
    if not ridge_mu > 0:
        raise ValueError("ridge_mu must be positive")
    s = sample_inputs(dictionary, lat_cfg, noise_cfg, n_train + n_test, rng)
    feats = encoder(s) if encoder is not None else forward(params, s.x).rep
    y = s.z @ wstar
    ftr, fte = feats[:n_train], feats[n_train:]
    ytr, yte = y[:n_train], y[n_train:]
    mu_f, mu_y = ftr.mean(axis=0), ytr.mean()
    a = ftr - mu_f
    gram = a.T @ a + ridge_mu * np.eye(a.shape[1])
    try:
        coef = solve_spd(gram, a.T @ (ytr - mu_y))
    except DecompositionError as exc:
        raise ProbeError(f"normal equations are ill-conditioned; increase ridge_mu (now {ridge_mu})") from exc
    pred = (fte - mu_f) @ coef + mu_y
    mse = float(np.mean((pred - yte) ** 2))
    return ProbeResult(
        task="regression",
        n_train=n_train,
        n_test=n_test,
        score=mse,
        label_energy=float(np.mean(yte**2)),
        wstar=np.asarray(wstar, dtype=np.float64),
        ridge_mu=ridge_mu,
    )


def _labelled_samples(dictionary, lat_cfg, noise_cfg, wstar, n, rng):
    # ties <w*, z> = 0 have no sign; redraw until n labelled samples exist
    parts, have = [], 0
    while have < n:
        s = sample_inputs(dictionary, lat_cfg, noise_cfg, n, rng)
        keep = (s.z @ wstar) != 0
        parts.append(s[keep])
        have += int(keep.sum())
    z = np.concatenate([p.z for p in parts])[:n]
    xi = np.concatenate([p.xi for p in parts])[:n]
    x = np.concatenate([p.x for p in parts])[:n]
    return type(parts[0])(z, xi, x)


def probe_classification(
    params,
    dictionary,
    lat_cfg,
    noise_cfg,
    wstar,
    n_train,
    n_test,
    logistic_steps,
    logistic_lr,
    rng,
    l2=1e-4,
    tol=1e-6,
    encoder=None,
):
    """Logistic regression for ``y = sign(<w*, z>)`` by full-batch GD.

    Features are standardized with training statistics. A small ``l2``
    keeps the optimum finite on separable data. ``converged`` is False when
    the gradient norm is still above ``tol`` after ``logistic_steps``.
    """
    s = _labelled_samples(dictionary, lat_cfg, noise_cfg, wstar, n_train + n_test, rng)
    feats = encoder(s) if encoder is not None else forward(params, s.x).rep
    y = np.sign(s.z @ wstar)
    ftr, fte = feats[:n_train], feats[n_train:]
    mu = ftr.mean(axis=0)
    sd = ftr.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xtr = np.column_stack([(ftr - mu) / sd, np.ones(n_train)])
    xte = np.column_stack([(fte - mu) / sd, np.ones(n_test)])
    t = (y[:n_train] > 0).astype(np.float64)
    coef = np.zeros(xtr.shape[1])
    reg = np.full(xtr.shape[1], l2)
    reg[-1] = 0.0
    converged = False
    for _ in range(logistic_steps):
        g = xtr.T @ (expit(xtr @ coef) - t) / n_train + reg * coef
        if np.linalg.norm(g) <= tol:
            converged = True
            break
        coef -= logistic_lr * g
    pred = np.where(xte @ coef > 0, 1.0, -1.0)
    acc = float(np.mean(pred == y[n_train:]))
    return ProbeResult(
        task="classification",
        n_train=n_train,
        n_test=n_test,
        score=acc,
        label_energy=1.0,
        wstar=np.asarray(wstar, dtype=np.float64),
        logistic_steps=logistic_steps,
        converged=converged,
    )


def oracle_encoder(sample):
    """Features equal to the latent ``z`` (an upper bound for any encoder)."""
    return sample.z


# ---------------------------------------------------------------------------
# per-step record
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    stage: str
    loss: float
    sparse_fraction: float
    sparse_fraction_mean: float
    sparse_fraction_min: float
    sparse_fraction_max: float
    coverage: float
    singleton_mean: float
    structured_fraction: float
    rep_noise_cosine: float
    zero_rep_count: int
    activation_sparsity: float
    weight_norm: float
    bias_mean: float
    singleton_threshold: float = SINGLETON_THRESHOLD
    coverage_threshold: float = COVERAGE_THRESHOLD
    probe_mse: float = None
    probe_mse_normalized: float = None
    probe_accuracy: float = None
    probe_converged: bool = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, rec):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in rec.items() if k in names})


def write_pca_csv(path, reps, labels=None):
    """First two principal components of ``reps``.

    Columns: ``sample_id, label, pc1, pc2`` (label empty when not given).
    """
    reps = np.asarray(reps, dtype=np.float64)
    centered = reps - reps.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(2, vt.shape[0])
    pcs = np.zeros((reps.shape[0], 2))
    pcs[:, :k] = centered @ vt[:k].T
    with open(path, "w") as fh:
        fh.write("sample_id,label,pc1,pc2\n")
        for i, (p1, p2) in enumerate(pcs):
            lab = "" if labels is None else f"{int(labels[i])}"
            fh.write(f"{i},{lab},{float(p1)!r},{float(p2)!r}\n")
