"""Stop-grad InfoNCE objective and its analytic gradient in ``W``.

Per positive pair ``(x+, x++)`` with negatives ``x_{n,1..S}`` the loss is

    L = -Sim(x+, x++) + tau * logsumexp([Sim(x+, x++), Sim(x+, x_{n,s})] / tau)

where ``Sim(a, b) = <f(a), f(b)>`` and ``f(b)`` is treated as a constant.
Only the ``x+`` branch carries gradient, giving for neuron ``i``

    g_i = [-(1 - l_p) h_i(x++) + sum_s l_s h_i(x_{n,s})] 1{|<w_i, x+>| >= b_i} x+
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import AugmentedPair, Sample
from .errors import DimensionError, NumericError
from .linalg import as_vec
from .network import forward

WITH_AUG = "with-aug"
NO_AUG = "no-aug"
MODES = (WITH_AUG, NO_AUG)


@dataclass
class Batch:
    """One positive pair plus its own negatives (a batched :class:`Sample`)."""

    pair: AugmentedPair
    negatives: Sample
    mode: str = WITH_AUG

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.negatives) < 1:
            raise DimensionError("a batch needs at least one negative")
        if self.mode == NO_AUG and not np.array_equal(self.pair.x_plus, self.pair.x_plusplus):
            raise ValueError("no-aug batches must use the pair (x, x)")

    @property
    def negative_inputs(self):
        return np.atleast_2d(self.negatives.x)

    @classmethod
    def no_aug(cls, x, negatives):
        x = np.asarray(x, dtype=np.float64)
        return cls(AugmentedPair(x, x.copy(), None), negatives, NO_AUG)


@dataclass
class LogitSet:
    sim_pos: float
    sim_neg: np.ndarray
    ell_p: float
    ell_s: np.ndarray
    tau: float

    @property
    def logits(self):
        return np.concatenate(([self.ell_p], self.ell_s))


def similarity(rep_a, rep_b):
    a = as_vec(rep_a, name="rep_a")
    b = as_vec(rep_b, len(a), name="rep_b")
    return float(a @ b)


def compute_logits(rep_plus, reps_candidates, tau):
    """Softmax of ``<f(x+), f(c)> / tau`` over the candidates.

    Row 0 of ``reps_candidates`` is the positive view, the rest are negatives.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    rep_plus = as_vec(rep_plus, name="rep_plus")
    cands = np.atleast_2d(np.asarray(reps_candidates, dtype=np.float64))
    if cands.shape[1] != rep_plus.shape[0]:
        raise DimensionError("candidate representations do not match rep_plus")
    sims = cands @ rep_plus
    if not np.all(np.isfinite(sims)):
        bad = np.flatnonzero(~np.isfinite(sims))
        raise NumericError(f"non-finite similarity at candidate(s) {bad.tolist()}; |f(x+)| = {np.linalg.norm(rep_plus):.3g}")
    scaled = sims / tau
    e = np.exp(scaled - scaled.max())
    p = e / e.sum()
    return LogitSet(float(sims[0]), sims[1:], float(p[0]), p[1:], float(tau))


def _batch_reps(params, batch, detached=None):
    second = params if detached is None else detached
    fp = forward(params, batch.pair.x_plus)
    fpp = forward(second, batch.pair.x_plusplus)
    fn = forward(second, batch.negative_inputs)
    return fp, fpp, fn


def loss(params, batch, tau, detached=None):
    """Contrastive loss of one batch.

    ``detached`` supplies the parameters for the gradient-blocked second
    slot of every similarity. Passing a frozen copy makes finite
    differences in ``params`` reproduce :func:`grad_weights`.
    """
    fp, fpp, fn = _batch_reps(params, batch, detached)
    lg = compute_logits(fp.rep, np.vstack([fpp.rep, fn.rep]), tau)
    # -s_p + tau logsumexp(s / tau) rewritten as tau log(1 + sum exp(gap))
    gap = (lg.sim_neg - lg.sim_pos) / tau
    hi = max(float(gap.max()), 0.0)
    rest = float(np.exp(gap - hi).sum())
    if hi > 0:
        return tau * (hi + np.log(np.exp(-hi) + rest))
    return tau * float(np.log1p(rest))


def grad_weights(params, batch, tau):
    """Gradient of :func:`loss` in ``W`` (m x d1), second similarity slot detached."""
    fp, fpp, fn = _batch_reps(params, batch)
    lg = compute_logits(fp.rep, np.vstack([fpp.rep, fn.rep]), tau)
    coef = -(1.0 - lg.ell_p) * fpp.rep + lg.ell_s @ fn.rep
    coef = np.where(fp.active, coef, 0.0)
    return np.outer(coef, batch.pair.x_plus)


def batch_gradient(params, batches, tau, lam):
    """Mean of per-batch gradients plus weight decay ``lam * W``."""
    if len(batches) < 1:
        raise ValueError("need at least one batch")
    acc = np.zeros_like(params.W)
    for batch in batches:
        acc += grad_weights(params, batch, tau)
    return acc / len(batches) + lam * params.W


def stacked_loss_and_gradient(params, x_plus, x_plusplus, x_neg, tau, lam):
    """Vectorized equivalent of :func:`batch_gradient` for K stacked batches.

    ``x_plus``, ``x_plusplus``: (K, d1); ``x_neg``: (K, S, d1). Returns the
    mean loss over batches and the (m x d1) gradient including decay.
    """
    k, s, d1 = x_neg.shape
    up = x_plus @ params.W.T
    fp, active = _kernels.soft_threshold(up, params.b)
    fpp, _ = _kernels.soft_threshold(x_plusplus @ params.W.T, params.b)
    fn, _ = _kernels.soft_threshold(x_neg.reshape(k * s, d1) @ params.W.T, params.b)
    fn = fn.reshape(k, s, params.m)
    sims, _, losses, coef = _kernels.contrastive_terms(fp, fpp, fn, active, tau)
    if not np.all(np.isfinite(sims)):
        raise NumericError("non-finite similarity in a training batch")
    grad = coef.T @ x_plus / k + lam * params.W
    return float(losses.mean()), grad
