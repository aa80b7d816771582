"""Hot inner kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``SPARSECL_DISABLE_NUMBA`` is unset (or set to ``0``/``false``).
Both paths compute the same quantities; each is deterministic on its own,
but they are not guaranteed to agree to the last bit because ``exp``/``log``
and the reduction order can differ.

Kernels
-------
box_muller(raw)
    uint64 words -> standard normals (two normals per pair of words).
soft_threshold(u, b)
    symmetrized ReLU ``sign(u) * max(|u| - b, 0)`` and the ``|u| >= b`` mask.
contrastive_terms(fp, fpp, fn, active, tau)
    per-batch similarities, logits, loss and the per-neuron gradient
    coefficient of the stop-grad InfoNCE objective.
"""

import math
import os

import numpy as np

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _env_disabled():
    flag = os.environ.get("SPARSECL_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("", "0", "false", "no")


try:
    if _env_disabled():
        raise ImportError("numba disabled by SPARSECL_DISABLE_NUMBA")
    import numba

    _njit = numba.njit(cache=True, nogil=True)
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _box_muller_np(raw):
    u1 = (raw[0::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = _TWO_PI * u2
    out = np.empty(raw.shape[0], dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out


def _soft_threshold_np(u, b):
    mag = np.abs(u)
    active = mag >= b
    rep = np.sign(u) * np.maximum(mag - b, 0.0)
    return rep, active


def _contrastive_terms_np(fp, fpp, fn, active, tau):
    # fp, fpp: (K, m); fn: (K, S, m); active: (K, m) bool
    k, s = fn.shape[0], fn.shape[1]
    sims = np.empty((k, s + 1))
    sims[:, 0] = np.sum(fp * fpp, axis=1)
    sims[:, 1:] = np.einsum("km,ksm->ks", fp, fn)
    scaled = sims / tau
    top = scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled - top)
    tot = e.sum(axis=1, keepdims=True)
    logits = e / tot
    # loss = tau * log(1 + sum_s exp(gap_s)); log1p avoids cancellation near 0
    gap = (sims[:, 1:] - sims[:, :1]) / tau
    hi = np.maximum(gap.max(axis=1), 0.0)
    rest = np.exp(gap - hi[:, None]).sum(axis=1)
    loss = tau * np.where(hi > 0, hi + np.log(np.exp(-hi) + rest), np.log1p(rest))
    coef = -(1.0 - logits[:, :1]) * fpp + np.einsum("ks,ksm->km", logits[:, 1:], fn)
    coef = np.where(active, coef, 0.0)
    return sims, logits, loss, coef


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @_njit
    def _box_muller_nb(raw):
        n = raw.shape[0]
        out = np.empty(n, dtype=np.float64)
        for k in range(0, n, 2):
            u1 = np.float64(raw[k] >> np.uint64(11)) * _INV_2_53
            u2 = np.float64(raw[k + 1] >> np.uint64(11)) * _INV_2_53
            r = math.sqrt(-2.0 * math.log1p(-u1))
            theta = _TWO_PI * u2
            out[k] = r * math.cos(theta)
            out[k + 1] = r * math.sin(theta)
        return out

    @_njit
    def _soft_threshold_nb(u, b):
        n, m = u.shape
        rep = np.empty((n, m), dtype=np.float64)
        active = np.empty((n, m), dtype=np.bool_)
        for r in range(n):
            for i in range(m):
                v = u[r, i]
                mag = abs(v)
                if mag >= b[i]:
                    active[r, i] = True
                    if v > 0.0:
                        rep[r, i] = mag - b[i]
                    elif v < 0.0:
                        rep[r, i] = b[i] - mag
                    else:
                        rep[r, i] = 0.0
                else:
                    active[r, i] = False
                    rep[r, i] = 0.0
        return rep, active

    @_njit
    def _contrastive_terms_nb(fp, fpp, fn, active, tau):
        k_batches, m = fp.shape
        s_neg = fn.shape[1]
        sims = np.empty((k_batches, s_neg + 1))
        logits = np.empty((k_batches, s_neg + 1))
        loss = np.empty(k_batches)
        coef = np.zeros((k_batches, m))
        for k in range(k_batches):
            acc = 0.0
            for i in range(m):
                acc += fp[k, i] * fpp[k, i]
            sims[k, 0] = acc
            for s in range(s_neg):
                acc = 0.0
                for i in range(m):
                    acc += fp[k, i] * fn[k, s, i]
                sims[k, s + 1] = acc
            top = sims[k, 0] / tau
            for s in range(1, s_neg + 1):
                if sims[k, s] / tau > top:
                    top = sims[k, s] / tau
            tot = 0.0
            for s in range(s_neg + 1):
                logits[k, s] = math.exp(sims[k, s] / tau - top)
                tot += logits[k, s]
            for s in range(s_neg + 1):
                logits[k, s] /= tot
            hi = 0.0
            for s in range(1, s_neg + 1):
                gap = (sims[k, s] - sims[k, 0]) / tau
                if gap > hi:
                    hi = gap
            rest = 0.0
            for s in range(1, s_neg + 1):
                rest += math.exp((sims[k, s] - sims[k, 0]) / tau - hi)
            if hi > 0.0:
                loss[k] = tau * (hi + math.log(math.exp(-hi) + rest))
            else:
                loss[k] = tau * math.log1p(rest)
            lp = 1.0 - logits[k, 0]
            for i in range(m):
                if active[k, i]:
                    c = -lp * fpp[k, i]
                    for s in range(s_neg):
                        c += logits[k, s + 1] * fn[k, s, i]
                    coef[k, i] = c
        return sims, logits, loss, coef


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def backend():
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if HAVE_NUMBA else "numpy"


def box_muller(raw):
    raw = np.ascontiguousarray(raw, dtype=np.uint64)
    if raw.shape[0] % 2:
        raise ValueError("box_muller needs an even number of words")
    if HAVE_NUMBA:
        return _box_muller_nb(raw)
    return _box_muller_np(raw)


def soft_threshold(u, b):
    u = np.asarray(u, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if HAVE_NUMBA and u.ndim == 2:
        return _soft_threshold_nb(np.ascontiguousarray(u), np.ascontiguousarray(b))
    return _soft_threshold_np(u, b)


def contrastive_terms(fp, fpp, fn, active, tau):
    if HAVE_NUMBA:
        return _contrastive_terms_nb(
            np.ascontiguousarray(fp, dtype=np.float64),
            np.ascontiguousarray(fpp, dtype=np.float64),
            np.ascontiguousarray(fn, dtype=np.float64),
            np.ascontiguousarray(active, dtype=np.bool_),
            float(tau),
        )
    return _contrastive_terms_np(fp, fpp, fn, active, float(tau))


# explicit handles so tests and the benchmark can compare both paths
numpy_kernels = {
    "box_muller": _box_muller_np,
    "soft_threshold": _soft_threshold_np,
    "contrastive_terms": _contrastive_terms_np,
}
numba_kernels = (
    {
        "box_muller": _box_muller_nb,
        "soft_threshold": _soft_threshold_nb,
        "contrastive_terms": _contrastive_terms_nb,
    }
    if HAVE_NUMBA
    else {}
)
