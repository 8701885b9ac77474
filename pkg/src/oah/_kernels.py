"""Hot inner loops: CTC forward/backward, CTC prefix scoring, edit distance.

Every kernel exists twice: a numba ``@njit`` version and a plain numpy
version.  The numba path is used when numba imports and ``OAH_NUMBA`` is not
set to a false-ish value (``0``, ``false``, ``no``, ``off``).  Both paths are
importable under explicit names so tests and the benchmark can compare them.
"""

import math
import os

import numpy as np

NEG_INF = -np.inf

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_wants_numba():
    return os.environ.get("OAH_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


@njit(cache=True)
def _lae(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _extended_labels(labels, blank):
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


# ---------------------------------------------------------------------------
# CTC forward/backward
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ctc_numba(logp, ext, blank):
    U = logp.shape[0]
    V = logp.shape[1]
    S = ext.shape[0]
    alpha = np.full((U, S), -np.inf)
    beta = np.full((U, S), -np.inf)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, U):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lae(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                a = _lae(a, alpha[t - 1, s - 2])
            if a != -np.inf:
                alpha[t, s] = a + logp[t, ext[s]]
    beta[U - 1, S - 1] = 0.0
    if S > 1:
        beta[U - 1, S - 2] = 0.0
    for t in range(U - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + logp[t + 1, ext[s]]
            if s + 1 < S:
                b = _lae(b, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                b = _lae(b, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
            beta[t, s] = b
    if S > 1:
        logz = _lae(alpha[U - 1, S - 1], alpha[U - 1, S - 2])
    else:
        logz = alpha[U - 1, S - 1]
    grad = np.zeros((U, V))
    if logz == -np.inf:
        return np.inf, grad
    occ = np.full((U, V), -np.inf)
    for t in range(U):
        for s in range(S):
            occ[t, ext[s]] = _lae(occ[t, ext[s]], alpha[t, s] + beta[t, s])
    for t in range(U):
        for v in range(V):
            if occ[t, v] != -np.inf:
                grad[t, v] = -math.exp(occ[t, v] - logz)
    return -logz, grad


def _ctc_numpy(logp, ext, blank):
    U, V = logp.shape
    S = ext.shape[0]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # (U, S)
    alpha = np.full((U, S), -np.inf)
    beta = np.full((U, S), -np.inf)
    alpha[0, :2] = emit[0, :2]
    with np.errstate(invalid="ignore"):
        for t in range(1, U):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
            alpha[t] = a + emit[t]
        beta[U - 1, -2:] = 0.0
        for t in range(U - 2, -1, -1):
            nxt = beta[t + 1] + emit[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
            beta[t] = b
    logz = np.logaddexp.reduce(alpha[U - 1, -2:])
    grad = np.zeros((U, V))
    if logz == -np.inf:
        return np.inf, grad
    occ_s = alpha + beta
    occ = np.full((U, V), -np.inf)
    for s in range(S):
        occ[:, ext[s]] = np.logaddexp(occ[:, ext[s]], occ_s[:, s])
    grad = -np.exp(occ - logz)
    return -logz, grad


def ctc_forward_backward(logp, labels, blank, use_numba=None):
    """Negative log-likelihood of ``labels`` under a (U, V) log-posterior lattice.

    Returns ``(loss, grad)`` where ``grad`` is d loss / d logp.  Infeasible
    targets give ``(inf, zeros)``.
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    U, V = logp.shape
    if U == 0:
        return (0.0 if len(labels) == 0 else np.inf), np.zeros((0, V))
    ext = _extended_labels(labels, blank)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        loss, grad = _ctc_numba(logp, ext, blank)
        return float(loss), grad
    return _ctc_numpy(logp, ext, blank)


# ---------------------------------------------------------------------------
# CTC prefix score
# ---------------------------------------------------------------------------


@njit(cache=True)
def _prefix_numba(logp, r_prev, last, cands, blank, empty_prefix):
    U = logp.shape[0]
    K = cands.shape[0]
    psi = np.full(K, -np.inf)
    r_new = np.full((K, U, 2), -np.inf)
    for k in range(K):
        c = cands[k]
        if empty_prefix:
            r_new[k, 0, 0] = logp[0, c]
        p = r_new[k, 0, 0]
        for t in range(1, U):
            if c == last:
                phi = r_prev[t - 1, 1]
            else:
                phi = _lae(r_prev[t - 1, 0], r_prev[t - 1, 1])
            r_new[k, t, 0] = _lae(r_new[k, t - 1, 0], phi) + logp[t, c]
            r_new[k, t, 1] = _lae(r_new[k, t - 1, 1], r_new[k, t - 1, 0]) + logp[t, blank]
            p = _lae(p, phi + logp[t, c])
        psi[k] = p
    return psi, r_new


def _prefix_numpy(logp, r_prev, last, cands, blank, empty_prefix):
    U = logp.shape[0]
    K = cands.shape[0]
    r_new = np.full((K, U, 2), -np.inf)
    phi_all = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
    phi = np.where((cands == last)[:, None], r_prev[None, :, 1], phi_all[None, :])  # (K, U)
    emit = logp[:, cands].T  # (K, U)
    if empty_prefix:
        r_new[:, 0, 0] = emit[:, 0]
    psi = r_new[:, 0, 0].copy()
    with np.errstate(invalid="ignore"):
        for t in range(1, U):
            r_new[:, t, 0] = np.logaddexp(r_new[:, t - 1, 0], phi[:, t - 1]) + emit[:, t]
            r_new[:, t, 1] = np.logaddexp(r_new[:, t - 1, 1], r_new[:, t - 1, 0]) + logp[t, blank]
            psi = np.logaddexp(psi, phi[:, t - 1] + emit[:, t])
    return psi, r_new


def ctc_prefix_extend(logp, r_prev, last, cands, blank, empty_prefix, use_numba=None):
    """Extend a prefix's forward variables by each candidate token.

    ``r_prev`` is (U, 2): log mass of the prefix ending at frame t in a
    non-blank (col 0) or blank (col 1) state.  Returns ``(psi, r_new)`` with
    ``psi[k]`` the log prefix probability of ``prefix + cands[k]``.
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    r_prev = np.ascontiguousarray(r_prev, dtype=np.float64)
    cands = np.asarray(cands, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    fn = _prefix_numba if use_numba else _prefix_numpy
    return fn(logp, r_prev, int(last), cands, int(blank), bool(empty_prefix))


# ---------------------------------------------------------------------------
# edit distance
# ---------------------------------------------------------------------------


@njit(cache=True)
def _edit_numba(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            d = min(prev[j] + 1, cur[j - 1] + 1)
            cur[j] = min(d, sub)
        prev, cur = cur, prev
    return prev[m]


def _edit_numpy(a, b):
    m = b.shape[0]
    prev = np.arange(m + 1)
    offs = np.arange(m + 1)
    for i in range(1, a.shape[0] + 1):
        tmp = np.empty(m + 1, dtype=np.int64)
        tmp[0] = i
        tmp[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b != a[i - 1]))
        # insertions propagate left to right: cur[j] = min_k (tmp[k] + j - k)
        prev = np.minimum.accumulate(tmp - offs) + offs
    return int(prev[m])


def edit_distance(a, b, use_numba=None):
    """Levenshtein distance with unit costs between two int sequences."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        return int(_edit_numba(a, b))
    return _edit_numpy(a, b)
