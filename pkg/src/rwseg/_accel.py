"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``RWSEG_DISABLE_NUMBA`` is unset (or ``0``). Both paths are always
importable so tests and the benchmark can compare them directly.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False


def _numba_disabled():
    return os.environ.get("RWSEG_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _numba_disabled()
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def simplex_rows_numpy(V):
    """Euclidean projection of every row of ``V`` onto the unit simplex."""
    n, K = V.shape
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, K + 1)
    cond = U - css / ind > 0
    rho = np.count_nonzero(cond, axis=1)
    theta = css[np.arange(n), rho - 1] / rho
    return np.maximum(V - theta[:, None], 0.0)


def project_compatible_rows_numpy(V, s_star):
    """Row-wise projection onto {p in simplex : p[s_star] >= p[s] for all s}.

    The dominant coordinate is pooled with the largest competitors until the
    pooled mean is no smaller than every remaining competitor; the pooled
    block is then tied and the result projected onto the simplex.
    """
    V = np.asarray(V, dtype=np.float64)
    s_star = np.asarray(s_star, dtype=np.int64)
    n, K = V.shape
    rows = np.arange(n)
    own = V[rows, s_star]
    mask = np.ones((n, K), dtype=bool)
    mask[rows, s_star] = False
    others = V[mask].reshape(n, K - 1)
    u = -np.sort(-others, axis=1)
    pooled_sum = own[:, None] + np.concatenate(
        [np.zeros((n, 1)), np.cumsum(u, axis=1)], axis=1)
    means = pooled_sum / np.arange(1, K + 1)
    # keep pooling while the next competitor exceeds the current pooled mean
    cont = u > means[:, :-1]
    stop = np.where(cont.all(axis=1), K - 1, np.argmin(cont, axis=1))
    mu = means[rows, stop]
    tied = (V > mu[:, None]) | ~mask
    W = np.where(tied, mu[:, None], V)
    return simplex_rows_numpy(W)


def edge_quadform_numpy(edges, weights, Y):
    """sum_s sum_(i,j) w_ij (Y[s,i] - Y[s,j])**2 for label-major ``Y``."""
    d = Y[:, edges[:, 0]] - Y[:, edges[:, 1]]
    return float(np.sum(weights[None, :] * d * d))


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _sort_desc(src, m, dst):
        # insertion sort of src[:m] into dst[:m]; K is small
        for j in range(m):
            x = src[j]
            k = j
            while k > 0 and dst[k - 1] < x:
                dst[k] = dst[k - 1]
                k -= 1
            dst[k] = x

    @numba.njit(cache=True)
    def _simplex_inplace(w, u, out):
        K = w.shape[0]
        _sort_desc(w, K, u)
        css = 0.0
        theta = 0.0
        for j in range(K):
            css += u[j]
            t = (css - 1.0) / (j + 1)
            if u[j] - t > 0.0:
                theta = t
        for j in range(K):
            x = w[j] - theta
            out[j] = x if x > 0.0 else 0.0

    @numba.njit(cache=True)
    def project_compatible_rows_numba(V, s_star):
        n, K = V.shape
        out = np.empty((n, K))
        others = np.empty(K - 1)
        u = np.empty(K)
        w = np.empty(K)
        for i in range(n):
            s = s_star[i]
            m = 0
            for j in range(K):
                if j != s:
                    others[m] = V[i, j]
                    m += 1
            _sort_desc(others, K - 1, u)
            total = V[i, s]
            npool = 1
            for j in range(K - 1):
                if u[j] > total / npool:
                    total += u[j]
                    npool += 1
                else:
                    break
            mu = total / npool
            for j in range(K):
                if j == s or V[i, j] > mu:
                    w[j] = mu
                else:
                    w[j] = V[i, j]
            _simplex_inplace(w, u, out[i])
        return out

    @numba.njit(cache=True)
    def edge_quadform_numba(edges, weights, Y):
        K = Y.shape[0]
        total = 0.0
        for e in range(edges.shape[0]):
            a = edges[e, 0]
            b = edges[e, 1]
            we = weights[e]
            for s in range(K):
                d = Y[s, a] - Y[s, b]
                total += we * d * d
        return total

else:  # pragma: no cover
    project_compatible_rows_numba = None
    edge_quadform_numba = None


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def project_compatible_rows(V, s_star):
    V = np.ascontiguousarray(V, dtype=np.float64)
    s_star = np.ascontiguousarray(s_star, dtype=np.int64)
    if USE_NUMBA:
        return project_compatible_rows_numba(V, s_star)
    return project_compatible_rows_numpy(V, s_star)


def edge_quadform(edges, weights, Y):
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if USE_NUMBA:
        return float(edge_quadform_numba(edges, weights, Y))
    return edge_quadform_numpy(edges, weights, Y)
