"""Hot numerical kernels: jitted loops and vectorized numpy twins.

Three loop-heavy routines dominate the Monte Carlo workloads and get dual
implementations selected by ``tailrisk._accel``:

* ``lasso_path``    coordinate-descent lasso over a descending penalty grid
* ``tree_grow`` / ``tree_predict``    CART regression trees on flat arrays
* ``pinball_polish``    exact per-coordinate minimization of the pinball loss
  via weighted-quantile line searches

Both builds draw randomness from one integer generator (splitmix64 in
counter mode), keyed by stable identifiers (tree seed, node id), never by
traversal order, so the jitted and numpy paths consume identical streams.
Inner products route through ``np.dot`` on contiguous slices in both builds;
remaining reductions may differ in summation order, so cross-path agreement
is to float round-off while each path alone is bitwise deterministic.

Design-matrix layout contract: lasso and polish take Fortran-ordered X
(column slices contiguous), trees take C-ordered X (row scans dominate).
"""

import numpy as np

from . import _accel

_M64 = (1 << 64) - 1
_GOLD = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_NODE_SALT = 0x632BE59BD9B4E019
_INV53 = 1.0 / float(1 << 53)

# uint64 copies for the jitted build (numba wraps uint64 arithmetic mod 2^64,
# matching the masked python-int arithmetic below).
_U_GOLD = np.uint64(_GOLD)
_U_MIX1 = np.uint64(_MIX1)
_U_MIX2 = np.uint64(_MIX2)
_U_NODE_SALT = np.uint64(_NODE_SALT)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)


def mix64(z):
    """splitmix64 finalizer on python ints, exact mod 2^64."""
    z = int(z) & _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


def stream_u53(key, t):
    """t-th double in [0, 1) of the counter-mode stream keyed by ``key``."""
    v = mix64((int(key) + _GOLD * (t + 1)) & _M64)
    return (v >> 11) * _INV53


def stream_u53_block(key, count):
    """Vectorized uint64 counter stream -> ``count`` doubles in [0, 1).

    Array uint64 arithmetic wraps silently, so this matches ``stream_u53``
    exactly; used for bootstrap row draws where a python loop would drag.
    """
    t = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(int(key) & _M64) + np.uint64(_GOLD) * t
    z = (z ^ (z >> _U30)) * _U_MIX1
    z = (z ^ (z >> _U27)) * _U_MIX2
    z = z ^ (z >> _U31)
    return (z >> _U11).astype(np.float64) * _INV53


def derive_key(key, index, salt=_NODE_SALT):
    """Stable child key for (tree, node, ...) style derivations."""
    return mix64((int(key) ^ mix64((int(index) * _GOLD + salt) & _M64)) & _M64)


# ---------------------------------------------------------------------------
# lasso coordinate descent over a descending lambda grid
# ---------------------------------------------------------------------------

def _lasso_path_np(Xf, y, lams, tol, max_sweeps):
    """Cyclic CD with soft thresholding, warm-started along the grid.

    Xf: (n, p) float64, Fortran order. y: (n,) centered response. lams:
    descending penalties on the (1/2n)||y - Xb||^2 + lam*||b||_1 scale.
    Returns (B[L, p], sweeps[L], converged[L]). Intercept handling and
    standardization belong to the caller.
    """
    n, p = Xf.shape
    L = lams.shape[0]
    B = np.zeros((L, p))
    sweeps = np.zeros(L, dtype=np.int64)
    conv = np.zeros(L, dtype=np.bool_)
    zj = np.empty(p)
    for j in range(p):
        xj = Xf[:, j]
        zj[j] = np.dot(xj, xj) / n
    b = np.zeros(p)
    r = y.copy()
    for li in range(L):
        lam = lams[li]
        it = 0
        ok = False
        while it < max_sweeps:
            it += 1
            dmax = 0.0
            for j in range(p):
                if zj[j] <= 0.0:
                    continue
                xj = Xf[:, j]
                rho = np.dot(xj, r) / n + zj[j] * b[j]
                if rho > lam:
                    bn = (rho - lam) / zj[j]
                elif rho < -lam:
                    bn = (rho + lam) / zj[j]
                else:
                    bn = 0.0
                d = bn - b[j]
                if d != 0.0:
                    r -= d * xj
                    b[j] = bn
                    ad = abs(d)
                    if ad > dmax:
                        dmax = ad
            if dmax < tol:
                ok = True
                break
        B[li, :] = b
        sweeps[li] = it
        conv[li] = ok
    return B, sweeps, conv


# ---------------------------------------------------------------------------
# CART regression trees on flat arrays
# ---------------------------------------------------------------------------

def _feature_subset_np(nkey, p, k):
    """First k entries of a splitmix-driven partial Fisher-Yates over 0..p-1."""
    perm = np.arange(p, dtype=np.int64)
    for i in range(k):
        u = stream_u53(nkey, i)
        j = i + int(u * (p - i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm[:k]


def _tree_grow_np(X, y, rows, max_depth, min_leaf, k_feats, seed):
    """Grow one variance-reduction CART tree; see module docstring for layout.

    Split rule: maximize sum_L^2/n_L + sum_R^2/n_R (equivalent to SSE drop),
    scanning drawn features in order and boundaries left to right; strict >
    keeps the first best. Threshold is the lower boundary value with rule
    x <= thr -> left, so training rows partition exactly. Gains must clear
    1e-10 * sum(y^2) within the node, which blocks float-noise splits on
    near-constant targets.
    """
    seed = int(seed)
    m = rows.shape[0]
    p = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    thresh = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    rows_buf = rows.astype(np.int64).copy()

    stack = [(0, 0, m, 0)]
    n_nodes = 1
    while stack:
        nd, lo, hi, depth = stack.pop()
        seg = rows_buf[lo:hi]
        cnt = hi - lo
        ys = y[seg]
        s = float(np.sum(ys))
        s2 = float(np.dot(ys, ys))
        value[nd] = s / cnt
        if depth >= max_depth or cnt < 2 * min_leaf:
            continue
        gain_floor = 1e-10 * s2
        best_gain = gain_floor
        best_f = -1
        best_thr = 0.0
        best_nl = 0
        base = s * s / cnt
        nkey = derive_key(seed, nd)
        feats = _feature_subset_np(nkey, p, k_feats)
        for f in feats:
            vals = X[seg, f]
            ordv = np.argsort(vals, kind="stable")
            vs = vals[ordv]
            cy = np.cumsum(ys[ordv])
            # candidate boundaries: strict value increase, both sides >= min_leaf
            nl = np.arange(1, cnt)
            okb = (vs[:-1] < vs[1:]) & (nl >= min_leaf) & (cnt - nl >= min_leaf)
            if not okb.any():
                continue
            sl = cy[:-1][okb]
            nlv = nl[okb]
            gains = sl * sl / nlv + (s - sl) * (s - sl) / (cnt - nlv) - base
            gi = int(np.argmax(gains))
            if gains[gi] > best_gain:
                best_gain = float(gains[gi])
                best_f = int(f)
                bpos = int(nlv[gi]) - 1
                best_thr = float(vs[bpos])
                best_nl = int(nlv[gi])
        if best_f < 0:
            continue
        bvals = X[seg, best_f]
        go_left = bvals <= best_thr
        rows_buf[lo:hi] = np.concatenate([seg[go_left], seg[~go_left]])
        feature[nd] = best_f
        thresh[nd] = best_thr
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        left[nd] = lid
        right[nd] = rid
        stack.append((rid, lo + best_nl, hi, depth + 1))
        stack.append((lid, lo, lo + best_nl, depth + 1))
    return feature[:n_nodes], thresh[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


def _tree_predict_np(feature, thresh, left, right, value, X):
    n = X.shape[0]
    nd = np.zeros(n, dtype=np.int64)
    rowix = np.arange(n)
    while True:
        f = feature[nd]
        active = f >= 0
        if not active.any():
            break
        fa = np.where(active, f, 0)
        xv = X[rowix, fa]
        nxt = np.where(xv <= thresh[nd], left[nd], right[nd])
        nd = np.where(active, nxt, nd)
    return value[nd]


# ---------------------------------------------------------------------------
# exact pinball coordinate polish
# ---------------------------------------------------------------------------

def _pinball_obj_np(r, tau):
    return float(np.sum(r * (tau - (r < 0.0))))


def _refresh_residual_np(Xf, y, b):
    # column-sequential accumulation, mirrored by the jitted build
    r = y.copy()
    for j in range(Xf.shape[1]):
        r -= b[j] * Xf[:, j]
    return r


def _pinball_polish_np(Xf, y, beta, tau, max_sweeps, rtol):
    """Cyclic exact coordinate descent on sum rho_tau(y - Xb).

    Each coordinate step solves min_t sum rho_tau(r_i - a_i t) exactly: the
    minimizer is the breakpoint r_i/a_i at which the cumulative |a| weight
    (in breakpoint order) first reaches the negative-slope mass
    tau*sum(a>0)|a| + (1-tau)*sum(a<0)|a|. The objective never increases.
    Returns (beta, objective, sweeps).
    """
    n, p = Xf.shape
    b = beta.astype(np.float64).copy()
    r = _refresh_residual_np(Xf, y, b)
    obj = _pinball_obj_np(r, tau)
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        prev = obj
        for j in range(p):
            a = Xf[:, j]
            rj = r + b[j] * a
            nz = a != 0.0
            if not nz.any():
                continue
            az = a[nz]
            tz = rj[nz] / az
            w = np.abs(az)
            sneg = tau * float(np.sum(w[az > 0.0])) + (1.0 - tau) * float(np.sum(w[az < 0.0]))
            ordt = np.argsort(tz, kind="stable")
            cw = np.cumsum(w[ordt])
            k = int(np.searchsorted(cw, sneg, side="left"))
            if k >= tz.shape[0]:
                k = tz.shape[0] - 1
            tstar = float(tz[ordt[k]])
            if tstar != b[j]:
                b[j] = tstar
                r = rj - a * tstar
        r = _refresh_residual_np(Xf, y, b)
        obj = _pinball_obj_np(r, tau)
        if prev - obj <= rtol * (abs(prev) + 1e-12):
            break
    return b, obj, sweeps


# ---------------------------------------------------------------------------
# jitted twins
# ---------------------------------------------------------------------------

if _accel.HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _nb_mix64(z):
        z = (z ^ (z >> _U30)) * _U_MIX1
        z = (z ^ (z >> _U27)) * _U_MIX2
        return z ^ (z >> _U31)

    @njit(cache=True)
    def _nb_stream_u53(key, t):
        v = _nb_mix64(key + _U_GOLD * np.uint64(t + 1))
        return np.float64(v >> _U11) * _INV53

    @njit(cache=True)
    def _nb_derive_key(key, index):
        return _nb_mix64(key ^ _nb_mix64(np.uint64(index) * _U_GOLD + _U_NODE_SALT))

    @njit(cache=True)
    def _lasso_path_nb(Xf, y, lams, tol, max_sweeps):
        n, p = Xf.shape
        L = lams.shape[0]
        B = np.zeros((L, p))
        sweeps = np.zeros(L, dtype=np.int64)
        conv = np.zeros(L, dtype=np.bool_)
        zj = np.empty(p)
        for j in range(p):
            xj = Xf[:, j]
            zj[j] = np.dot(xj, xj) / n
        b = np.zeros(p)
        r = y.copy()
        for li in range(L):
            lam = lams[li]
            it = 0
            ok = False
            while it < max_sweeps:
                it += 1
                dmax = 0.0
                for j in range(p):
                    if zj[j] <= 0.0:
                        continue
                    xj = Xf[:, j]
                    rho = np.dot(xj, r) / n + zj[j] * b[j]
                    if rho > lam:
                        bn = (rho - lam) / zj[j]
                    elif rho < -lam:
                        bn = (rho + lam) / zj[j]
                    else:
                        bn = 0.0
                    d = bn - b[j]
                    if d != 0.0:
                        for i in range(n):
                            r[i] -= d * xj[i]
                        b[j] = bn
                        ad = abs(d)
                        if ad > dmax:
                            dmax = ad
                if dmax < tol:
                    ok = True
                    break
            for j in range(p):
                B[li, j] = b[j]
            sweeps[li] = it
            conv[li] = ok
        return B, sweeps, conv

    @njit(cache=True)
    def _tree_grow_nb(X, y, rows, max_depth, min_leaf, k_feats, seed):
        m = rows.shape[0]
        p = X.shape[1]
        cap = 2 * m + 1
        feature = np.full(cap, -1, dtype=np.int64)
        thresh = np.zeros(cap)
        left = np.full(cap, -1, dtype=np.int64)
        right = np.full(cap, -1, dtype=np.int64)
        value = np.zeros(cap)
        rows_buf = rows.astype(np.int64).copy()
        tmp = np.empty(m, dtype=np.int64)

        snode = np.empty(cap, dtype=np.int64)
        slo = np.empty(cap, dtype=np.int64)
        shi = np.empty(cap, dtype=np.int64)
        sdep = np.empty(cap, dtype=np.int64)
        sp = 0
        snode[0] = 0
        slo[0] = 0
        shi[0] = m
        sdep[0] = 0
        sp = 1
        n_nodes = 1
        perm = np.empty(p, dtype=np.int64)
        while sp > 0:
            sp -= 1
            nd = snode[sp]
            lo = slo[sp]
            hi = shi[sp]
            depth = sdep[sp]
            cnt = hi - lo
            s = 0.0
            s2 = 0.0
            for t in range(lo, hi):
                v = y[rows_buf[t]]
                s += v
                s2 += v * v
            value[nd] = s / cnt
            if depth >= max_depth or cnt < 2 * min_leaf:
                continue
            gain_floor = 1e-10 * s2
            best_gain = gain_floor
            best_f = -1
            best_thr = 0.0
            best_nl = 0
            base = s * s / cnt
            nkey = _nb_derive_key(seed, nd)
            for i in range(p):
                perm[i] = i
            for i in range(k_feats):
                u = _nb_stream_u53(nkey, i)
                j = i + int(u * (p - i))
                tswap = perm[i]
                perm[i] = perm[j]
                perm[j] = tswap
            vals = np.empty(cnt)
            for fi in range(k_feats):
                f = perm[fi]
                for t in range(cnt):
                    vals[t] = X[rows_buf[lo + t], f]
                ordv = np.argsort(vals)
                csum = 0.0
                for t in range(cnt - 1):
                    csum += y[rows_buf[lo + ordv[t]]]
                    nl = t + 1
                    if nl < min_leaf:
                        continue
                    nr = cnt - nl
                    if nr < min_leaf:
                        break
                    if vals[ordv[t]] < vals[ordv[t + 1]]:
                        sr = s - csum
                        g = csum * csum / nl + sr * sr / nr - base
                        if g > best_gain:
                            best_gain = g
                            best_f = f
                            best_thr = vals[ordv[t]]
                            best_nl = nl
            if best_f < 0:
                continue
            # stable two-pass partition on x <= thr
            a = 0
            bpos = best_nl
            for t in range(lo, hi):
                ridx = rows_buf[t]
                if X[ridx, best_f] <= best_thr:
                    tmp[a] = ridx
                    a += 1
                else:
                    tmp[bpos] = ridx
                    bpos += 1
            for t in range(cnt):
                rows_buf[lo + t] = tmp[t]
            feature[nd] = best_f
            thresh[nd] = best_thr
            lid = n_nodes
            rid = n_nodes + 1
            n_nodes += 2
            left[nd] = lid
            right[nd] = rid
            snode[sp] = rid
            slo[sp] = lo + best_nl
            shi[sp] = hi
            sdep[sp] = depth + 1
            sp += 1
            snode[sp] = lid
            slo[sp] = lo
            shi[sp] = lo + best_nl
            sdep[sp] = depth + 1
            sp += 1
        return feature[:n_nodes], thresh[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]

    @njit(cache=True)
    def _tree_predict_nb(feature, thresh, left, right, value, X):
        n = X.shape[0]
        out = np.empty(n)
        for i in range(n):
            nd = 0
            while feature[nd] >= 0:
                if X[i, feature[nd]] <= thresh[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
            out[i] = value[nd]
        return out

    @njit(cache=True)
    def _refresh_residual_nb(Xf, y, b):
        n, p = Xf.shape
        r = y.copy()
        for j in range(p):
            bj = b[j]
            xj = Xf[:, j]
            for i in range(n):
                r[i] -= bj * xj[i]
        return r

    @njit(cache=True)
    def _pinball_polish_nb(Xf, y, beta, tau, max_sweeps, rtol):
        n, p = Xf.shape
        b = beta.astype(np.float64).copy()
        r = _refresh_residual_nb(Xf, y, b)
        obj = 0.0
        for i in range(n):
            obj += r[i] * (tau - (1.0 if r[i] < 0.0 else 0.0))
        sweeps = 0
        tz = np.empty(n)
        w = np.empty(n)
        while sweeps < max_sweeps:
            sweeps += 1
            prev = obj
            for j in range(p):
                a = Xf[:, j]
                bold = b[j]
                nnz = 0
                sneg = 0.0
                for i in range(n):
                    ai = a[i]
                    if ai != 0.0:
                        rji = r[i] + bold * ai
                        tz[nnz] = rji / ai
                        if ai > 0.0:
                            w[nnz] = ai
                            sneg += tau * ai
                        else:
                            w[nnz] = -ai
                            sneg += (1.0 - tau) * (-ai)
                        nnz += 1
                if nnz == 0:
                    continue
                ordt = np.argsort(tz[:nnz])
                cw = np.empty(nnz)
                acc = 0.0
                for t in range(nnz):
                    acc += w[ordt[t]]
                    cw[t] = acc
                lo = 0
                hi = nnz
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if cw[mid] < sneg:
                        lo = mid + 1
                    else:
                        hi = mid
                k = lo
                if k >= nnz:
                    k = nnz - 1
                tstar = tz[ordt[k]]
                if tstar != bold:
                    b[j] = tstar
                    # mirror the numpy twin: r <- (r + bold*a) - tstar*a
                    for i in range(n):
                        r[i] = (r[i] + bold * a[i]) - tstar * a[i]
            r = _refresh_residual_nb(Xf, y, b)
            obj = 0.0
            for i in range(n):
                obj += r[i] * (tau - (1.0 if r[i] < 0.0 else 0.0))
            if prev - obj <= rtol * (abs(prev) + 1e-12):
                break
        return b, obj, sweeps

else:  # pragma: no cover - exercised only when numba is absent
    _lasso_path_nb = None
    _tree_grow_nb = None
    _tree_predict_nb = None
    _pinball_polish_nb = None


if _accel.USE_NUMBA:
    lasso_path = _lasso_path_nb
    tree_grow = _tree_grow_nb
    tree_predict = _tree_predict_nb
    pinball_polish = _pinball_polish_nb
else:
    lasso_path = _lasso_path_np
    tree_grow = _tree_grow_np
    tree_predict = _tree_predict_np
    pinball_polish = _pinball_polish_np

ACTIVE_PATH = _accel.ACTIVE_PATH
