"""Numba kernels for tree growth, prediction and threshold adaptation.

Trees are flat arrays: ``feature`` (-1 marks a leaf), ``threshold``,
``left``/``right`` child indices, ``value`` (n_nodes x 2 mean label) and
``count``.  Samples go left when ``x[feature] <= threshold``.
"""

import numpy as np
from numba import njit

LEAF = -1


@njit(cache=True)
def _sse_reduction(sl0, sl1, nl, sr0, sr1, nr, s0, s1, n):
    # SSE(parent) - SSE(left) - SSE(right) written with sums only
    return (sl0 * sl0 + sl1 * sl1) / nl + (sr0 * sr0 + sr1 * sr1) / nr \
        - (s0 * s0 + s1 * s1) / n


@njit(cache=True)
def grow_tree(X, Y, idx, max_features, seed):
    n = idx.shape[0]
    n_features = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, LEAF, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, LEAF, dtype=np.int64)
    right = np.full(cap, LEAF, dtype=np.int64)
    value = np.zeros((cap, 2), dtype=np.float64)
    count = np.zeros(cap, dtype=np.int64)

    np.random.seed(seed)
    perm = idx.copy()
    # stack of (node, start, end) over perm
    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    top = 1
    n_nodes = 1
    vals = np.empty(n, dtype=np.float64)
    order = np.empty(n, dtype=np.int64)

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        m = hi - lo
        s0 = 0.0
        s1 = 0.0
        pure = True
        y00 = Y[perm[lo], 0]
        y01 = Y[perm[lo], 1]
        for k in range(lo, hi):
            a = Y[perm[k], 0]
            b = Y[perm[k], 1]
            s0 += a
            s1 += b
            if a != y00 or b != y01:
                pure = False
        value[node, 0] = s0 / m
        value[node, 1] = s1 / m
        count[node] = m
        if pure or m < 2:
            continue
        sse = 0.0
        for k in range(lo, hi):
            d0 = Y[perm[k], 0] - value[node, 0]
            d1 = Y[perm[k], 1] - value[node, 1]
            sse += d0 * d0 + d1 * d1
        tol = 1e-12 * sse

        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        feats = np.random.permutation(n_features)
        visited = 0
        for fi in range(n_features):
            if visited >= max_features:
                break
            f = feats[fi]
            for k in range(m):
                vals[k] = X[perm[lo + k], f]
            o = np.argsort(vals[:m], kind="mergesort")
            if vals[o[0]] == vals[o[m - 1]]:
                continue
            visited += 1
            for k in range(m):
                order[k] = perm[lo + o[k]]
            sl0 = 0.0
            sl1 = 0.0
            for k in range(m - 1):
                sl0 += Y[order[k], 0]
                sl1 += Y[order[k], 1]
                v_here = X[order[k], f]
                v_next = X[order[k + 1], f]
                if v_here == v_next:
                    continue
                nl = k + 1
                g = _sse_reduction(sl0, sl1, nl, s0 - sl0, s1 - sl1, m - nl,
                                   s0, s1, m)
                if g > best_gain:
                    best_gain = g
                    best_f = f
                    best_thr = 0.5 * (v_here + v_next)
        if best_f < 0 or best_gain <= tol:
            continue
        # partition perm[lo:hi] in place, stable
        buf_l = np.empty(m, dtype=np.int64)
        buf_r = np.empty(m, dtype=np.int64)
        nl = 0
        nr = 0
        for k in range(lo, hi):
            s = perm[k]
            if X[s, best_f] <= best_thr:
                buf_l[nl] = s
                nl += 1
            else:
                buf_r[nr] = s
                nr += 1
        for k in range(nl):
            perm[lo + k] = buf_l[k]
        for k in range(nr):
            perm[lo + nl + k] = buf_r[k]
        feature[node] = best_f
        threshold[node] = best_thr
        li = n_nodes
        ri = n_nodes + 1
        n_nodes += 2
        left[node] = li
        right[node] = ri
        # push right first so left subtree is expanded first
        st_node[top] = ri
        st_lo[top] = lo + nl
        st_hi[top] = hi
        top += 1
        st_node[top] = li
        st_lo[top] = lo
        st_hi[top] = lo + nl
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(),
            value[:n_nodes].copy(), count[:n_nodes].copy())


@njit(cache=True)
def apply_tree(feature, threshold, left, right, X):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True)
def label_cells(Y, ox, oy, cw, ch, g):
    out = np.empty(Y.shape[0], dtype=np.int64)
    for i in range(Y.shape[0]):
        cx = int(np.floor((Y[i, 0] - ox) / cw))
        cy = int(np.floor((Y[i, 1] - oy) / ch))
        cx = min(max(cx, 0), g - 1)
        cy = min(max(cy, 0), g - 1)
        out[i] = cx * g + cy
    return out


@njit(cache=True)
def _js2(p, q):
    # Jensen-Shannon divergence (base 2) of two normalized histograms
    d = 0.0
    for c in range(p.shape[0]):
        a = p[c]
        b = q[c]
        if a == 0.0 and b == 0.0:
            continue
        mid = 0.5 * (a + b)
        if a > 0.0:
            d += 0.5 * a * np.log2(a / mid)
        if b > 0.0:
            d += 0.5 * b * np.log2(b / mid)
    return d


@njit(cache=True)
def divergence_gain(tl, tr, sl, sr, n_left, n_right):
    """1 - size-weighted JS divergence between target and source children."""
    n = n_left + n_right
    return 1.0 - (n_left * _js2(tl, sl) + n_right * _js2(tr, sr)) / n


@njit(cache=True)
def adapt_tree(feature, threshold, left, right, value, count,
               Xs, src_cells, src_idx, Xt, Yt, tgt_cells, n_cells,
               min_node_targets):
    """Re-select thresholds top-down with target data; topology is kept.

    Source samples are always routed with the original thresholds so that the
    per-node source label distributions are those seen at training time.
    """
    thr_new = threshold.copy()
    val_new = value.copy()
    cnt_new = count.copy()
    n_nodes = feature.shape[0]
    ns = src_idx.shape[0]
    nt = Xt.shape[0]
    sperm = src_idx.copy()
    tperm = np.arange(nt)
    st_node = np.empty(n_nodes, dtype=np.int64)
    st_s0 = np.empty(n_nodes, dtype=np.int64)
    st_s1 = np.empty(n_nodes, dtype=np.int64)
    st_t0 = np.empty(n_nodes, dtype=np.int64)
    st_t1 = np.empty(n_nodes, dtype=np.int64)
    st_node[0] = 0
    st_s0[0] = 0
    st_s1[0] = ns
    st_t0[0] = 0
    st_t1[0] = nt
    top = 1
    sbuf = np.empty(ns, dtype=np.int64)
    tbuf = np.empty(nt, dtype=np.int64)
    tvals = np.empty(nt, dtype=np.float64)
    sl = np.zeros(n_cells)
    sr = np.zeros(n_cells)
    tl = np.zeros(n_cells)
    tr = np.zeros(n_cells)

    while top > 0:
        top -= 1
        node = st_node[top]
        s0 = st_s0[top]
        s1 = st_s1[top]
        t0 = st_t0[top]
        t1 = st_t1[top]
        m = t1 - t0
        if m < min_node_targets or m == 0:
            continue
        f = feature[node]
        if f == LEAF:
            a = 0.0
            b = 0.0
            for k in range(t0, t1):
                a += Yt[tperm[k], 0]
                b += Yt[tperm[k], 1]
            val_new[node, 0] = a / m
            val_new[node, 1] = b / m
            cnt_new[node] = m
            continue

        # source partition under the original threshold
        nsl = 0
        nsr = 0
        for k in range(s0, s1):
            s = sperm[k]
            if Xs[s, f] <= threshold[node]:
                sperm[s0 + nsl] = s
                nsl += 1
            else:
                sbuf[nsr] = s
                nsr += 1
        for k in range(nsr):
            sperm[s0 + nsl + k] = sbuf[k]

        for k in range(m):
            tvals[k] = Xt[tperm[t0 + k], f]
        o = np.argsort(tvals[:m], kind="mergesort")
        n_distinct = 1
        for k in range(m - 1):
            if tvals[o[k]] != tvals[o[k + 1]]:
                n_distinct += 1
        chosen = threshold[node]
        if n_distinct >= 2 and nsl > 0 and nsr > 0:
            n_cand = n_distinct - 1
            cand = np.empty(n_cand, dtype=np.float64)
            gain = np.empty(n_cand, dtype=np.float64)
            cut = np.empty(n_cand, dtype=np.int64)
            tot0 = 0.0
            tot1 = 0.0
            for k in range(m):
                tot0 += Yt[tperm[t0 + o[k]], 0]
                tot1 += Yt[tperm[t0 + o[k]], 1]
            a = 0.0
            b = 0.0
            c = 0
            for k in range(m - 1):
                a += Yt[tperm[t0 + o[k]], 0]
                b += Yt[tperm[t0 + o[k]], 1]
                lo_v = tvals[o[k]]
                hi_v = tvals[o[k + 1]]
                if lo_v == hi_v:
                    continue
                nl = k + 1
                cand[c] = 0.5 * (lo_v + hi_v)
                gain[c] = _sse_reduction(a, b, nl, tot0 - a, tot1 - b, m - nl,
                                         tot0, tot1, m)
                cut[c] = nl
                c += 1
            sl[:] = 0.0
            sr[:] = 0.0
            for k in range(s0, s0 + nsl):
                sl[src_cells[sperm[k]]] += 1.0
            for k in range(s0 + nsl, s1):
                sr[src_cells[sperm[k]]] += 1.0
            sl /= nsl
            sr /= nsr
            best_dg = -np.inf
            for c in range(n_cand):
                if c > 0 and gain[c] < gain[c - 1]:
                    continue
                if c < n_cand - 1 and gain[c] < gain[c + 1]:
                    continue
                nl = cut[c]
                nr = m - nl
                tl[:] = 0.0
                tr[:] = 0.0
                for k in range(nl):
                    tl[tgt_cells[tperm[t0 + o[k]]]] += 1.0
                for k in range(nl, m):
                    tr[tgt_cells[tperm[t0 + o[k]]]] += 1.0
                tl /= nl
                tr /= nr
                dg = divergence_gain(tl, tr, sl, sr, nl, nr)
                if dg > best_dg:
                    best_dg = dg
                    chosen = cand[c]
        thr_new[node] = chosen

        ntl = 0
        ntr = 0
        for k in range(t0, t1):
            t = tperm[k]
            if Xt[t, f] <= chosen:
                tperm[t0 + ntl] = t
                ntl += 1
            else:
                tbuf[ntr] = t
                ntr += 1
        for k in range(ntr):
            tperm[t0 + ntl + k] = tbuf[k]

        st_node[top] = right[node]
        st_s0[top] = s0 + nsl
        st_s1[top] = s1
        st_t0[top] = t0 + ntl
        st_t1[top] = t1
        top += 1
        st_node[top] = left[node]
        st_s0[top] = s0
        st_s1[top] = s0 + nsl
        st_t0[top] = t0
        st_t1[top] = t0 + ntl
        top += 1

    return thr_new, val_new, cnt_new



