"""Compiled tree kernels shared by the forest and boosting learners.

All kernels are single-threaded and release the GIL, so callers parallelise
across independent trees or fits and stay bit-reproducible.
"""

import numpy as np
from numba import njit

# Cumulative weights within this slack of a level count as reaching it, so
# that e.g. 1/40 of the mass satisfies level 0.025 despite rounding.
QUANTILE_TOL = 1e-10

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True)
def _next_u64(state):
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def _randbelow(state, k):
    return np.int64(_next_u64(state) % np.uint64(k))


@njit(cache=True)
def lower_quantile_sorted(v, alpha):
    """Left-continuous inverse of the ECDF of an ascending array."""
    m = v.size
    k = np.int64(np.ceil(alpha * m - QUANTILE_TOL * m)) - 1
    if k < 0:
        k = 0
    if k > m - 1:
        k = m - 1
    return v[k]


# ---------------------------------------------------------------- CART forest

@njit(cache=True, nogil=True)
def grow_cart(X, y, bag, mtry, min_leaf, seed):
    """Grow one variance-reduction tree on the rows listed in ``bag``.

    Node arrays use -1 for "no feature" (leaf) and "no child". Leaves own a
    slice ``members[leaf_start:leaf_start + leaf_len]`` of distinct row ids.
    """
    n_bag = bag.size
    p = X.shape[1]
    max_nodes = 2 * n_bag + 1
    feature = np.full(max_nodes, -1, np.int32)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    start = np.zeros(max_nodes, np.int64)
    end = np.zeros(max_nodes, np.int64)
    idx = bag.astype(np.int64).copy()
    buf = np.empty(n_bag, np.int64)
    feats = np.arange(p)
    state = np.empty(1, np.uint64)
    state[0] = np.uint64(seed)

    ys_buf = np.empty(n_bag)
    xs_buf = np.empty(n_bag)
    stack = np.empty(max_nodes, np.int64)
    stack[0] = 0
    top = 1
    end[0] = n_bag
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start[node]
        e = end[node]
        m = e - s
        if m < 2 * min_leaf:
            continue
        ys = ys_buf[:m]
        total = 0.0
        constant = True
        for k in range(m):
            ys[k] = y[idx[s + k]]
            total += ys[k]
            if ys[k] != ys[0]:
                constant = False
        if constant:
            continue
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        xs = xs_buf[:m]
        for k in range(mtry):
            r = k + _randbelow(state, p - k)
            tmp = feats[k]
            feats[k] = feats[r]
            feats[r] = tmp
            f = feats[k]
            for i in range(m):
                xs[i] = X[idx[s + i], f]
            order = np.argsort(xs)
            cum = 0.0
            for i in range(m - 1):
                cum += ys[order[i]]
                nl = i + 1
                if nl < min_leaf:
                    continue
                if m - nl < min_leaf:
                    break
                a = xs[order[i]]
                b = xs[order[i + 1]]
                if a == b:
                    continue
                nr = m - nl
                gain = cum * cum / nl + (total - cum) * (total - cum) / nr - total * total / m
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    best_thr = thr
        if best_f < 0:
            continue
        nl = 0
        nr = 0
        for k in range(s, e):
            r = idx[k]
            if X[r, best_f] <= best_thr:
                idx[s + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for k in range(nr):
            idx[s + nl + k] = buf[k]
        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s
        end[lc] = s + nl
        start[rc] = s + nl
        end[rc] = e
        stack[top] = rc
        stack[top + 1] = lc
        top += 2

    leaf_start = np.full(n_nodes, -1, np.int64)
    leaf_len = np.zeros(n_nodes, np.int64)
    members = np.empty(n_bag, np.int64)
    pos = 0
    for node in range(n_nodes):
        if feature[node] >= 0:
            continue
        seg = np.sort(idx[start[node]:end[node]])
        leaf_start[node] = pos
        for k in range(seg.size):
            if k == 0 or seg[k] != seg[k - 1]:
                members[pos] = seg[k]
                pos += 1
        leaf_len[node] = pos - leaf_start[node]
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            leaf_start, leaf_len, members[:pos].copy())


@njit(cache=True)
def _find_leaf(feature, threshold, left, right, base, x):
    node = base
    while feature[node] >= 0:
        if x[feature[node]] <= threshold[node]:
            node = base + left[node]
        else:
            node = base + right[node]
    return node


@njit(cache=True, nogil=True)
def forest_weights(feature, threshold, left, right, leaf_start, leaf_len, members,
                   node_offset, member_offset, x, n_train):
    """Dense weights over training rows for one query (they sum to one)."""
    n_trees = node_offset.size - 1
    w = np.zeros(n_train)
    for t in range(n_trees):
        leaf = _find_leaf(feature, threshold, left, right, node_offset[t], x)
        a = member_offset[t] + leaf_start[leaf]
        inc = 1.0 / leaf_len[leaf]
        for k in range(leaf_len[leaf]):
            w[members[a + k]] += inc
    for i in range(n_train):
        w[i] /= n_trees
    return w


@njit(cache=True, nogil=True)
def forest_quantiles(feature, threshold, left, right, leaf_start, leaf_len, members,
                     node_offset, member_offset, Xq, y, order, levels):
    """Weighted-ECDF quantiles for every query row.

    ``order`` sorts the training targets ascending; ``levels`` ascending.
    """
    n_trees = node_offset.size - 1
    n_train = y.size
    out = np.empty((Xq.shape[0], levels.size))
    w = np.zeros(n_train)
    for q in range(Xq.shape[0]):
        w[:] = 0.0
        for t in range(n_trees):
            leaf = _find_leaf(feature, threshold, left, right, node_offset[t], Xq[q])
            a = member_offset[t] + leaf_start[leaf]
            inc = 1.0 / leaf_len[leaf]
            for k in range(leaf_len[leaf]):
                w[members[a + k]] += inc
        j = 0
        cum = 0.0
        for k in range(n_train):
            cum += w[order[k]]
            while j < levels.size and cum >= (levels[j] - QUANTILE_TOL) * n_trees:
                out[q, j] = y[order[k]]
                j += 1
            if j == levels.size:
                break
        while j < levels.size:
            out[q, j] = y[order[n_train - 1]]
            j += 1
    return out


# --------------------------------------------------------- histogram boosting

@njit(cache=True)
def _best_split(codes, n_bins, g, idx, s, e, feats, hist_g, hist_n, min_data):
    """Best (gain, feature, bin) for rows idx[s:e]; feature -1 if none valid."""
    m = e - s
    total = 0.0
    for k in range(s, e):
        total += g[idx[k]]
    parent = total * total / m
    best_gain = -1.0
    best_f = -1
    best_b = -1
    for fi in range(feats.size):
        f = feats[fi]
        nb = n_bins[f]
        if nb < 2:
            continue
        for b in range(nb):
            hist_g[b] = 0.0
            hist_n[b] = 0
        for k in range(s, e):
            r = idx[k]
            b = codes[f, r]
            hist_g[b] += g[r]
            hist_n[b] += 1
        gl = 0.0
        nl = 0
        for b in range(nb - 1):
            gl += hist_g[b]
            nl += hist_n[b]
            if nl < min_data:
                continue
            nr = m - nl
            if nr < min_data:
                break
            if hist_n[b] == 0:
                continue
            gr = total - gl
            gain = gl * gl / nl + gr * gr / nr - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_b = b
    return best_gain, best_f, best_b


@njit(cache=True, nogil=True)
def grow_hist_tree(codes, n_bins, g, rows, feats, leafwise, max_leaves, max_depth,
                   min_data, min_gain):
    """Grow one gradient tree on binned features.

    ``leafwise`` expands the open leaf with the largest gain next; otherwise
    leaves are expanded in creation order, which yields level-wise growth.
    Returns node arrays, the row partition ``idx`` and each node's slice.
    """
    max_nodes = 2 * max_leaves - 1
    feature = np.full(max_nodes, -1, np.int32)
    split_bin = np.full(max_nodes, -1, np.int32)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    depth = np.zeros(max_nodes, np.int32)
    start = np.zeros(max_nodes, np.int64)
    end = np.zeros(max_nodes, np.int64)
    gain = np.zeros(max_nodes)
    cand_gain = np.full(max_nodes, -1.0)
    cand_f = np.full(max_nodes, -1, np.int32)
    cand_b = np.full(max_nodes, -1, np.int32)
    open_ = np.zeros(max_nodes, np.bool_)

    max_nb = 1
    for f in range(n_bins.size):
        if n_bins[f] > max_nb:
            max_nb = n_bins[f]
    hist_g = np.zeros(max_nb)
    hist_n = np.zeros(max_nb, np.int64)
    idx = rows.astype(np.int64).copy()
    buf = np.empty(idx.size, np.int64)

    end[0] = idx.size
    n_nodes = 1
    open_[0] = True
    if max_depth > 0 and idx.size >= 2 * min_data:
        cg, cf, cb = _best_split(codes, n_bins, g, idx, 0, idx.size, feats, hist_g, hist_n, min_data)
        cand_gain[0] = cg
        cand_f[0] = cf
        cand_b[0] = cb
    n_leaves = 1
    while n_leaves < max_leaves:
        node = -1
        for k in range(n_nodes):
            if not open_[k] or cand_f[k] < 0 or not cand_gain[k] > min_gain:
                continue
            if not leafwise:
                node = k
                break
            if node < 0 or cand_gain[k] > cand_gain[node]:
                node = k
        if node < 0:
            break
        f = cand_f[node]
        b = cand_b[node]
        s = start[node]
        e = end[node]
        nl = 0
        nr = 0
        for k in range(s, e):
            r = idx[k]
            if codes[f, r] <= b:
                idx[s + nl] = r
                nl += 1
            else:
                buf[nr] = r
                nr += 1
        for k in range(nr):
            idx[s + nl + k] = buf[k]
        feature[node] = f
        split_bin[node] = b
        gain[node] = cand_gain[node]
        open_[node] = False
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start[lc] = s
        end[lc] = s + nl
        start[rc] = s + nl
        end[rc] = e
        n_leaves += 1
        for c in (lc, rc):
            depth[c] = depth[node] + 1
            open_[c] = True
            if depth[c] < max_depth and end[c] - start[c] >= 2 * min_data:
                cg, cf, cb = _best_split(codes, n_bins, g, idx, start[c], end[c], feats,
                                         hist_g, hist_n, min_data)
                cand_gain[c] = cg
                cand_f[c] = cf
                cand_b[c] = cb
    return (feature[:n_nodes], split_bin[:n_nodes], left[:n_nodes], right[:n_nodes],
            gain[:n_nodes], idx, start[:n_nodes], end[:n_nodes])


@njit(cache=True, nogil=True)
def renew_leaves(feature, idx, start, end, resid, alpha):
    """Per-leaf lower alpha-quantile of the residuals of the rows in that leaf."""
    values = np.zeros(feature.size)
    for node in range(feature.size):
        if feature[node] >= 0:
            continue
        m = end[node] - start[node]
        v = np.empty(m)
        for k in range(m):
            v[k] = resid[idx[start[node] + k]]
        values[node] = lower_quantile_sorted(np.sort(v), alpha)
    return values


@njit(cache=True, nogil=True)
def route_codes(feature, split_bin, left, right, base, codes, out_leaf):
    """Leaf (absolute node id) reached by every column of ``codes``."""
    for r in range(codes.shape[1]):
        node = base
        while feature[node] >= 0:
            if codes[feature[node], r] <= split_bin[node]:
                node = base + left[node]
            else:
                node = base + right[node]
        out_leaf[r] = node


@njit(cache=True, nogil=True)
def boost_predict(feature, split_bin, left, right, value, node_offset, codes, base_prediction):
    n = codes.shape[1]
    out = np.full(n, base_prediction)
    for t in range(node_offset.size - 1):
        base = node_offset[t]
        for r in range(n):
            node = base
            while feature[node] >= 0:
                if codes[feature[node], r] <= split_bin[node]:
                    node = base + left[node]
                else:
                    node = base + right[node]
            out[r] += value[node]
    return out
