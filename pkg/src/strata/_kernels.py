"""Numba kernels for the tree learner.

Split finding is level-wise: one pass over a feature's presorted
non-sentinel entries evaluates every candidate threshold of every node on
the current level at once.  Features are scanned in parallel, each writing
its own slot, and the reduction runs serially in feature order so results do
not depend on the thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _score(G, H, lam, alpha):
    if alpha > 0.0:
        if G > alpha:
            G = G - alpha
        elif G < -alpha:
            G = G + alpha
        else:
            return 0.0
    d = H + lam
    if d <= 0.0:
        return 0.0
    return G * G / d


@njit(cache=True)
def leaf_weight(G, H, lam, alpha):
    if alpha > 0.0:
        if G > alpha:
            G = G - alpha
        elif G < -alpha:
            G = G + alpha
        else:
            return 0.0
    d = H + lam
    if d <= 0.0:
        return 0.0
    return -G / d


@njit(cache=True, inline="always")
def _gain(gl, hl, cl, gr, hr, cr, parent, lam, alpha, mcw):
    if cl < 1 or cr < 1 or hl < mcw or hr < mcw:
        return -np.inf
    return 0.5 * (_score(gl, hl, lam, alpha) + _score(gr, hr, lam, alpha) - parent)


@njit(cache=True)
def scan_feature(rows, vals, row_node, g, h, n_nodes, Gt, Ht, Ct,
                 lam, alpha, mcw, sentinel, out_gain, out_thr, out_dleft):
    """Best split of one feature for every node of the level.

    Each threshold is scored twice, once with the sentinel rows sent right
    and once sent left; ties keep the right routing.  A final candidate puts
    every non-sentinel row left and the sentinel rows right.
    """
    Gn = np.zeros(n_nodes)
    Hn = np.zeros(n_nodes)
    Cn = np.zeros(n_nodes, dtype=np.int64)
    for k in range(rows.shape[0]):
        r = rows[k]
        nd = row_node[r]
        if nd >= 0:
            Gn[nd] += g[r]
            Hn[nd] += h[r]
            Cn[nd] += 1
    parent = np.empty(n_nodes)
    for nd in range(n_nodes):
        parent[nd] = _score(Gt[nd], Ht[nd], lam, alpha)
        out_gain[nd] = -np.inf
    GL = np.zeros(n_nodes)
    HL = np.zeros(n_nodes)
    CL = np.zeros(n_nodes, dtype=np.int64)
    last = np.zeros(n_nodes)
    for k in range(rows.shape[0]):
        r = rows[k]
        nd = row_node[r]
        if nd < 0:
            continue
        v = vals[k]
        if CL[nd] > 0 and v != last[nd]:
            thr = 0.5 * (last[nd] + v)
            # sentinel rows right
            gr = _gain(GL[nd], HL[nd], CL[nd], Gt[nd] - GL[nd], Ht[nd] - HL[nd],
                       Ct[nd] - CL[nd], parent[nd], lam, alpha, mcw)
            # sentinel rows left
            gm = Gt[nd] - Gn[nd]
            hm = Ht[nd] - Hn[nd]
            cm = Ct[nd] - Cn[nd]
            gl = _gain(GL[nd] + gm, HL[nd] + hm, CL[nd] + cm, Gn[nd] - GL[nd],
                       Hn[nd] - HL[nd], Cn[nd] - CL[nd], parent[nd], lam, alpha, mcw)
            if gr >= gl:
                if gr > out_gain[nd]:
                    out_gain[nd] = gr
                    out_thr[nd] = thr
                    out_dleft[nd] = False
            elif gl > out_gain[nd]:
                out_gain[nd] = gl
                out_thr[nd] = thr
                out_dleft[nd] = True
        GL[nd] += g[r]
        HL[nd] += h[r]
        CL[nd] += 1
        last[nd] = v
    for nd in range(n_nodes):
        cm = Ct[nd] - Cn[nd]
        if Cn[nd] > 0 and cm > 0:
            gp = _gain(Gn[nd], Hn[nd], Cn[nd], Gt[nd] - Gn[nd], Ht[nd] - Hn[nd], cm,
                       parent[nd], lam, alpha, mcw)
            if gp > out_gain[nd]:
                out_gain[nd] = gp
                out_thr[nd] = sentinel
                out_dleft[nd] = False


@njit(cache=True, parallel=True)
def level_splits(col_ptr, col_rows, col_vals, feats, row_node, g, h, n_nodes,
                 Gt, Ht, Ct, lam, alpha, mcw, sentinel):
    nf = feats.shape[0]
    gain = np.empty((nf, n_nodes))
    thr = np.zeros((nf, n_nodes))
    dleft = np.zeros((nf, n_nodes), dtype=np.bool_)
    for k in prange(nf):
        f = feats[k]
        lo = col_ptr[f]
        hi = col_ptr[f + 1]
        scan_feature(col_rows[lo:hi], col_vals[lo:hi], row_node, g, h, n_nodes, Gt, Ht, Ct,
                     lam, alpha, mcw, sentinel, gain[k], thr[k], dleft[k])
    best_gain = np.full(n_nodes, -np.inf)
    best_feat = np.full(n_nodes, -1, dtype=np.int64)
    best_thr = np.zeros(n_nodes)
    best_dleft = np.zeros(n_nodes, dtype=np.bool_)
    for nd in range(n_nodes):
        for k in range(nf):
            if gain[k, nd] > best_gain[nd]:
                best_gain[nd] = gain[k, nd]
                best_feat[nd] = feats[k]
                best_thr[nd] = thr[k, nd]
                best_dleft[nd] = dleft[k, nd]
    return best_gain, best_feat, best_thr, best_dleft


@njit(cache=True)
def route_rows(X, row_node, split_feat, split_thr, split_dleft, left_pos, right_pos, sentinel):
    for r in range(row_node.shape[0]):
        nd = row_node[r]
        if nd < 0:
            continue
        f = split_feat[nd]
        if f < 0:
            row_node[r] = -1
            continue
        x = X[r, f]
        if x == sentinel:
            go_left = split_dleft[nd]
        else:
            go_left = x < split_thr[nd]
        row_node[r] = left_pos[nd] if go_left else right_pos[nd]


@njit(cache=True)
def leaf_index(X, feature, thr, dleft, left, right, offset, sentinel):
    """Node id reached by every row in one tree (nodes start at ``offset``)."""
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for r in range(n):
        node = 0
        while feature[offset + node] >= 0:
            i = offset + node
            x = X[r, feature[i]]
            if x == sentinel:
                go_left = dleft[i]
            else:
                go_left = x < thr[i]
            node = left[i] if go_left else right[i]
        out[r] = node
    return out


@njit(cache=True)
def predict_margin(X, feature, thr, dleft, left, right, value, offsets, base, lr, sentinel):
    n = X.shape[0]
    out = np.empty(n)
    for r in range(n):
        m = base
        for t in range(offsets.shape[0] - 1):
            o = offsets[t]
            node = 0
            while feature[o + node] >= 0:
                i = o + node
                x = X[r, feature[i]]
                if x == sentinel:
                    go_left = dleft[i]
                else:
                    go_left = x < thr[i]
                node = left[i] if go_left else right[i]
            m += lr * value[o + node]
        out[r] = m
    return out


@njit(cache=True)
def path_contributions(X, feature, thr, dleft, left, right, expected, offsets, lr,
                       sentinel, n_features):
    n = X.shape[0]
    out = np.zeros((n, n_features))
    for r in range(n):
        for t in range(offsets.shape[0] - 1):
            o = offsets[t]
            node = 0
            while feature[o + node] >= 0:
                i = o + node
                f = feature[i]
                x = X[r, f]
                if x == sentinel:
                    go_left = dleft[i]
                else:
                    go_left = x < thr[i]
                child = left[i] if go_left else right[i]
                out[r, f] += lr * (expected[o + child] - expected[i])
                node = child
    return out


@njit(cache=True)
def interventional_shap(X, Z, feature, thr, dleft, value, leaf_node, path_ptr, path_node,
                        path_left, lr, sentinel, n_features, weights):
    """Shapley values of each row of ``X`` against every background row of ``Z``.

    Works leaf by leaf: along a leaf's path every feature either admits the
    foreground value, the background value, both or neither.  A leaf that
    needs foreground values for features ``A`` and background values for
    ``B`` credits ``weights[|A|-1, |B|]`` of its value to each feature of
    ``A`` and debits ``weights[|A|, |B|-1]`` from each feature of ``B``.
    Results are averaged over the background rows.
    """
    n = X.shape[0]
    m = Z.shape[0]
    out = np.zeros((n, n_features))
    max_len = 0
    for L in range(leaf_node.shape[0]):
        max_len = max(max_len, path_ptr[L + 1] - path_ptr[L])
    feats = np.empty(max_len + 1, dtype=np.int64)
    okx = np.empty(max_len + 1, dtype=np.bool_)
    okz = np.empty(max_len + 1, dtype=np.bool_)
    for r in range(n):
        for b in range(m):
            for L in range(leaf_node.shape[0]):
                k = 0
                dead = False
                for q in range(path_ptr[L], path_ptr[L + 1]):
                    node = path_node[q]
                    f = feature[node]
                    xv = X[r, f]
                    zv = Z[b, f]
                    gx = dleft[node] if xv == sentinel else xv < thr[node]
                    gz = dleft[node] if zv == sentinel else zv < thr[node]
                    want = path_left[q]
                    slot = -1
                    for s in range(k):
                        if feats[s] == f:
                            slot = s
                            break
                    if slot < 0:
                        slot = k
                        feats[k] = f
                        okx[k] = True
                        okz[k] = True
                        k += 1
                    okx[slot] = okx[slot] and gx == want
                    okz[slot] = okz[slot] and gz == want
                    if not okx[slot] and not okz[slot]:
                        dead = True
                        break
                if dead:
                    continue
                na = 0
                nb = 0
                for s in range(k):
                    if okx[s] and not okz[s]:
                        na += 1
                    elif okz[s] and not okx[s]:
                        nb += 1
                if na + nb == 0:
                    continue
                v = lr * value[leaf_node[L]] / m
                for s in range(k):
                    if okx[s] and not okz[s]:
                        out[r, feats[s]] += v * weights[na - 1, nb]
                    elif okz[s] and not okx[s]:
                        out[r, feats[s]] -= v * weights[na, nb - 1]
    return out
