"""Exact solver for the uncapacitated transportation problem.

Primal network simplex on the spanning-tree basis of the bipartite
transportation polytope: block pricing, strongly feasible trees (first-path
strict / second-path non-strict leaving-arc rule), artificial root arcs with
a large cost for the initial basis.  Flows and potentials are recomputed from
the optimal basis tree before returning, so the reported plan and duals carry
no accumulated pivot drift.

Only the spanning tree is stored node-wise (parent / pred-arc / orientation /
subtree size / child lists); the per-arc state array is the single O(n*m)
side structure besides the cost matrix itself.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_LOWER = 0
_TREE = 1


@njit(cache=True)
def _detach(w, parent, child, nsib, psib):
    ps = psib[w]
    ns = nsib[w]
    if ps >= 0:
        nsib[ps] = ns
    else:
        child[parent[w]] = ns
    if ns >= 0:
        psib[ns] = ps


@njit(cache=True)
def _attach(w, p, parent, child, nsib, psib):
    c = child[p]
    nsib[w] = c
    psib[w] = -1
    if c >= 0:
        psib[c] = w
    child[p] = w
    parent[w] = p


@njit(cache=True)
def _ns_solve(n, m, a, b, C):
    """Returns (status, tree_node_arcs, tree_node_flows, pi, n_pivots).

    status 0 = optimal, 1 = degenerate structure error, 2 = pivot cap hit.
    Tree arcs are reported per non-root node w: arc id pred[w], flow on it.
    """
    V = n + m + 1
    root = n + m
    E = n * m

    parent = np.empty(V, np.int32)
    pred = np.empty(V, np.int32)
    fwd = np.empty(V, np.uint8)
    succ = np.empty(V, np.int64)
    child = np.full(V, -1, np.int32)
    nsib = np.full(V, -1, np.int32)
    psib = np.full(V, -1, np.int32)
    pi = np.empty(V, np.float64)
    fnode = np.zeros(V, np.float64)  # flow on pred[w], keyed by node
    state = np.zeros(E, np.uint8)
    path = np.empty(V, np.int32)
    oldsucc = np.empty(V, np.int64)
    stack = np.empty(V, np.int32)

    cmax = 0.0
    for k in range(E):
        ck = C[k]
        if ck > cmax:
            cmax = ck
    art = (cmax + 1.0) * V

    parent[root] = -1
    pred[root] = -1
    fwd[root] = 0
    succ[root] = V
    pi[root] = 0.0
    child[root] = 0
    for q in range(V - 1):
        parent[q] = root
        pred[q] = E + q
        succ[q] = 1
        nsib[q] = q + 1 if q + 1 < V - 1 else -1
        psib[q] = q - 1
    for i in range(n):
        fwd[i] = 1
        pi[i] = art
        fnode[i] = a[i]
    for j in range(m):
        q = n + j
        fwd[q] = 0
        pi[q] = -art
        fnode[q] = b[j]

    block = int(np.sqrt(E)) + 1
    if block < 64:
        block = 64
    if block > E:
        block = E
    cursor = 0
    max_piv = 200 * V + 20 * E  # far beyond observed pivot counts
    n_piv = 0

    while True:
        # ---- pricing: block search for most negative reduced cost ----
        e_in = -1
        best = 0.0
        scanned = 0
        k = cursor
        i = k // m
        col = k - i * m
        pi_i = pi[i]
        while scanned < E:
            cnt = block
            if cnt > E - scanned:
                cnt = E - scanned
            for _ in range(cnt):
                if state[k] == _LOWER:
                    rc = C[k] - pi_i + pi[n + col]
                    if rc < best:
                        best = rc
                        e_in = k
                k += 1
                col += 1
                if col == m:
                    col = 0
                    i += 1
                    if k == E:
                        k = 0
                        i = 0
                    pi_i = pi[i]
            scanned += cnt
            if e_in >= 0:
                break
        if e_in < 0:
            break  # optimal
        cursor = k
        n_piv += 1
        if n_piv > max_piv:
            return 2, pred, fnode, pi, n_piv

        v_src = e_in // m
        v_tgt = n + (e_in - v_src * m)

        # ---- join of the two tree paths ----
        u = v_src
        v = v_tgt
        while u != v:
            su = succ[u]
            sv = succ[v]
            if su < sv:
                u = parent[u]
            elif sv < su:
                v = parent[v]
            else:
                u = parent[u]
                v = parent[v]
        join = u

        # ---- leaving arc (strongly feasible rule) ----
        delta = np.inf
        w_out = -1
        out_side = 0
        w = v_src
        while w != join:
            if fwd[w]:
                f = fnode[w]
                if f < delta:
                    delta = f
                    w_out = w
                    out_side = 1
            w = parent[w]
        w = v_tgt
        while w != join:
            if not fwd[w]:
                f = fnode[w]
                if f <= delta:
                    delta = f
                    w_out = w
                    out_side = 2
            w = parent[w]
        if w_out < 0:
            return 1, pred, fnode, pi, n_piv

        # ---- push delta around the cycle ----
        if delta != 0.0:
            w = v_src
            while w != join:
                if fwd[w]:
                    fnode[w] -= delta
                else:
                    fnode[w] += delta
                w = parent[w]
            w = v_tgt
            while w != join:
                if fwd[w]:
                    fnode[w] += delta
                else:
                    fnode[w] -= delta
                w = parent[w]

        # ---- tree update ----
        if out_side == 1:
            x = v_src
            y = v_tgt
        else:
            x = v_tgt
            y = v_src
        e_out = pred[w_out]
        rc_in = C[e_in] - pi[v_src] + pi[v_tgt]

        klen = 0
        w = x
        while True:
            path[klen] = w
            klen += 1
            if w == w_out:
                break
            w = parent[w]

        szS = succ[w_out]
        p_out = parent[w_out]

        # subtree sizes along both outside chains
        w = p_out
        while w >= 0:
            succ[w] -= szS
            w = parent[w]
        w = y
        while w >= 0:
            succ[w] += szS
            w = parent[w]

        # subtree sizes along the reversed path
        for idx in range(klen):
            oldsucc[idx] = succ[path[idx]]
        succ[x] = szS
        for idx in range(1, klen):
            succ[path[idx]] = szS - oldsucc[idx - 1]

        # reverse parent pointers x .. w_out, attach x under y
        prev = y
        e_prev = e_in
        fwd_prev = 1 if x == v_src else 0
        f_prev = delta
        cur = x
        cur_par = parent[cur]
        cur_e = pred[cur]
        cur_fwd = fwd[cur]
        cur_f = fnode[cur]
        while True:
            _detach(cur, parent, child, nsib, psib)
            _attach(cur, prev, parent, child, nsib, psib)
            pred[cur] = e_prev
            fwd[cur] = fwd_prev
            fnode[cur] = f_prev
            if cur == w_out:
                break
            nxt = cur_par
            nxt_par = parent[nxt]
            nxt_e = pred[nxt]
            nxt_fwd = fwd[nxt]
            nxt_f = fnode[nxt]
            e_prev = cur_e
            fwd_prev = 1 - cur_fwd
            f_prev = cur_f
            prev = cur
            cur = nxt
            cur_par = nxt_par
            cur_e = nxt_e
            cur_fwd = nxt_fwd
            cur_f = nxt_f

        state[e_in] = _TREE
        if e_out < E:
            state[e_out] = _LOWER

        # potential shift over the re-hung subtree
        dlt = rc_in if x == v_src else -rc_in
        top = 0
        stack[top] = x
        top = 1
        while top > 0:
            top -= 1
            w = stack[top]
            pi[w] += dlt
            c = child[w]
            while c >= 0:
                stack[top] = c
                top += 1
                c = nsib[c]

    # ---- recompute flows and potentials exactly from the final tree ----
    order = np.empty(V, np.int32)
    top = 0
    stack[top] = root
    top = 1
    cnt = 0
    while top > 0:
        top -= 1
        w = stack[top]
        order[cnt] = w
        cnt += 1
        c = child[w]
        while c >= 0:
            stack[top] = c
            top += 1
            c = nsib[c]
    excess = np.empty(V, np.float64)
    for i in range(n):
        excess[i] = a[i]
    for j in range(m):
        excess[n + j] = -b[j]
    excess[root] = 0.0
    for idx in range(V - 1, -1, -1):
        w = order[idx]
        if w == root:
            continue
        ex = excess[w]
        if fwd[w]:
            fnode[w] = ex
        else:
            fnode[w] = -ex
        excess[parent[w]] += ex
    # potentials: DFS from root, pi fixed by zero reduced cost on tree arcs
    pi[root] = 0.0
    top = 0
    stack[top] = root
    top = 1
    while top > 0:
        top -= 1
        w = stack[top]
        if w != root:
            e = pred[w]
            ce = C[e] if e < E else art
            if fwd[w]:
                pi[w] = pi[parent[w]] + ce
            else:
                pi[w] = pi[parent[w]] - ce
        c = child[w]
        while c >= 0:
            stack[top] = c
            top += 1
            c = nsib[c]

    return 0, pred, fnode, pi, n_piv


@njit(cache=True)
def _max_dual_violation(n, m, C, u, w):
    worst = -np.inf
    k = 0
    for i in range(n):
        ui = u[i]
        for j in range(m):
            viol = ui + w[j] - C[k]
            if viol > worst:
                worst = viol
            k += 1
    return worst


def solve_transport(a, b, cost):
    """Exact min-cost transport between weighted atom sets.

    a : (n,) positive supplies, b : (m,) positive demands, cost : (n, m).
    Demands are rescaled (and the largest entry nudged by the float residual)
    so both sides sum to exactly the same float64 total.

    Returns dict with value, plan rows/cols/flows (sparse), duals (u, w) in
    the gauge u[0] = 0, and the pivot count.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = cost.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError("supply/demand shapes do not match cost matrix")
    if n == 0 or m == 0:
        raise ValueError("empty marginal")
    if not (np.all(a > 0) and np.all(b > 0)):
        raise ValueError("supplies and demands must be strictly positive")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(cost))):
        raise ValueError("non-finite input")
    sa = a.sum()
    sb = b.sum()
    if abs(sa - sb) > 1e-6 * max(sa, sb):
        raise ValueError("total supply and demand differ beyond tolerance")
    b = b * (sa / sb)
    resid = sa - b.sum()
    b[np.argmax(b)] += resid

    status, pred, fnode, pi, n_piv = _ns_solve(n, m, a, b, cost.ravel())
    if status != 0:
        raise RuntimeError(f"network simplex failed with status {status}")

    E = n * m
    rows = []
    cols = []
    flows = []
    art_flow = 0.0
    for w in range(n + m):
        e = int(pred[w])
        f = float(fnode[w])
        if e >= E:
            art_flow = max(art_flow, abs(f))
            continue
        if f < 0.0:
            if f < -1e-9 * max(1.0, sa):
                raise RuntimeError("negative basic flow from tree recomputation")
            f = 0.0
        if f > 0.0:
            rows.append(e // m)
            cols.append(e - (e // m) * m)
            flows.append(f)
    if art_flow > 1e-9 * max(1.0, sa):
        raise RuntimeError("artificial arc carries flow at optimum")

    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    flows = np.asarray(flows, dtype=np.float64)
    u = pi[:n] - pi[0]
    w_dual = -(pi[n:n + m] - pi[0])
    value = float(np.sum(flows * cost[rows, cols]))
    return {
        "value": value,
        "rows": rows,
        "cols": cols,
        "flows": flows,
        "u": u,
        "w": w_dual,
        "n_pivots": int(n_piv),
    }


def max_dual_violation(cost, u, w):
    """max over (i, j) of u_i + w_j - cost_ij (<= tol means dual feasible)."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = cost.shape
    return float(_max_dual_violation(
        n, m, cost.ravel(),
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
    ))
