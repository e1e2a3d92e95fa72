"""Primal network simplex for the balanced transportation problem.

Nodes 0..n1-1 are sources, n1..n1+n2-1 sinks, n1+n2 the artificial root.
Arc e < n1*n2 joins source e // n2 to sink e % n2; arc n1*n2 + k is the
artificial arc between node k and the root. All arcs are uncapacitated, so
only spanning-tree arcs ever carry flow and the flow of the tree arc above
node k is stored at ``flow[k]``. Leaving arcs follow the strongly feasible
tree rule, which rules out cycling under degenerate pivots.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _arc_cost(e, C, n2, E, art):
    if e < E:
        return C[e // n2, e % n2]
    return art


@njit(cache=True)
def _refresh(root, N, parent, pred, up, C, n2, E, art, pi, depth, child_start, child_list, queue):
    # rebuild child lists (counting sort on parent) and relabel potentials/depths
    for k in range(N + 1):
        child_start[k] = 0
    for k in range(N):
        if k != root:
            child_start[parent[k] + 1] += 1
    for k in range(N):
        child_start[k + 1] += child_start[k]
    fill = child_start[:N].copy()
    for k in range(N):
        if k != root:
            p = parent[k]
            child_list[fill[p]] = k
            fill[p] += 1
    head = 0
    tail = 1
    queue[0] = root
    pi[root] = 0.0
    depth[root] = 0
    while head < tail:
        p = queue[head]
        head += 1
        for idx in range(child_start[p], child_start[p + 1]):
            k = child_list[idx]
            c = _arc_cost(pred[k], C, n2, E, art)
            if up[k]:
                pi[k] = pi[p] - c
            else:
                pi[k] = pi[p] + c
            depth[k] = depth[p] + 1
            queue[tail] = k
            tail += 1


@njit(cache=True)
def network_simplex(a, b, C, max_pivots):
    """Returns (cost, status, n_pivots, parent, pred, flow).

    status: 0 optimal, 1 pivot limit reached.
    """
    n1 = a.shape[0]
    n2 = b.shape[0]
    E = n1 * n2
    N = n1 + n2 + 1
    root = n1 + n2
    cmax = 0.0
    for i in range(n1):
        for j in range(n2):
            if abs(C[i, j]) > cmax:
                cmax = abs(C[i, j])
    art = (cmax + 1.0) * (N + 1)
    tol = 1e-13 * art

    parent = np.empty(N, np.int64)
    pred = np.empty(N, np.int64)
    up = np.zeros(N, np.bool_)
    flow = np.zeros(N, np.float64)
    pi = np.zeros(N, np.float64)
    depth = np.zeros(N, np.int64)
    child_start = np.zeros(N + 1, np.int64)
    child_list = np.zeros(N, np.int64)
    queue = np.zeros(N, np.int64)

    parent[root] = -1
    pred[root] = -1
    for i in range(n1):
        parent[i] = root
        pred[i] = E + i
        up[i] = True
        flow[i] = a[i]
    for j in range(n2):
        k = n1 + j
        parent[k] = root
        pred[k] = E + k
        up[k] = False
        flow[k] = b[j]
    _refresh(root, N, parent, pred, up, C, n2, E, art, pi, depth, child_start, child_list, queue)

    block = max(int(np.sqrt(E)), 10)
    if block > E:
        block = E
    next_arc = 0
    status = 0
    pivots = 0
    while True:
        # block pricing
        best = -tol
        in_arc = -1
        cnt = 0
        scanned = 0
        e = next_arc
        while scanned < E:
            i = e // n2
            j = e - i * n2
            rc = C[i, j] + pi[i] - pi[n1 + j]
            if rc < best:
                best = rc
                in_arc = e
            e += 1
            if e == E:
                e = 0
            cnt += 1
            scanned += 1
            if cnt == block:
                if in_arc >= 0:
                    break
                cnt = 0
        if in_arc < 0:
            break
        next_arc = e
        if pivots >= max_pivots:
            status = 1
            break
        pivots += 1

        first = in_arc // n2
        second = n1 + (in_arc - first * n2)
        # join node
        u = first
        v = second
        while u != v:
            if depth[u] > depth[v]:
                u = parent[u]
            elif depth[v] > depth[u]:
                v = parent[v]
            else:
                u = parent[u]
                v = parent[v]
        join = u

        delta = np.inf
        u_out = -1
        side = 0
        w = first
        while w != join:
            if up[w]:
                d = flow[w] if flow[w] > 0.0 else 0.0
                if d < delta:
                    delta = d
                    u_out = w
                    side = 1
            w = parent[w]
        w = second
        while w != join:
            if not up[w]:
                d = flow[w] if flow[w] > 0.0 else 0.0
                if d <= delta:
                    delta = d
                    u_out = w
                    side = 2
            w = parent[w]

        # push delta around the cycle
        if delta > 0.0:
            w = first
            while w != join:
                if up[w]:
                    flow[w] -= delta
                else:
                    flow[w] += delta
                w = parent[w]
            w = second
            while w != join:
                if up[w]:
                    flow[w] += delta
                else:
                    flow[w] -= delta
                w = parent[w]

        # re-hang the path from the entering endpoint up to u_out
        if side == 1:
            start = first
            new_par = second
            new_up = True
        else:
            start = second
            new_par = first
            new_up = False
        w = start
        carry_par = new_par
        carry_pred = in_arc
        carry_up = new_up
        carry_flow = delta
        while True:
            old_par = parent[w]
            old_pred = pred[w]
            old_up = up[w]
            old_flow = flow[w]
            parent[w] = carry_par
            pred[w] = carry_pred
            up[w] = carry_up
            flow[w] = carry_flow
            if w == u_out:
                break
            carry_par = w
            carry_pred = old_pred
            carry_up = not old_up
            carry_flow = old_flow
            w = old_par
        _refresh(root, N, parent, pred, up, C, n2, E, art, pi, depth, child_start, child_list, queue)

    cost = 0.0
    for k in range(N):
        if k != root and pred[k] < E and flow[k] > 0.0:
            e = pred[k]
            cost += flow[k] * C[e // n2, e % n2]
    return cost, status, pivots, parent, pred, flow
