from __future__ import annotations

import logging
from functools import lru_cache
from typing import Iterable, Tuple

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

# (dy, dx) per neighbour slot; slot k and REVERSE[k] point at each other
DIRECTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (-1, -1), (1, -1), (-1, 1))
REVERSE = np.array([2, 3, 0, 1, 5, 4, 7, 6], dtype=np.int64)

TERMINAL = -1
ORPHAN = -2
NO_PARENT = -3
FREE = 0
SOURCE_TREE = 1
SINK_TREE = 2
INFINITE_DISTANCE = 1 << 60


@lru_cache(maxsize=16)
def grid_neighbours(height: int, width: int, connectivity: int) -> np.ndarray:
    if connectivity not in (4, 8):
        raise ValueError(f"Connectivity must be 4 or 8, got {connectivity}")
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    nbr = np.full((height * width, connectivity), -1, dtype=np.int64)
    for k, (dy, dx) in enumerate(DIRECTIONS[:connectivity]):
        r = rows + dy
        c = cols + dx
        valid = (r >= 0) & (r < height) & (c >= 0) & (c < width)
        target = np.where(valid, r * width + c, -1)
        nbr[:, k] = target.reshape(-1)
    nbr.setflags(write=False)
    return nbr


def direction_slot(dy: int, dx: int) -> int:
    return DIRECTIONS.index((dy, dx))


@njit(cache=True)
def _push(queue, head, count, in_queue, node):
    n = queue.shape[0]
    queue[(head + count) % n] = node
    in_queue[node] = True
    return count + 1


@njit(cache=True)
def _boykov_kolmogorov(nbr, cap, tr, rev):
    """
    Augmenting paths over two search trees grown from the terminals, with orphan adoption between augmentations.
    cap[v, k] is the residual capacity of v -> nbr[v, k]; tr[v] > 0 is residual source -> v, tr[v] < 0 is residual
    v -> sink. Arrays are modified in place. Returns (tree labels, flow pushed).
    """
    n, degree = nbr.shape
    tree = np.zeros(n, np.int8)
    parent = np.full(n, NO_PARENT, np.int64)
    ts = np.zeros(n, np.int64)
    dist = np.zeros(n, np.int64)
    active = np.empty(n, np.int64)
    in_queue = np.zeros(n, np.bool_)
    head = 0
    count = 0
    orphans = np.empty(n, np.int64)
    o_head = 0
    o_count = 0
    flow = 0.0

    for v in range(n):
        if tr[v] > 0.0:
            tree[v] = SOURCE_TREE
        elif tr[v] < 0.0:
            tree[v] = SINK_TREE
        else:
            continue
        parent[v] = TERMINAL
        dist[v] = 1
        count = _push(active, head, count, in_queue, v)

    time = 0
    while count > 0:
        v = active[head]
        head = (head + 1) % n
        count -= 1
        in_queue[v] = False
        if parent[v] == NO_PARENT:
            continue

        a = -1
        ka = -1
        if tree[v] == SOURCE_TREE:
            for k in range(degree):
                u = nbr[v, k]
                if u < 0 or cap[v, k] <= 0.0:
                    continue
                if tree[u] == FREE:
                    tree[u] = SOURCE_TREE
                    parent[u] = rev[k]
                    ts[u] = ts[v]
                    dist[u] = dist[v] + 1
                    if not in_queue[u]:
                        count = _push(active, head, count, in_queue, u)
                elif tree[u] == SINK_TREE:
                    a = v
                    ka = k
                    break
                elif ts[u] <= ts[v] and dist[u] > dist[v]:
                    parent[u] = rev[k]
                    ts[u] = ts[v]
                    dist[u] = dist[v] + 1
        else:
            for k in range(degree):
                u = nbr[v, k]
                if u < 0 or cap[u, rev[k]] <= 0.0:
                    continue
                if tree[u] == FREE:
                    tree[u] = SINK_TREE
                    parent[u] = rev[k]
                    ts[u] = ts[v]
                    dist[u] = dist[v] + 1
                    if not in_queue[u]:
                        count = _push(active, head, count, in_queue, u)
                elif tree[u] == SOURCE_TREE:
                    a = u
                    ka = rev[k]
                    break
                elif ts[u] <= ts[v] and dist[u] > dist[v]:
                    parent[u] = rev[k]
                    ts[u] = ts[v]
                    dist[u] = dist[v] + 1

        if a < 0:
            continue
        if not in_queue[v]:
            count = _push(active, head, count, in_queue, v)
        time += 1
        b = nbr[a, ka]

        # bottleneck
        delta = cap[a, ka]
        x = a
        while parent[x] != TERMINAL:
            p = parent[x]
            y = nbr[x, p]
            if cap[y, rev[p]] < delta:
                delta = cap[y, rev[p]]
            x = y
        if tr[x] < delta:
            delta = tr[x]
        x = b
        while parent[x] != TERMINAL:
            p = parent[x]
            if cap[x, p] < delta:
                delta = cap[x, p]
            x = nbr[x, p]
        if -tr[x] < delta:
            delta = -tr[x]

        # augment
        cap[a, ka] -= delta
        cap[b, rev[ka]] += delta
        x = a
        while parent[x] != TERMINAL:
            p = parent[x]
            y = nbr[x, p]
            cap[y, rev[p]] -= delta
            cap[x, p] += delta
            if cap[y, rev[p]] <= 0.0:
                parent[x] = ORPHAN
                orphans[(o_head + o_count) % n] = x
                o_count += 1
            x = y
        tr[x] -= delta
        if tr[x] <= 0.0:
            parent[x] = ORPHAN
            orphans[(o_head + o_count) % n] = x
            o_count += 1
        x = b
        while parent[x] != TERMINAL:
            p = parent[x]
            y = nbr[x, p]
            cap[x, p] -= delta
            cap[y, rev[p]] += delta
            if cap[x, p] <= 0.0:
                parent[x] = ORPHAN
                orphans[(o_head + o_count) % n] = x
                o_count += 1
            x = y
        tr[x] += delta
        if tr[x] >= 0.0:
            parent[x] = ORPHAN
            orphans[(o_head + o_count) % n] = x
            o_count += 1
        flow += delta

        # adoption
        while o_count > 0:
            x = orphans[o_head]
            o_head = (o_head + 1) % n
            o_count -= 1
            side = tree[x]
            best = -1
            d_min = INFINITE_DISTANCE
            for k in range(degree):
                y = nbr[x, k]
                if y < 0 or tree[y] != side:
                    continue
                if side == SOURCE_TREE:
                    if cap[y, rev[k]] <= 0.0:
                        continue
                elif cap[x, k] <= 0.0:
                    continue
                j = y
                d = 0
                while True:
                    if ts[j] == time:
                        d += dist[j]
                        break
                    pj = parent[j]
                    d += 1
                    if pj == TERMINAL:
                        ts[j] = time
                        dist[j] = 1
                        break
                    if pj < 0:
                        d = INFINITE_DISTANCE
                        break
                    j = nbr[j, pj]
                if d < INFINITE_DISTANCE:
                    if d < d_min:
                        best = k
                        d_min = d
                    j = y
                    while ts[j] != time:
                        ts[j] = time
                        dist[j] = d
                        d -= 1
                        j = nbr[j, parent[j]]
            if best >= 0:
                parent[x] = best
                ts[x] = time
                dist[x] = d_min + 1
                continue
            for k in range(degree):
                y = nbr[x, k]
                if y < 0 or tree[y] != side:
                    continue
                if side == SOURCE_TREE:
                    residual = cap[y, rev[k]] > 0.0
                else:
                    residual = cap[x, k] > 0.0
                if residual and not in_queue[y]:
                    count = _push(active, head, count, in_queue, y)
                py = parent[y]
                if py >= 0 and nbr[y, py] == x:
                    parent[y] = ORPHAN
                    orphans[(o_head + o_count) % n] = y
                    o_count += 1
            tree[x] = FREE
            parent[x] = NO_PARENT

    return tree, flow


def grid_maxflow(
    source_capacity: np.ndarray,
    sink_capacity: np.ndarray,
    pairwise: Iterable[Tuple[int, int, np.ndarray]],
    connectivity: int = 4,
) -> Tuple[np.ndarray, float]:
    """
    Minimum s-t cut on an (H, W) grid. source_capacity[i, j] is s -> (i, j), sink_capacity[i, j] is (i, j) -> t,
    pairwise yields (dy, dx, weights) with weights[i, j] the symmetric capacity between (i, j) and (i+dy, j+dx).
    Returns the source-side set (nodes reachable from s in the final residual graph) and the max-flow value.
    """
    source_capacity = np.asarray(source_capacity, dtype=np.float64)
    sink_capacity = np.asarray(sink_capacity, dtype=np.float64)
    if source_capacity.shape != sink_capacity.shape or source_capacity.ndim != 2:
        raise ValueError(f"Terminal capacities {source_capacity.shape} / {sink_capacity.shape} must be equal 2-D grids")
    height, width = source_capacity.shape
    nbr = grid_neighbours(height, width, connectivity)
    cap = np.zeros(nbr.shape, dtype=np.float64)
    for dy, dx, weights in pairwise:
        k = direction_slot(dy, dx)
        if k >= connectivity:
            raise ValueError(f"Offset ({dy}, {dx}) needs 8-connectivity")
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (height, width):
            raise ValueError(f"Pairwise weights {weights.shape} do not match grid {(height, width)}")
        flat = weights.reshape(-1)
        nodes = np.flatnonzero(nbr[:, k] >= 0)
        cap[nodes, k] = flat[nodes]
        cap[nbr[nodes, k], REVERSE[k]] = flat[nodes]

    base = np.minimum(source_capacity, sink_capacity)
    tr = (source_capacity - sink_capacity).reshape(-1).copy()
    tree, flow = _boykov_kolmogorov(nbr, cap, tr, REVERSE)
    source_side = (tree == SOURCE_TREE).reshape(height, width)
    return source_side, float(flow + base.sum())
