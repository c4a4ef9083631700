"""Compiled event loop for task DAGs on exclusive and unbounded lanes.

Same dispatch rule as the pure-Python loop in ``sim``: completions at one
instant are all applied before any lane picks its next task, and a lane
picks the task that became ready first, ties going to the lower rank.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _less(t, r, a, b):
    return t[a] < t[b] or (t[a] == t[b] and r[a] < r[b])


@njit(cache=True)
def _push(t, r, ids, lo, size, tv, rv, iv):
    """Insert into the binary heap stored at ``[lo, lo + size)``; returns the new size."""
    i = size
    t[lo + i] = tv
    r[lo + i] = rv
    ids[lo + i] = iv
    while i > 0:
        parent = (i - 1) >> 1
        a, b = lo + i, lo + parent
        if _less(t, r, a, b):
            t[a], t[b] = t[b], t[a]
            r[a], r[b] = r[b], r[a]
            ids[a], ids[b] = ids[b], ids[a]
            i = parent
        else:
            break
    return size + 1


@njit(cache=True)
def _pop(t, r, ids, lo, size):
    """Remove the heap minimum; returns ``(id, new size)``."""
    top = ids[lo]
    size -= 1
    t[lo] = t[lo + size]
    r[lo] = r[lo + size]
    ids[lo] = ids[lo + size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        c = left
        if left + 1 < size and _less(t, r, lo + left + 1, lo + left):
            c = left + 1
        a, b = lo + c, lo + i
        if _less(t, r, a, b):
            t[a], t[b] = t[b], t[a]
            r[a], r[b] = r[b], r[a]
            ids[a], ids[b] = ids[b], ids[a]
            i = c
        else:
            break
    return top, size


@njit(cache=True)
def execute(lane, rank, succ_ptr, succ_idx, npred0, work, exclusive):
    """Returns ``(start, finish, busy per lane, completed task count)``."""
    n = lane.shape[0]
    L = exclusive.shape[0]
    npred = npred0.copy()
    start = np.full(n, np.nan)
    finish = np.full(n, np.nan)

    # one heap region per lane, sized by the lane's task count
    off = np.zeros(L + 1, np.int64)
    for i in range(n):
        off[lane[i] + 1] += 1
    for ln in range(L):
        off[ln + 1] += off[ln]
    q_t = np.empty(n)
    q_r = np.empty(n, np.int64)
    q_id = np.empty(n, np.int64)
    q_size = np.zeros(L, np.int64)

    e_t = np.empty(n)
    e_r = np.empty(n, np.int64)
    e_id = np.empty(n, np.int64)
    e_size = 0

    occupied = np.zeros(L, np.bool_)
    active = np.zeros(L, np.int64)
    busy_since = np.zeros(L)
    busy = np.zeros(L)
    dirty = np.zeros(L, np.bool_)
    dirty_list = np.empty(L, np.int64)
    n_dirty = 0

    newly = np.empty(n, np.int64)
    n_new = 0
    for i in range(n):
        if npred[i] == 0:
            newly[n_new] = i
            n_new += 1

    now = 0.0
    done = 0
    while True:
        for j in range(n_new):
            tid = newly[j]
            ln = lane[tid]
            if exclusive[ln]:
                q_size[ln] = _push(q_t, q_r, q_id, off[ln], q_size[ln], now, rank[tid], tid)
                if not dirty[ln]:
                    dirty[ln] = True
                    dirty_list[n_dirty] = ln
                    n_dirty += 1
            else:
                start[tid] = now
                if active[ln] == 0:
                    busy_since[ln] = now
                active[ln] += 1
                e_size = _push(e_t, e_r, e_id, 0, e_size, now + work[tid], rank[tid], tid)
        n_new = 0
        for j in range(n_dirty):
            ln = dirty_list[j]
            dirty[ln] = False
            if q_size[ln] > 0 and not occupied[ln]:
                tid, q_size[ln] = _pop(q_t, q_r, q_id, off[ln], q_size[ln])
                occupied[ln] = True
                start[tid] = now
                if active[ln] == 0:
                    busy_since[ln] = now
                active[ln] += 1
                e_size = _push(e_t, e_r, e_id, 0, e_size, now + work[tid], rank[tid], tid)
        n_dirty = 0
        if e_size == 0:
            break
        now = e_t[0]
        while e_size > 0 and e_t[0] == now:
            tid, e_size = _pop(e_t, e_r, e_id, 0, e_size)
            ln = lane[tid]
            if exclusive[ln]:
                occupied[ln] = False
                if q_size[ln] > 0 and not dirty[ln]:
                    dirty[ln] = True
                    dirty_list[n_dirty] = ln
                    n_dirty += 1
            finish[tid] = now
            done += 1
            active[ln] -= 1
            if active[ln] == 0:
                busy[ln] += now - busy_since[ln]
            for s in range(succ_ptr[tid], succ_ptr[tid + 1]):
                nxt = succ_idx[s]
                npred[nxt] -= 1
                if npred[nxt] == 0:
                    newly[n_new] = nxt
                    n_new += 1
    return start, finish, busy, done
