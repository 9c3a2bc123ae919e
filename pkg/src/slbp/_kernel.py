"""Compiled next-event kernel for the branching-coalescing walk on Z_K.

Sites are drawn through two integer Fenwick trees, one over the counts n(z)
(jumps and branchings) and one over the pair counts n(n-1)/2 (coalescence).
The event class is drawn first from the three totals.
"""

import numpy as np
from numba import njit

OK = 0
OVERFLOW = 1
LOG_FULL = 2


@njit(cache=True)
def _fw_add(tree, z, v):
    i = z + 1
    n = tree.size - 1
    while i <= n:
        tree[i] += v
        i += i & (-i)


@njit(cache=True)
def _fw_find(tree, r, top):
    """Smallest site whose inclusive prefix sum exceeds r (0 <= r < total)."""
    pos = 0
    step = top
    n = tree.size - 1
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= r:
            pos = nxt
            r -= tree[nxt]
        step >>= 1
    return pos


@njit(cache=True)
def _fw_prefix(tree, z):
    i = z + 1
    s = 0
    while i > 0:
        s += tree[i]
        i -= i & (-i)
    return s


@njit(cache=True)
def _accumulate(integ, b, z, n, dt, degree):
    p = 1.0
    for k in range(degree):
        p *= n
        integ[b, k, z] += p * dt


@njit(cache=True)
def _acc_local(acc, z, n, dt, degree):
    p = 1.0
    for k in range(degree):
        p *= n
        acc[z, k] += p * dt


@njit(cache=True)
def run(counts, jump, coal, alias_prob, alias_idx, times, degree, snaps, integ,
        rng, max_total, audit_every, log_t, log_site, log_kind, log_ell):
    """Advance ``counts`` in place through every time in ``times``.

    snaps[i] receives the state at times[i]; integ[b, k-1, z] receives the
    integral of n(z)^k over [times[b], times[b+1]].  Returns
    (events, status, max_audit_error).  When log_t is non-empty every event is
    recorded with kind 0/1 (jump right/left), 2 (branch, log_ell = l) or 3
    (coalescence).
    """
    K = counts.size
    nt = times.size
    tn = np.zeros(K + 1, dtype=np.int64)
    tp = np.zeros(K + 1, dtype=np.int64)
    N = 0
    P = 0
    for z in range(K):
        c = counts[z]
        _fw_add(tn, z, c)
        _fw_add(tp, z, c * (c - 1) // 2)
        N += c
        P += c * (c - 1) // 2
    top = 1
    while top * 2 <= K:
        top *= 2
    last = np.zeros(K)
    L = alias_prob.size
    cap = log_t.size
    t = 0.0
    i = 0
    events = 0
    audit_err = 0.0
    while True:
        total = jump * N + N + coal * P
        if total > 0.0:
            tnext = t + rng.standard_exponential() / total
        else:
            tnext = np.inf
        while i < nt and times[i] <= tnext:
            ti = times[i]
            if i > 0 and degree > 0:
                for z in range(K):
                    _accumulate(integ, i - 1, z, counts[z], ti - last[z], degree)
            for z in range(K):
                last[z] = ti
                snaps[i, z] = counts[z]
            i += 1
        if i == nt:
            break
        t = tnext
        # one uniform picks the class, the particle/pair and a residual coin
        u = rng.random() * total
        jN = jump * N
        if u < jN:
            a = u / jump
            r = np.int64(a)
            if r >= N:
                r = N - 1
            z = _fw_find(tn, r, top)
            w = z + 1 if a - r < 0.5 else z - 1
            if w == K:
                w = 0
            elif w < 0:
                w = K - 1
            if i > 0 and degree > 0:
                _accumulate(integ, i - 1, z, counts[z], t - last[z], degree)
                _accumulate(integ, i - 1, w, counts[w], t - last[w], degree)
                last[z] = t
                last[w] = t
            cz = counts[z]
            cw = counts[w]
            counts[z] = cz - 1
            counts[w] = cw + 1
            _fw_add(tn, z, -1)
            _fw_add(tn, w, 1)
            _fw_add(tp, z, -(cz - 1))
            _fw_add(tp, w, cw)
            P += cw - (cz - 1)
            if cap > 0:
                if events >= cap:
                    return events, LOG_FULL, audit_err
                log_t[events] = t
                log_site[events] = z
                log_kind[events] = 0 if w == (z + 1) % K else 1
                log_ell[events] = 0
        elif u < jN + N:
            a = u - jN
            r = np.int64(a)
            if r >= N:
                r = N - 1
            z = _fw_find(tn, r, top)
            b = (a - r) * L
            j = np.int64(b)
            if j >= L:
                j = L - 1
            if b - j < alias_prob[j]:
                ell = j + 1
            else:
                ell = alias_idx[j] + 1
            if i > 0 and degree > 0:
                _accumulate(integ, i - 1, z, counts[z], t - last[z], degree)
                last[z] = t
            cz = counts[z]
            counts[z] = cz + ell
            _fw_add(tn, z, ell)
            dp = ell * cz + ell * (ell - 1) // 2
            _fw_add(tp, z, dp)
            N += ell
            P += dp
            if cap > 0:
                if events >= cap:
                    return events, LOG_FULL, audit_err
                log_t[events] = t
                log_site[events] = z
                log_kind[events] = 2
                log_ell[events] = ell
        else:
            r = np.int64((u - jN - N) / coal)
            if r >= P:
                r = P - 1
            z = _fw_find(tp, r, top)
            if i > 0 and degree > 0:
                _accumulate(integ, i - 1, z, counts[z], t - last[z], degree)
                last[z] = t
            cz = counts[z]
            counts[z] = cz - 1
            _fw_add(tn, z, -1)
            _fw_add(tp, z, -(cz - 1))
            N -= 1
            P -= cz - 1
            if cap > 0:
                if events >= cap:
                    return events, LOG_FULL, audit_err
                log_t[events] = t
                log_site[events] = z
                log_kind[events] = 3
                log_ell[events] = 1
        events += 1
        if N > max_total:
            return events, OVERFLOW, audit_err
        if audit_every > 0 and events % audit_every == 0:
            # compare tree totals with a direct recount of the site rates
            sn = 0
            sp = 0
            for z in range(K):
                c = counts[z]
                sn += c
                sp += c * (c - 1) // 2
            direct = 0.0
            for z in range(K):
                c = counts[z]
                direct += jump * c + c + coal * (c * (c - 1) // 2)
            tree_total = jump * _fw_prefix(tn, K - 1) + _fw_prefix(tn, K - 1) + coal * _fw_prefix(tp, K - 1)
            err = abs(tree_total - direct) / max(direct, 1.0)
            if sn != N or sp != P:
                err = max(err, 1.0)
            if err > audit_err:
                audit_err = err
    return events, OK, audit_err


@njit(cache=True)
def run_particles(counts, jump, coal, alias_prob, alias_idx, times, degree, snaps, integ,
                  rng, max_total, audit_every, log_t, log_site, log_kind, log_ell):
    """Same chain and contract as ``run`` with a flat particle-position array.

    Jumps and branchings act on a uniformly chosen particle, which the array
    gives in O(1).  Coalescences, rarer than jumps by a factor of order
    eps^2, pick their site by a linear scan of the pair counts.
    """
    K = counts.size
    nt = times.size
    N = 0
    P = 0
    for z in range(K):
        N += counts[z]
        P += counts[z] * (counts[z] - 1) // 2
    cap = 16
    while cap < 2 * N:
        cap *= 2
    pos = np.empty(cap, dtype=np.int64)
    k = 0
    for z in range(K):
        for _ in range(counts[z]):
            pos[k] = z
            k += 1
    last = np.zeros(K)
    acc = np.zeros((K, max(degree, 1)))
    L = alias_prob.size
    lcap = log_t.size
    t = 0.0
    i = 0
    events = 0
    audit_err = 0.0
    while True:
        total = jump * N + N + coal * P
        if total > 0.0:
            tnext = t + rng.standard_exponential() / total
        else:
            tnext = np.inf
        while i < nt and times[i] <= tnext:
            ti = times[i]
            if i > 0 and degree > 0:
                for z in range(K):
                    _acc_local(acc, z, counts[z], ti - last[z], degree)
                    for q in range(degree):
                        integ[i - 1, q, z] = acc[z, q]
                        acc[z, q] = 0.0
            for z in range(K):
                last[z] = ti
                snaps[i, z] = counts[z]
            i += 1
        if i == nt:
            break
        t = tnext
        u = rng.random() * total
        jN = jump * N
        if u < jN:
            a = u / jump
            r = np.int64(a)
            if r >= N:
                r = N - 1
            z = pos[r]
            if a - r < 0.5:
                w = z + 1
                if w == K:
                    w = 0
                kind = 0
            else:
                w = z - 1
                if w < 0:
                    w = K - 1
                kind = 1
            if i > 0 and degree > 0:
                _acc_local(acc, z, counts[z], t - last[z], degree)
                _acc_local(acc, w, counts[w], t - last[w], degree)
                last[z] = t
                last[w] = t
            pos[r] = w
            P += counts[w] - (counts[z] - 1)
            counts[z] -= 1
            counts[w] += 1
            ell = 0
        elif u < jN + N:
            a = u - jN
            r = np.int64(a)
            if r >= N:
                r = N - 1
            z = pos[r]
            b = (a - r) * L
            j = np.int64(b)
            if j >= L:
                j = L - 1
            if b - j < alias_prob[j]:
                ell = j + 1
            else:
                ell = alias_idx[j] + 1
            if i > 0 and degree > 0:
                _acc_local(acc, z, counts[z], t - last[z], degree)
                last[z] = t
            if N + ell > cap:
                while cap < N + ell:
                    cap *= 2
                grown = np.empty(cap, dtype=np.int64)
                grown[:N] = pos[:N]
                pos = grown
            for m in range(ell):
                pos[N + m] = z
            P += ell * counts[z] + ell * (ell - 1) // 2
            counts[z] += ell
            N += ell
            kind = 2
        else:
            a = (u - jN - N) / coal
            r = np.int64(a)
            if r >= P:
                r = P - 1
            z = 0
            cum = 0
            for s in range(K):
                cum += counts[s] * (counts[s] - 1) // 2
                if cum > r:
                    z = s
                    break
            if i > 0 and degree > 0:
                _acc_local(acc, z, counts[z], t - last[z], degree)
                last[z] = t
            # particles are exchangeable: remove any one at z
            m = 0
            while pos[m] != z:
                m += 1
            pos[m] = pos[N - 1]
            P -= counts[z] - 1
            counts[z] -= 1
            N -= 1
            ell = 1
            kind = 3
        if lcap > 0:
            if events >= lcap:
                return events, LOG_FULL, audit_err
            log_t[events] = t
            log_site[events] = z
            log_kind[events] = kind
            log_ell[events] = ell
        events += 1
        if N > max_total:
            return events, OVERFLOW, audit_err
        if audit_every > 0 and events % audit_every == 0:
            recount = np.zeros(K, dtype=np.int64)
            for m in range(N):
                recount[pos[m]] += 1
            direct = 0.0
            sp = 0
            bad = False
            for z in range(K):
                c = recount[z]
                if c != counts[z]:
                    bad = True
                sp += c * (c - 1) // 2
                direct += jump * c + c + coal * (c * (c - 1) // 2)
            err = abs(total_rate(jump, coal, N, P) - direct) / max(direct, 1.0)
            if bad or sp != P:
                err = max(err, 1.0)
            if err > audit_err:
                audit_err = err
    return events, OK, audit_err


@njit(cache=True)
def total_rate(jump, coal, N, P):
    return jump * N + N + coal * P
