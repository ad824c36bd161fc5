"""Independent brute-force reference implementations shared by the unit and acceptance suites."""

import math

import numpy as np


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def _unit(v):
    n = math.sqrt(sum(a * a for a in v))
    return [a / n for a in v] if n >= 1e-12 else list(v)


def union_find_components(S, lambda_min, lambda_max):
    """Partition of range(n) into frozensets, via union-find over the symmetrised edge rule."""
    n = len(S)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        best_j, best = None, None
        for j in range(n):
            if j != i and (best is None or S[i][j] > best):
                best_j, best = j, S[i][j]
        for j in range(n):
            if j == i:
                continue
            edge = j == best_j or S[i][j] > lambda_max
            if edge and not S[i][j] < lambda_min:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def naive_agglomerate(groups, tau_k, tau_max, lp_min, lp_max):
    """Pure-python greedy merge.

    ``groups`` is a list of dicts with keys members (list), fsum (list of floats), meta (bool).
    Returns (final member lists, merge trace of (i, j) index pairs).
    """
    live = [dict(uid=k, members=list(g["members"]), fsum=list(g["fsum"]), meta=g["meta"]) for k, g in enumerate(groups)]
    next_uid = len(live)
    blocked = set()
    trace = []
    while len(live) >= tau_k and len(live) > 1:
        best, bi, bj = None, None, None
        for i in range(len(live)):
            for j in range(i + 1, len(live)):
                if (live[i]["uid"], live[j]["uid"]) in blocked:
                    continue
                s = _dot(_unit(live[i]["fsum"]), _unit(live[j]["fsum"]))
                if best is None or s > best:
                    best, bi, bj = s, i, j
        if best is None or best < lp_min:
            break
        a, b = live[bi], live[bj]
        if (a["meta"] and b["meta"] and best <= lp_max) or len(a["members"]) + len(b["members"]) >= tau_max:
            blocked.add((a["uid"], b["uid"]))
            continue
        trace.append((bi, bj))
        live[bi] = dict(
            uid=next_uid,
            members=sorted(a["members"] + b["members"]),
            fsum=[x + y for x, y in zip(a["fsum"], b["fsum"])],
            meta=a["meta"] or b["meta"],
        )
        next_uid += 1
        del live[bj]
    return [g["members"] for g in live], trace


def validate_top_down(subgroups, B, cT, leaves):
    """Raise AssertionError unless the leaves partition the subgroups and respect the stop rule."""
    seen = sorted(k for cell in leaves for k in cell)
    assert seen == list(range(len(subgroups))), "leaves are not a partition of the subgroups"
    for label, cell in enumerate(leaves):
        assert len(cell) >= 1, "empty leaf"
        if len(cell) > 1:
            assert sum(subgroups[k].size for k in cell) < B, "splittable leaf left unsplit"
        for k in cell:
            for sid in subgroups[k].member_ids:
                assert cT[int(sid)] == label, "sample label disagrees with its leaf"
    assert len(cT) == sum(sg.size for sg in subgroups)


def brute_retrieval(E, labels):
    """P@1, R-Precision and MAP@R by explicit per-query sorting; queries with R = 0 skipped for R metrics."""
    n = len(E)
    p1 = 0.0
    rp, mapr, nq = 0.0, 0.0, 0
    for q in range(n):
        sims = [(-float(_dot(E[q], E[j])), j) for j in range(n) if j != q]
        sims.sort()
        ranked = [labels[j] for _, j in sims]
        if ranked and ranked[0] == labels[q]:
            p1 += 1
        R = sum(1 for j in range(n) if j != q and labels[j] == labels[q])
        if R == 0:
            continue
        nq += 1
        hits = [1 if ranked[k] == labels[q] else 0 for k in range(R)]
        rp += sum(hits) / R
        ap, run = 0.0, 0
        for k in range(R):
            run += hits[k]
            if hits[k]:
                ap += run / (k + 1)
        mapr += ap / R
    p1 = p1 / n if n else 0.0
    if nq == 0:
        return p1, 0.0, 0.0
    return p1, rp / nq, mapr / nq


def fd_gradient(f, Z, step=1e-5):
    """Central finite differences of scalar ``f`` with respect to every entry of ``Z``."""
    Z = np.array(Z, dtype=np.float64)
    g = np.zeros_like(Z)
    for idx in np.ndindex(Z.shape):
        orig = Z[idx]
        Z[idx] = orig + step
        fp = f(Z)
        Z[idx] = orig - step
        fm = f(Z)
        Z[idx] = orig
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def lse_sgps(z, r, negatives, tau, delta):
    """Independent log-sum-exp for the prototype loss, in plain python floats."""
    if len(negatives) == 0:
        return 0.0
    logits = [(_dot(z, r) - delta) / tau] + [_dot(z, n) / tau for n in negatives]
    m = max(logits)
    return m + math.log(sum(math.exp(x - m) for x in logits)) - logits[0]


def lse_sgps_grad(z, r, negatives, tau, delta):
    """Closed-form anchor and negative gradients of :func:`lse_sgps`, via per-term softmax weights."""
    logits = [(_dot(z, r) - delta) / tau] + [_dot(z, n) / tau for n in negatives]
    m = max(logits)
    w = [math.exp(x - m) for x in logits]
    total = sum(w)
    p = [x / total for x in w]
    gz = [-sum(p[1:]) * ri / tau for ri in r]
    for pk, n in zip(p[1:], negatives):
        gz = [g + pk * nk / tau for g, nk in zip(gz, n)]
    gn = [[pk * zk / tau for zk in z] for pk in p[1:]]
    return np.array(gz), np.array(gn)


def mp_sgps_fd(z, r, negatives, tau, delta, step=1e-12, dps=60):
    """Central differences of the prototype loss in ``dps``-digit arithmetic.

    Returns (grad wrt z, grad wrt each negative) as float arrays.  High precision
    keeps the difference quotient meaningful when the softmax saturates.
    """
    import mpmath

    with mpmath.workdps(dps):
        tau_, delta_, h = mpmath.mpf(tau), mpmath.mpf(delta), mpmath.mpf(step)

        def loss(zv, nv):
            logits = [(mpmath.fsum(a * b for a, b in zip(zv, r)) - delta_) / tau_]
            logits += [mpmath.fsum(a * b for a, b in zip(zv, n)) / tau_ for n in nv]
            return mpmath.log(mpmath.fsum(mpmath.exp(x) for x in logits)) - logits[0]

        z0 = [mpmath.mpf(float(v)) for v in z]
        n0 = [[mpmath.mpf(float(v)) for v in n] for n in negatives]
        r = [mpmath.mpf(float(v)) for v in r]

        def diff(get):
            plus, minus = get(h), get(-h)
            return float((loss(*plus) - loss(*minus)) / (2 * h))

        gz = []
        for k in range(len(z0)):
            gz.append(diff(lambda e: ([v + (e if i == k else 0) for i, v in enumerate(z0)], n0)))
        gn = []
        for j in range(len(n0)):
            row = []
            for k in range(len(z0)):
                def shifted(e, j=j, k=k):
                    nv = [list(n) for n in n0]
                    nv[j][k] += e
                    return z0, nv
                row.append(diff(shifted))
            gn.append(row)
    return np.array(gz), np.array(gn).reshape(len(negatives), len(z))
