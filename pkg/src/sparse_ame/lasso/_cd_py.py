"""Pure-Python coordinate-descent sweeps; same contract as the compiled ``_cd``."""

import numpy as np

CONVERGED = 0
NEED_COLUMNS = 1
MAX_SWEEPS = 2


def _full_sweep(gram, slot, grad, beta, diag, thresh, pending):
    maxd = 0.0
    for j in range(len(diag)):
        dj = diag[j]
        if dj <= 0.0:
            continue
        bj = beta[j]
        z = grad[j] + dj * bj
        t = thresh[j]
        if z > t:
            new = (z - t) / dj
        elif z < -t:
            new = (z + t) / dj
        else:
            new = 0.0
        d = new - bj
        if d == 0.0:
            continue
        s = slot[j]
        if s < 0:
            pending.add(j)
            continue
        beta[j] = new
        grad -= d * gram[:, s]
        if abs(d) > maxd:
            maxd = abs(d)
    return maxd


def _active_sweep(gaa, ga, act, beta, diag, thresh):
    maxd = 0.0
    for c, j in enumerate(act):
        dj = diag[j]
        bj = beta[j]
        z = ga[c] + dj * bj
        t = thresh[j]
        if z > t:
            new = (z - t) / dj
        elif z < -t:
            new = (z + t) / dj
        else:
            new = 0.0
        d = new - bj
        if d == 0.0:
            continue
        beta[j] = new
        ga -= d * gaa[:, c]
        if abs(d) > maxd:
            maxd = abs(d)
    return maxd


def cd_sweeps(gram, slot, grad, beta, diag, thresh, tol, max_sweeps, sweeps_done=0):
    sweeps = sweeps_done
    pending = set()
    maxd = np.inf
    # plain lists make the scalar loop several times faster than ndarray indexing
    diag_l = diag.tolist()
    thresh_l = thresh.tolist()
    slot_l = slot.tolist()
    while sweeps < max_sweeps:
        maxd = _full_sweep(gram, slot_l, grad, beta, diag_l, thresh_l, pending)
        sweeps += 1
        if pending or maxd < tol:
            break
        act = np.flatnonzero(beta)
        cols = slot[act]
        gaa = np.asfortranarray(gram[np.ix_(act, cols)])
        ga = grad[act].copy()
        b0 = beta[act].copy()
        act_l = act.tolist()
        while sweeps < max_sweeps:
            maxd = _active_sweep(gaa, ga, act_l, beta, diag_l, thresh_l)
            sweeps += 1
            if maxd < tol:
                break
        for c, j in enumerate(act_l):
            d = beta[j] - b0[c]
            if d != 0.0:
                grad -= d * gram[:, cols[c]]
    if pending:
        return NEED_COLUMNS, sweeps, np.array(sorted(pending), dtype=np.int64)
    if sweeps >= max_sweeps and maxd >= tol:
        return MAX_SWEEPS, sweeps, np.zeros(0, dtype=np.int64)
    return CONVERGED, sweeps, np.zeros(0, dtype=np.int64)
