"""Slow, obviously-correct reference implementations used by the tests."""
import itertools

import numpy as np


def greedy_match(est, true):
    """Mean |corr| after greedily pairing rows of ``est`` with rows of ``true``.

    Repeatedly takes the largest remaining |corr| entry and removes its row
    and column, so the result is invariant to permutation and sign.
    """
    k = true.shape[0]
    c = np.abs(np.corrcoef(est, true)[: est.shape[0], est.shape[0]:])
    picked = []
    for _ in range(min(k, est.shape[0])):
        i, j = np.unravel_index(np.argmax(c), c.shape)
        picked.append(c[i, j])
        c[i, :] = -1
        c[:, j] = -1
    return float(np.mean(picked))


def brute_centers(mask, r=2):
    """Every voxel, x fastest, whose whole cube is inside the volume and mask."""
    nx, ny, nz = mask.shape
    found = []
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                ok = True
                for dz, dy, dx in itertools.product(range(-r, r + 1), repeat=3):
                    px, py, pz = x + dx, y + dy, z + dz
                    if not (0 <= px < nx and 0 <= py < ny and 0 <= pz < nz and mask[px, py, pz]):
                        ok = False
                        break
                if ok:
                    found.append((x, y, z))
    return found


def _corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def brute_segment_match(responses, seg, tie_tol=1e-12):
    """Double loop over held-out subject and window start.

    For each true start, scan all candidate starts; skip those overlapping
    the true window (except itself); the earliest candidate within
    ``tie_tol`` of the best correlation wins.
    """
    m = len(responses)
    t = responses[0].shape[1]
    n = t - seg + 1
    correct = 0
    for i in range(m):
        ref = sum(responses[j] for j in range(m) if j != i) / (m - 1)
        for start in range(n):
            probe = responses[i][:, start:start + seg].ravel(order="F")
            cands, scores = [], []
            for cand in range(n):
                if cand != start and abs(cand - start) < seg:
                    continue
                cands.append(cand)
                scores.append(_corr(probe, ref[:, cand:cand + seg].ravel(order="F")))
            top = max(scores)
            best = next(c for c, v in zip(cands, scores) if v >= top - tie_tol)
            correct += best == start
    return correct, m * n
