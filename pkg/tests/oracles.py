"""Independent reference computations used only by the tests."""

import itertools
from math import exp, lgamma, log

import numpy as np
from scipy.stats import multivariate_normal


def compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for a in range(total + 1):
        for rest in compositions(total - a, parts - 1):
            yield (a,) + rest


def exact_expected_cells(pi, n, y):
    """Conditional mean of the cell table given both margins, rows independent
    multinomial(n_i, pi_i), by enumerating every admissible table.

    The first r - 1 rows are enumerated and the last row is whatever the
    column margins leave over."""
    pi = np.asarray(pi, dtype=float)
    n = [int(x) for x in n]
    y = np.asarray(y, dtype=int)
    r, c = pi.shape
    acc = np.zeros((r, c))
    total = 0.0
    for rows in itertools.product(*[list(compositions(ni, c)) for ni in n[:-1]]):
        head = np.array(rows, dtype=int).reshape(r - 1, c)
        last = y - head.sum(axis=0)
        if np.any(last < 0):
            continue
        table = np.vstack([head, last])
        lw = 0.0
        for i in range(r):
            lw += lgamma(n[i] + 1)
            for j in range(c):
                x = int(table[i, j])
                if x and pi[i, j] == 0:
                    lw = -np.inf
                    break
                lw += -lgamma(x + 1) + (x * log(pi[i, j]) if x else 0.0)
        w = exp(lw)
        total += w
        acc += w * table
    return acc / total


def dense_loglik(params, design, records, C):
    """Station-by-station Gaussian log-density built from scratch with scipy,
    shifted to drop the same constant the library drops."""
    theta = 1.0 / (1.0 + np.exp(-np.broadcast_to(params.tau, (params.r,))))
    total = 0.0
    for rec in records:
        mu = np.zeros(params.c - 1)
        V = np.zeros((params.c - 1, params.c - 1))
        for i in range(params.r):
            lam = params.alpha[i].copy()
            for b, (ii, j, m) in enumerate(design.entries):
                if ii == i:
                    lam[j] += params.beta[b] * rec.v[m]
            e = np.exp(np.append(lam, 0.0))
            p = (e / e.sum())[:-1]
            n = rec.n[i]
            mu += n * p
            if n > 0:
                V += (n + theta[i] * C * (n - 1)) * (np.diag(p) - np.outer(p, p))
        q = params.c - 1
        total += multivariate_normal(mu, V).logpdf(rec.y[:-1].astype(float)) + 0.5 * q * np.log(2 * np.pi)
    return total


def central_difference(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for p in range(x.size):
        e = np.zeros_like(x)
        e[p] = h
        out[p] = (f(x + e) - f(x - e)) / (2 * h)
    return out
