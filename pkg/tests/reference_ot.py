"""Naive scalar-loop unbalanced Sinkhorn, used as an independent oracle.

Deliberately shares no code with the package: plain Python loops, explicit
indexing, no vectorization. Slow but unambiguous.
"""

import math


def reference_sinkhorn_uot(cost, lam, rho, iterations):
    """cost: list of lists (rows x cols). Returns the plan as list of lists."""
    n_rows = len(cost)
    n_cols = len(cost[0])
    a = [1.0 / n_rows] * n_rows
    b = [1.0 / n_cols] * n_cols
    k = [[math.exp(-cost[i][j] / lam) for j in range(n_cols)] for i in range(n_rows)]
    exponent = rho / (rho + lam)
    u = [1.0] * n_rows
    v = [b[j] for j in range(n_cols)]
    for _ in range(iterations):
        for i in range(n_rows):
            kv = sum(k[i][j] * v[j] for j in range(n_cols))
            u[i] = (a[i] / kv) ** exponent
        for j in range(n_cols):
            ku = sum(k[i][j] * u[i] for i in range(n_rows))
            v[j] = (b[j] / ku) ** exponent
    return [[u[i] * k[i][j] * v[j] for j in range(n_cols)] for i in range(n_rows)]
