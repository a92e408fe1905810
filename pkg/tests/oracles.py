"""Independent reference implementations shared by the test modules."""

import math

import numpy as np


def naive_simreg(E, labels, tau):
    """Pairwise double loop with raw exponentials; safe only for moderate 1/tau."""
    n = len(labels)
    out = np.zeros(n)
    for k in range(n):
        pos = neg = 0.0
        has_neg = False
        for j in range(n):
            nk, nj = np.linalg.norm(E[k]), np.linalg.norm(E[j])
            if j == k:
                c = 1.0 if nk > 0 else 0.0
            elif nk == 0 or nj == 0:
                c = 0.0
            else:
                c = float(np.dot(E[k], E[j]) / (nk * nj))
            if labels[j] == labels[k]:
                pos += math.exp(c / tau)
            else:
                neg += math.exp(c / tau)
                has_neg = True
        out[k] = math.log(neg) - math.log(pos) if has_neg else 0.0
    return out
