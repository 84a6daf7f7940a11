"""Pure-numpy kernels.

Every reduction runs in a fixed sequential order so results are
bit-identical to the compiled kernels in ``_ckernels.pyx``.
"""

import numpy as np


def matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m), dtype=np.float64)
    for t in range(k):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def rowdot(a, b):
    n, k = a.shape
    out = np.zeros(n, dtype=np.float64)
    for t in range(k):
        out += a[:, t] * b[:, t]
    return out


def segment_sum(indptr, indices, x):
    """out[s] = sum of x[indices[j]] for j in indptr[s]:indptr[s+1], in j order."""
    nseg = indptr.shape[0] - 1
    out = np.zeros((nseg, x.shape[1]), dtype=np.float64)
    if nseg == 0:
        return out
    starts = indptr[:-1]
    lens = indptr[1:] - starts
    longest = int(lens.max()) if nseg else 0
    for t in range(longest):
        live = np.flatnonzero(lens > t)
        out[live] += x[indices[starts[live] + t]]
    return out


def scatter_add_rows(target, indices, rows):
    # ufunc.at applies updates sequentially in index order
    np.add.at(target, indices, rows)


def adam_update(value, grad, m, v, lr, beta1, one_minus_beta1, beta2, one_minus_beta2, bc1, bc2, eps):
    m *= beta1
    m += one_minus_beta1 * grad
    v *= beta2
    v += one_minus_beta2 * (grad * grad)
    value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
