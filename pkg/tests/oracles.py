"""Loop-level reference implementations shared by several test modules."""

import numpy as np


def periodic_analysis_oracle(x, kernel):
    """Direct periodic stride-2 correlation, one output sample at a time."""
    H, W = x.shape[-2:]
    K = kernel.shape[0]
    out = np.zeros(x.shape[:-2] + (H // 2, W // 2))
    for i in range(H // 2):
        for j in range(W // 2):
            for p in range(K):
                for q in range(K):
                    out[..., i, j] += kernel[p, q] * x[..., (2 * i + p) % H, (2 * j + q) % W]
    return out


def oracle_kernels(h):
    K = len(h)
    g = np.array([(-1) ** k * h[K - 1 - k] for k in range(K)])
    return [np.array([[a[p] * b[q] for q in range(K)] for p in range(K)]) for a in (h, g) for b in (h, g)]


def unrolled_two_level_tree(x, h):
    """All 16 depth-2 packet subbands in LL-LH-HL-HH order of each level."""
    ks = oracle_kernels(h)
    first = [periodic_analysis_oracle(x, k) for k in ks]
    return [periodic_analysis_oracle(c, k) for c in first for k in ks]
