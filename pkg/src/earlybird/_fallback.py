"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, g):
    dot = (g * y).sum(axis=-1, keepdims=True)
    return y * (g - dot)


def layer_norm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(g, xhat, rstd, gamma):
    gh = g * gamma
    s1 = gh.mean(axis=-1, keepdims=True)
    s2 = (gh * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (gh - s1 - xhat * s2)
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    return dx, dgamma, dbeta


def pairwise_hamming(bits):
    b = bits.astype(np.int64)
    # |a - b| summed == a + b - 2ab for 0/1 vectors
    ones = b.sum(axis=1)
    return ones[:, None] + ones[None, :] - 2 * (b @ b.T)
