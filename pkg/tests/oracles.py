"""Independent reference evaluators used as test oracles.

Nothing here imports the package's loss or optimizer code: these are plain
scalar loops and textbook finite differences.
"""

import math

import numpy as np


def dot(u, v):
    return sum(float(a) * float(b) for a, b in zip(u, v))


def brute_multitext(img, txts, tau):
    """Scalar triple loop over (anchor i, slot j, candidate k).

    Image side: for each image i and caption slot j, a softmax over the N
    texts of slot j. Text side: each of the N*(M+1) texts against all N
    images. Both sides are averaged over their N*(M+1) anchor terms.
    """
    n = len(img)
    slots = len(txts)
    li = 0.0
    for i in range(n):
        for j in range(slots):
            denom = sum(math.exp(dot(img[i], txts[j][k]) / tau) for k in range(n))
            li -= math.log(math.exp(dot(img[i], txts[j][i]) / tau) / denom)
    lt = 0.0
    for j in range(slots):
        for i in range(n):
            denom = sum(math.exp(dot(txts[j][i], img[k]) / tau) for k in range(n))
            lt -= math.log(math.exp(dot(txts[j][i], img[i]) / tau) / denom)
    li /= n * slots
    lt /= n * slots
    return li, lt, 0.5 * (li + lt)


def brute_clip(img, txt, tau):
    return brute_multitext(img, [txt], tau)


def central_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x`` (x is restored afterwards)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for idx in range(flat.size):
        old = flat[idx]
        flat[idx] = old + h
        fp = f()
        flat[idx] = old - h
        fm = f()
        flat[idx] = old
        gflat[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def adam_scalar(p, g, lr, beta1=0.9, beta2=0.98, eps=1e-8, t=1):
    """First Adam step on one scalar, zero initial moments, no weight decay."""
    m = (1 - beta1) * g
    v = (1 - beta2) * g * g
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    return p - lr * mhat / (math.sqrt(vhat) + eps)
