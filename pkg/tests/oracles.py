"""Independent brute-force references used by several test modules.

Everything here is written from the definitions (quadruple loops, explicit
complex exponentials) and never calls into the package's transform code.
"""

import cmath

import numpy as np


def oracle_dft2(img):
    h, w = img.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for y in range(h):
                for x in range(w):
                    acc += img[y, x] * cmath.exp(-2j * cmath.pi * (u * y / h + v * x / w))
            out[u, v] = acc
    return out


def oracle_highpass(img, r):
    """Transform -> centered disc zeroed -> inverse -> |real part|."""
    h, w = img.shape
    f = oracle_dft2(img)
    fc = np.roll(f, (h // 2, w // 2), axis=(0, 1))
    cy, cx = h // 2, w // 2
    for u in range(h):
        for v in range(w):
            if (u - cy) ** 2 + (v - cx) ** 2 < r * r:
                fc[u, v] = 0
    fh = np.roll(fc, (-(h // 2), -(w // 2)), axis=(0, 1))
    out = np.zeros((h, w), dtype=complex)
    for y in range(h):
        for x in range(w):
            acc = 0j
            for u in range(h):
                for v in range(w):
                    acc += fh[u, v] * cmath.exp(2j * cmath.pi * (u * y / h + v * x / w))
            out[y, x] = acc / (h * w)
    return np.abs(out.real)


def oracle_masked_hf_mse(pred, gt, mask, r):
    """Detail loss: filter the mask-restricted content of each image, compare
    inside the mask, average over the masked pixel count."""
    m = mask.astype(float)
    hp = oracle_highpass(pred * m, r)
    hg = oracle_highpass(gt * m, r)
    diff = hp * m - hg * m
    total = 0.0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            total += diff[y, x] ** 2
    return total / max(int(mask.sum()), 1)


def oracle_mse(a, b):
    total = 0.0
    n = 0
    for x, y in zip(np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)):
        total += (float(x) - float(y)) ** 2
        n += 1
    return total / n
