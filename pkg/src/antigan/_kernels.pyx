# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: window-variance loss and max-over-set SSIM.

Inputs are C-contiguous float64 arrays shaped (N, C, H, W). The pure numpy
twin lives in ``_fallback``; both must agree to floating-point accuracy.
"""
import numpy as np
cimport numpy as cnp

from libc.stdlib cimport malloc, free

cnp.import_array()

NAME = "cython"


def window_variances(const double[:, :, :, ::1] images, int s):
    cdef Py_ssize_t n_img = images.shape[0], nc = images.shape[1]
    cdef Py_ssize_t h = images.shape[2], w = images.shape[3]
    cdef Py_ssize_t nh = (h + s - 1) // s, nw = (w + s - 1) // s
    out = np.empty((n_img, nh, nw), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t n, c, i, j, bi, bj, r0, r1, c0, c1
    cdef double total, mean, d, acc, m
    with nogil:
        for n in range(n_img):
            for bi in range(nh):
                r0 = bi * s
                r1 = r0 + s if r0 + s < h else h
                for bj in range(nw):
                    c0 = bj * s
                    c1 = c0 + s if c0 + s < w else w
                    m = nc * (r1 - r0) * (c1 - c0)
                    total = 0.0
                    for c in range(nc):
                        for i in range(r0, r1):
                            for j in range(c0, c1):
                                total = total + images[n, c, i, j]
                    mean = total / m
                    acc = 0.0
                    for c in range(nc):
                        for i in range(r0, r1):
                            for j in range(c0, c1):
                                d = images[n, c, i, j] - mean
                                acc = acc + d * d
                    ov[n, bi, bj] = acc / m
    return out


def obf_loss_grad(const double[:, :, :, ::1] images, int s, double v_e):
    cdef Py_ssize_t n_img = images.shape[0], nc = images.shape[1]
    cdef Py_ssize_t h = images.shape[2], w = images.shape[3]
    cdef Py_ssize_t nh = (h + s - 1) // s, nw = (w + s - 1) // s
    loss = np.zeros(n_img, dtype=np.float64)
    grad = np.empty((n_img, nc, h, w), dtype=np.float64)
    cdef double[::1] lv = loss
    cdef double[:, :, :, ::1] gv = grad
    cdef Py_ssize_t n, c, i, j, bi, bj, r0, r1, c0, c1
    cdef double total, mean, d, acc, m, dev, coef
    with nogil:
        for n in range(n_img):
            for bi in range(nh):
                r0 = bi * s
                r1 = r0 + s if r0 + s < h else h
                for bj in range(nw):
                    c0 = bj * s
                    c1 = c0 + s if c0 + s < w else w
                    m = nc * (r1 - r0) * (c1 - c0)
                    total = 0.0
                    for c in range(nc):
                        for i in range(r0, r1):
                            for j in range(c0, c1):
                                total = total + images[n, c, i, j]
                    mean = total / m
                    acc = 0.0
                    for c in range(nc):
                        for i in range(r0, r1):
                            for j in range(c0, c1):
                                d = images[n, c, i, j] - mean
                                acc = acc + d * d
                    dev = acc / m - v_e
                    lv[n] = lv[n] + dev * dev
                    # d/dp (var - v_e)^2 = 2 (var - v_e) * 2 (p - mean) / m
                    coef = 4.0 * dev / m
                    for c in range(nc):
                        for i in range(r0, r1):
                            for j in range(c0, c1):
                                gv[n, c, i, j] = coef * (images[n, c, i, j] - mean)
    return loss, grad


cdef void _box_stats(const double[:, :, ::1] img, int win, double* integ,
                     double* mu, double* var) noexcept nogil:
    # integ is scratch of size (h + 1) * (w + 1); mu/var are (C, oh, ow)
    cdef Py_ssize_t nc = img.shape[0], h = img.shape[1], w = img.shape[2]
    cdef Py_ssize_t oh = h - win + 1, ow = w - win + 1, w1 = w + 1
    cdef Py_ssize_t c, i, j
    cdef double area = win * win, s1, p
    cdef double* integ2 = integ + (h + 1) * w1
    for c in range(nc):
        for j in range(w1):
            integ[j] = 0.0
            integ2[j] = 0.0
        for i in range(h):
            integ[(i + 1) * w1] = 0.0
            integ2[(i + 1) * w1] = 0.0
            for j in range(w):
                p = img[c, i, j]
                integ[(i + 1) * w1 + j + 1] = (p + integ[i * w1 + j + 1]
                                               + integ[(i + 1) * w1 + j] - integ[i * w1 + j])
                integ2[(i + 1) * w1 + j + 1] = (p * p + integ2[i * w1 + j + 1]
                                                + integ2[(i + 1) * w1 + j] - integ2[i * w1 + j])
        for i in range(oh):
            for j in range(ow):
                s1 = (integ[(i + win) * w1 + j + win] - integ[i * w1 + j + win]
                      - integ[(i + win) * w1 + j] + integ[i * w1 + j]) / area
                mu[(c * oh + i) * ow + j] = s1
                var[(c * oh + i) * ow + j] = (
                    (integ2[(i + win) * w1 + j + win] - integ2[i * w1 + j + win]
                     - integ2[(i + win) * w1 + j] + integ2[i * w1 + j]) / area - s1 * s1)


def ssim_max(const double[:, :, :, ::1] recon, const double[:, :, :, ::1] refs,
             int win, double data_range):
    """Best SSIM of every ``recon`` image against the ``refs`` set and its argmax."""
    cdef Py_ssize_t n_rec = recon.shape[0], n_ref = refs.shape[0]
    cdef Py_ssize_t nc = recon.shape[1], h = recon.shape[2], w = recon.shape[3]
    cdef Py_ssize_t oh = h - win + 1, ow = w - win + 1, w1 = w + 1
    cdef Py_ssize_t plane = nc * oh * ow
    best = np.full(n_rec, -np.inf, dtype=np.float64)
    arg = np.zeros(n_rec, dtype=np.int64)
    cdef double[::1] bv = best
    cdef cnp.int64_t[::1] av = arg
    cdef double c1 = (0.01 * data_range) ** 2, c2 = (0.03 * data_range) ** 2
    cdef double area = win * win
    cdef double* integ = <double*> malloc(2 * (h + 1) * w1 * sizeof(double))
    cdef double* rmu = <double*> malloc(n_rec * plane * sizeof(double))
    cdef double* rvar = <double*> malloc(n_rec * plane * sizeof(double))
    cdef double* fmu = <double*> malloc(n_ref * plane * sizeof(double))
    cdef double* fvar = <double*> malloc(n_ref * plane * sizeof(double))
    cdef Py_ssize_t a, b, c, i, j, k
    cdef double total, mx, my, cov, sx, sy, q
    if not (integ and rmu and rvar and fmu and fvar):
        free(integ); free(rmu); free(rvar); free(fmu); free(fvar)
        raise MemoryError()
    try:
        with nogil:
            for a in range(n_rec):
                _box_stats(recon[a], win, integ, rmu + a * plane, rvar + a * plane)
            for b in range(n_ref):
                _box_stats(refs[b], win, integ, fmu + b * plane, fvar + b * plane)
            for a in range(n_rec):
                for b in range(n_ref):
                    total = 0.0
                    for c in range(nc):
                        # integral image of the product, reusing the scratch buffer
                        for j in range(w1):
                            integ[j] = 0.0
                        for i in range(h):
                            integ[(i + 1) * w1] = 0.0
                            for j in range(w):
                                integ[(i + 1) * w1 + j + 1] = (
                                    recon[a, c, i, j] * refs[b, c, i, j]
                                    + integ[i * w1 + j + 1] + integ[(i + 1) * w1 + j]
                                    - integ[i * w1 + j])
                        for i in range(oh):
                            for j in range(ow):
                                k = (c * oh + i) * ow + j
                                mx = rmu[a * plane + k]
                                my = fmu[b * plane + k]
                                sx = rvar[a * plane + k]
                                sy = fvar[b * plane + k]
                                cov = (integ[(i + win) * w1 + j + win] - integ[i * w1 + j + win]
                                       - integ[(i + win) * w1 + j] + integ[i * w1 + j]) / area - mx * my
                                q = ((2.0 * mx * my + c1) * (2.0 * cov + c2)
                                     / ((mx * mx + my * my + c1) * (sx + sy + c2)))
                                total = total + q
                    total = total / plane
                    if total > bv[a]:
                        bv[a] = total
                        av[a] = b
    finally:
        free(integ); free(rmu); free(rvar); free(fmu); free(fvar)
    return best, arg
