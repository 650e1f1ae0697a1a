"""Compiled inner loops of the Gaussian splatter.

Plain serial loops with a fixed iteration order: results are bit-identical
across runs and never depend on thread counts. Points arrive already mapped
to continuous voxel-index coordinates (slice, row, col); each point touches
the voxels whose centers lie within `trunc` of it.

The kernel is the exact Gaussian ``amp * exp(-d^2 / (2 sigma^2))`` for
``d <= trunc - taper`` and is multiplied by a C2 smootherstep that falls to
zero at ``d = trunc``. Without the taper the cutoff would jump by
``amp * exp(-trunc^2 / (2 sigma^2))``, which breaks finite-difference
validation of the gradients; the taper keeps the forward continuously
differentiable while leaving the kernel interior untouched.

The Gaussian factorizes per axis, so each point needs one small exp table
per axis rather than one exp per voxel.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def splat_forward(pts, depth, height, width, sigma, trunc, taper, amp, reach, out):
    """Accumulate unclamped tapered-Gaussian occupancy.

    pts: (V, N, 3) float64 voxel-index coordinates per view.
    out: (V, depth, height, width) float64, zero-initialized by the caller.
    """
    nviews, npts = pts.shape[0], pts.shape[1]
    t2 = trunc * trunc
    inner = trunc - taper
    inner2 = inner * inner
    inv = -0.5 / (sigma * sigma)
    span = 2 * reach + 1
    ed2 = np.empty(span)
    er2 = np.empty(span)
    ec2 = np.empty(span)
    gz = np.empty(span)
    gy = np.empty(span)
    gx = np.empty(span)
    for v in range(nviews):
        for n in range(npts):
            pd = pts[v, n, 0]
            pr = pts[v, n, 1]
            pc = pts[v, n, 2]
            d0 = int(np.floor(pd + 0.5)) - reach
            r0 = int(np.floor(pr + 0.5)) - reach
            c0 = int(np.floor(pc + 0.5)) - reach
            for i in range(span):
                ed = d0 + i - pd
                er = r0 + i - pr
                ec = c0 + i - pc
                ed2[i] = ed * ed
                er2[i] = er * er
                ec2[i] = ec * ec
                gz[i] = np.exp(ed2[i] * inv)
                gy[i] = np.exp(er2[i] * inv)
                gx[i] = np.exp(ec2[i] * inv)
            for i in range(span):
                dd = d0 + i
                if dd < 0 or dd >= depth or ed2[i] > t2:
                    continue
                for j in range(span):
                    rr = r0 + j
                    if rr < 0 or rr >= height:
                        continue
                    zy = ed2[i] + er2[j]
                    if zy > t2:
                        continue
                    gzy = gz[i] * gy[j]
                    for k in range(span):
                        cc = c0 + k
                        if cc < 0 or cc >= width:
                            continue
                        d2 = zy + ec2[k]
                        if d2 <= t2:
                            g = amp * gzy * gx[k]
                            if d2 > inner2:
                                u = (trunc - np.sqrt(d2)) / taper
                                g *= u * u * u * (u * (6.0 * u - 15.0) + 10.0)
                            out[v, dd, rr, cc] += g


@njit(cache=True, nogil=True)
def splat_backward(pts, depth, height, width, sigma, trunc, taper, amp, reach, upstream, grad):
    """Gradient of <upstream, splat_forward(pts)> w.r.t. the index coordinates.

    upstream: (V, depth, height, width), already masked where the occupancy
    clamp was active. grad: (V, N, 3) float64, zero-initialized.
    """
    nviews, npts = pts.shape[0], pts.shape[1]
    t2 = trunc * trunc
    inner = trunc - taper
    inner2 = inner * inner
    inv = -0.5 / (sigma * sigma)
    inv_s2 = 1.0 / (sigma * sigma)
    span = 2 * reach + 1
    ed1 = np.empty(span)
    er1 = np.empty(span)
    ec1 = np.empty(span)
    gz = np.empty(span)
    gy = np.empty(span)
    gx = np.empty(span)
    for v in range(nviews):
        for n in range(npts):
            pd = pts[v, n, 0]
            pr = pts[v, n, 1]
            pc = pts[v, n, 2]
            d0 = int(np.floor(pd + 0.5)) - reach
            r0 = int(np.floor(pr + 0.5)) - reach
            c0 = int(np.floor(pc + 0.5)) - reach
            for i in range(span):
                ed1[i] = d0 + i - pd
                er1[i] = r0 + i - pr
                ec1[i] = c0 + i - pc
                gz[i] = np.exp(ed1[i] * ed1[i] * inv)
                gy[i] = np.exp(er1[i] * er1[i] * inv)
                gx[i] = np.exp(ec1[i] * ec1[i] * inv)
            gd = 0.0
            gr = 0.0
            gc = 0.0
            for i in range(span):
                dd = d0 + i
                ed2 = ed1[i] * ed1[i]
                if dd < 0 or dd >= depth or ed2 > t2:
                    continue
                for j in range(span):
                    rr = r0 + j
                    if rr < 0 or rr >= height:
                        continue
                    zy = ed2 + er1[j] * er1[j]
                    if zy > t2:
                        continue
                    gzy = gz[i] * gy[j]
                    for k in range(span):
                        cc = c0 + k
                        if cc < 0 or cc >= width:
                            continue
                        d2 = zy + ec1[k] * ec1[k]
                        if d2 <= t2:
                            u0 = upstream[v, dd, rr, cc]
                            if u0 != 0.0:
                                g = amp * gzy * gx[k]
                                if d2 > inner2:
                                    # d/dp of g(d) * w(d): w falls as d grows,
                                    # so its term adds along +e.
                                    d = np.sqrt(d2)
                                    u = (trunc - d) / taper
                                    w = u * u * u * (u * (6.0 * u - 15.0) + 10.0)
                                    dw = 30.0 * u * u * (1.0 - u) * (1.0 - u)
                                    coeff = u0 * g * (w * inv_s2 + dw / (taper * d))
                                else:
                                    coeff = u0 * g * inv_s2
                                gd += coeff * ed1[i]
                                gr += coeff * er1[j]
                                gc += coeff * ec1[k]
            grad[v, n, 0] = gd
            grad[v, n, 1] = gr
            grad[v, n, 2] = gc


@njit(cache=True, nogil=True)
def termination_forward(occ, t, prefix, residual):
    """Front-to-back ray march over (pixels, depth) arrays.

    t[m, d] = occ[m, d] * prod_{j<d}(1 - occ[m, j]); prefix stores the
    exclusive product and residual the full survival probability.
    """
    pixels, depth = occ.shape
    for m in range(pixels):
        run = 1.0
        for d in range(depth):
            prefix[m, d] = run
            t[m, d] = occ[m, d] * run
            run *= 1.0 - occ[m, d]
        residual[m] = run


@njit(cache=True, nogil=True)
def termination_backward(occ, prefix, up_t, up_res, grad):
    """Division-free reverse recurrence for the ray march gradient."""
    pixels, depth = occ.shape
    for m in range(pixels):
        g = up_res[m]
        grad[m, depth - 1] = prefix[m, depth - 1] * (up_t[m, depth - 1] - g)
        for i in range(depth - 2, -1, -1):
            g = up_t[m, i + 1] * occ[m, i + 1] + g * (1.0 - occ[m, i + 1])
            grad[m, i] = prefix[m, i] * (up_t[m, i] - g)
