"""Independent brute-force oracles shared by the test suite.

Everything here is deliberately written as plain scalar loops (or direct
formula evaluation), independent of the library's vectorized paths.
"""

import math

import numpy as np


def conv2d_loops(x, k, stride=1, pad=0):
    """Direct nested-loop cross-correlation, NCHW x (Cout,Cin,kh,kw)."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for b in range(n):
        for co in range(cout):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                ii = oi * stride + u - pad
                                jj = oj * stride + v - pad
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += x[b, ci, ii, jj] * k[co, ci, u, v]
                    out[b, co, oi, oj] = acc
    return out


def conv_transpose2d_loops(x, k, stride=1, pad=0, out_pad=0):
    """Scatter form of the transposed convolution, (Cin,Cout,kh,kw) kernel."""
    n, cin, h, w = x.shape
    _, cout, kh, kw = k.shape
    oh = (h - 1) * stride - 2 * pad + kh + out_pad
    ow = (w - 1) * stride - 2 * pad + kw + out_pad
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for b in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(w):
                    v = x[b, ci, i, j]
                    for co in range(cout):
                        for u in range(kh):
                            for t in range(kw):
                                oi = i * stride + u - pad
                                oj = j * stride + t - pad
                                if 0 <= oi < oh and 0 <= oj < ow:
                                    out[b, co, oi, oj] += v * k[ci, co, u, t]
    return out


def bce_loops(p, gm, ignore=None, eps=1e-7):
    """Scalar-loop mean BCE over non-ignored pixels."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    gm = np.asarray(gm, dtype=np.float64).reshape(-1)
    ig = np.zeros_like(p) if ignore is None else np.asarray(ignore).reshape(-1)
    total, count = 0.0, 0
    for pi, gi, m in zip(p, gm, ig):
        if m:
            continue
        pc = min(max(pi, eps), 1.0 - eps)
        total += -(gi * math.log(pc) + (1.0 - gi) * math.log(1.0 - pc))
        count += 1
    return total / count


def block_mean_loops(mask, th, tw):
    """Area-average downscale by explicit block loops."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[-2], mask.shape[-1]
    fh, fw = h // th, w // tw
    out = np.zeros(mask.shape[:-2] + (th, tw), dtype=np.float64)
    flat_lead = int(np.prod(mask.shape[:-2], dtype=int)) if mask.ndim > 2 else 1
    m2 = mask.reshape(flat_lead, h, w)
    o2 = out.reshape(flat_lead, th, tw)
    for b in range(flat_lead):
        for i in range(th):
            for j in range(tw):
                acc = 0.0
                for u in range(fh):
                    for v in range(fw):
                        acc += m2[b, i * fh + u, j * fw + v]
                o2[b, i, j] = acc / (fh * fw)
    return out.reshape(mask.shape[:-2] + (th, tw))


def iou_loops(pred, gt, ignore=None):
    """Pixel-count IoU via scalar loop; both-empty union counts as 1.0."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    ig = np.zeros_like(pred) if ignore is None else np.asarray(ignore).reshape(-1)
    inter = union = 0
    for p, g, m in zip(pred, gt, ig):
        if m:
            continue
        if p and g:
            inter += 1
        if p or g:
            union += 1
    return 1.0 if union == 0 else inter / union


def inter_union_counts(pred, gt, ignore=None):
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    ig = np.zeros_like(pred) if ignore is None else np.asarray(ignore).reshape(-1)
    inter = union = 0
    for p, g, m in zip(pred, gt, ig):
        if m:
            continue
        if p and g:
            inter += 1
        if p or g:
            union += 1
    return inter, union
