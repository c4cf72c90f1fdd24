"""Independent reference implementations used as test oracles.

None of these share code with the engine: the GEMM oracle contracts the
shared axis through numpy's non-optimized einsum path (its own C loops,
not the BLAS kernel the engine's micro-tiles call), convolution is
computed directly in the spatial domain, and the small literal-loop
versions below pin the vectorized oracles down on tiny inputs.
Everything accumulates in float64.
"""

import numpy as np


def gemm_oracle(a, b, c0=None):
    """Triple-loop product semantics, float64 accumulation."""
    out = np.einsum("ik,kj->ij", np.asarray(a, dtype=np.float64),
                    np.asarray(b, dtype=np.float64), optimize=False)
    if c0 is not None:
        out = out + np.asarray(c0, dtype=np.float64)
    return out


def triple_loop_gemm(a, b):
    """Literal three-loop product; only for tiny shapes."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for p in range(k):
            aik = float(a[i][p])
            for j in range(n):
                out[i][j] += aik * float(b[p][j])
    return np.array(out, dtype=np.float64)


def direct_conv(x4, w, d):
    """Direct spatial convolution (no im2col, no matmul), float64.

    x4 is NHWC, w is (cout, kh, kw, cin); returns NHWC float64.
    """
    x4 = np.asarray(x4, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    t, h, wd, cin = x4.shape
    kh, kw = d.kernel
    sh, sw = d.stride
    ph, pw = d.padding
    ho, wo = d.output_spatial(h, wd)
    xp = np.zeros((t, h + 2 * ph, wd + 2 * pw, cin), dtype=np.float64)
    xp[:, ph:ph + h, pw:pw + wd, :] = x4
    out = np.zeros((t, ho, wo, d.cout), dtype=np.float64)
    for r in range(kh):
        for s in range(kw):
            xs = xp[:, r:r + ho * sh:sh, s:s + wo * sw:sw, :]
            out += np.einsum("bhwi,oi->bhwo", xs, w[:, r, s, :],
                             optimize=False)
    return out


def direct_conv_loops(x4, w, d):
    """Literal seven-loop convolution; only for tiny shapes."""
    t, h, wd, cin = x4.shape
    kh, kw = d.kernel
    sh, sw = d.stride
    ph, pw = d.padding
    ho, wo = d.output_spatial(h, wd)
    out = np.zeros((t, ho, wo, d.cout), dtype=np.float64)
    for b in range(t):
        for oh in range(ho):
            for ow in range(wo):
                for co in range(d.cout):
                    acc = 0.0
                    for r in range(kh):
                        for s in range(kw):
                            ih = oh * sh - ph + r
                            iw = ow * sw - pw + s
                            if 0 <= ih < h and 0 <= iw < wd:
                                for ci in range(cin):
                                    acc += float(x4[b, ih, iw, ci]) * \
                                        float(w[co, r, s, ci])
                    out[b, oh, ow, co] = acc
    return out


def im2col_oracle(x4, d):
    """Sliding-window enumerator building the k x n matrix element-wise."""
    t, h, wd, cin = x4.shape
    kh, kw = d.kernel
    sh, sw = d.stride
    ph, pw = d.padding
    ho, wo = d.output_spatial(h, wd)
    k = kh * kw * cin
    n = t * ho * wo
    out = np.zeros((k, n), dtype=np.float32)
    for p in range(k):
        ci = p % cin
        rs = p // cin
        r, s = rs // kw, rs % kw
        for q in range(n):
            ow = q % wo
            rest = q // wo
            oh, b = rest % ho, rest // ho
            ih = oh * sh - ph + r
            iw = ow * sw - pw + s
            if 0 <= ih < h and 0 <= iw < wd:
                out[p, q] = x4[b, ih, iw, ci]
    return out


def pool_oracle(x4, d):
    """Window-enumeration pooling with explicit loops (float64)."""
    t, h, wd, c = x4.shape
    kh, kw = d.kernel
    sh, sw = d.stride
    ph, pw = d.padding
    ho, wo = d.output_spatial(h, wd)
    out = np.zeros((t, ho, wo, c), dtype=np.float64)
    for oh in range(ho):
        for ow in range(wo):
            vals = []
            for r in range(kh):
                for s in range(kw):
                    ih = oh * sh - ph + r
                    iw = ow * sw - pw + s
                    if 0 <= ih < h and 0 <= iw < wd:
                        vals.append(x4[:, ih, iw, :].astype(np.float64))
            stack = np.stack(vals)
            if d.mode == "max":
                out[:, oh, ow, :] = stack.max(axis=0)
            else:
                out[:, oh, ow, :] = stack.sum(axis=0) / len(vals)
    return out


def layout_permutation_oracle(shape):
    """NHWC -> NCHW buffer permutation by naive index enumeration.

    Returns perm with nchw_buffer[i] == nhwc_buffer[perm[i]].
    """
    t, h, w, c = shape
    perm = []
    for b in range(t):
        for ci in range(c):
            for ih in range(h):
                for iw in range(w):
                    perm.append(((b * h + ih) * w + iw) * c + ci)
    return np.array(perm)


def sliding_window_count(extent, k, stride, pad):
    """Count window placements by walking them one by one."""
    count = 0
    pos = 0
    padded = extent + 2 * pad
    while pos + k <= padded:
        count += 1
        pos += stride
    return count


def ulp_distance(a, b):
    """Elementwise ULP distance between float32 arrays (sign-aware)."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    ia = a.view(np.int32).astype(np.int64)
    ib = b.view(np.int32).astype(np.int64)
    # Map the sign-magnitude float ordering onto a monotone integer line.
    ia = np.where(ia < 0, -(ia & 0x7FFFFFFF), ia)
    ib = np.where(ib < 0, -(ib & 0x7FFFFFFF), ib)
    return np.abs(ia - ib)
