"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PGCN_DISABLE_NUMBA`` is unset or falsy. Both paths expose the same
functions with the same argument conventions, so callers never branch on the
backend. All kernels expect C-contiguous float64 input.
"""
import os
import types

import numpy as np

_FALSY = ("", "0", "false", "no", "off")


def _numba_requested():
    return os.environ.get("PGCN_DISABLE_NUMBA", "").strip().lower() in _FALSY


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    # summing in sorted order keeps the result independent of column order
    return e / np.sort(e, axis=-1).sum(axis=-1, keepdims=True)


def _np_softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def _np_conv_forward(x, w, dilation):
    # x: (M, T, C), w: (P, C, D) -> (M, T - d(P-1), D)
    P = w.shape[0]
    T = x.shape[1]
    span = dilation * (P - 1)
    t_out = T - span
    out = np.zeros((x.shape[0], t_out, w.shape[2]))
    for p in range(P):
        start = span - dilation * p
        out += x[:, start:start + t_out, :] @ w[p]
    return out


def _np_conv_backward(x, w, dilation, g):
    P = w.shape[0]
    span = dilation * (P - 1)
    t_out = g.shape[1]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for p in range(P):
        start = span - dilation * p
        xs = x[:, start:start + t_out, :]
        dx[:, start:start + t_out, :] += g @ w[p].T
        dw[p] = xs.reshape(-1, x.shape[2]).T @ g.reshape(-1, g.shape[2])
    return dx, dw


def _np_gated_forward(a, b):
    t = np.tanh(a)
    s = 1.0 / (1.0 + np.exp(-b))
    return t * s, t, s


def _np_gated_backward(t, s, g):
    return g * s * (1.0 - t * t), g * t * s * (1.0 - s)


def _np_normalize_rows(x):
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    rng = hi - lo
    flat = rng == 0.0
    bar = (x - lo) / np.where(flat, 1.0, rng)
    bar = np.where(flat, 0.0, bar)
    norm = np.sqrt((bar * bar).sum(axis=-1, keepdims=True))
    return np.where(norm > 0.0, bar / np.where(norm > 0.0, norm, 1.0), 0.0)


def _np_adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    p -= lr * m_hat / (np.sqrt(v_hat) + eps)


numpy_kernels = types.SimpleNamespace(
    name="numpy",
    softmax=_np_softmax,
    softmax_backward=_np_softmax_backward,
    conv_forward=_np_conv_forward,
    conv_backward=_np_conv_backward,
    gated_forward=_np_gated_forward,
    gated_backward=_np_gated_backward,
    normalize_rows=_np_normalize_rows,
    adam_update=_np_adam_update,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax2d(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            mx = x[r, 0]
            for j in range(1, n):
                if x[r, j] > mx:
                    mx = x[r, j]
            for j in range(n):
                out[r, j] = np.exp(x[r, j] - mx)
            # summing in sorted order keeps the result independent of column order
            total = 0.0
            for e in np.sort(out[r]):
                total += e
            for j in range(n):
                out[r, j] /= total
        return out

    @njit(cache=True)
    def softmax_backward2d(y, g):
        rows, n = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += g[r, j] * y[r, j]
            for j in range(n):
                out[r, j] = y[r, j] * (g[r, j] - dot)
        return out

    @njit(cache=True)
    def conv_forward(x, w, dilation):
        M, T, C = x.shape
        P, _, D = w.shape
        span = dilation * (P - 1)
        t_out = T - span
        out = np.zeros((M, t_out, D))
        for m in range(M):
            for t in range(t_out):
                for p in range(P):
                    src = t + span - dilation * p
                    for c in range(C):
                        xv = x[m, src, c]
                        for d in range(D):
                            out[m, t, d] += xv * w[p, c, d]
        return out

    @njit(cache=True)
    def conv_backward(x, w, dilation, g):
        M, T, C = x.shape
        P, _, D = w.shape
        span = dilation * (P - 1)
        t_out = g.shape[1]
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for m in range(M):
            for t in range(t_out):
                for p in range(P):
                    src = t + span - dilation * p
                    for c in range(C):
                        xv = x[m, src, c]
                        acc = 0.0
                        for d in range(D):
                            gv = g[m, t, d]
                            acc += gv * w[p, c, d]
                            dw[p, c, d] += xv * gv
                        dx[m, src, c] += acc
        return dx, dw

    @njit(cache=True)
    def gated_forward1d(a, b):
        n = a.shape[0]
        h = np.empty(n)
        t = np.empty(n)
        s = np.empty(n)
        for i in range(n):
            tv = np.tanh(a[i])
            sv = 1.0 / (1.0 + np.exp(-b[i]))
            t[i] = tv
            s[i] = sv
            h[i] = tv * sv
        return h, t, s

    @njit(cache=True)
    def gated_backward1d(t, s, g):
        n = t.shape[0]
        da = np.empty(n)
        db = np.empty(n)
        for i in range(n):
            da[i] = g[i] * s[i] * (1.0 - t[i] * t[i])
            db[i] = g[i] * t[i] * s[i] * (1.0 - s[i])
        return da, db

    @njit(cache=True)
    def normalize_rows2d(x):
        rows, n = x.shape
        out = np.zeros_like(x)
        for r in range(rows):
            lo = x[r, 0]
            hi = x[r, 0]
            for j in range(1, n):
                if x[r, j] < lo:
                    lo = x[r, j]
                if x[r, j] > hi:
                    hi = x[r, j]
            rng = hi - lo
            if rng == 0.0:
                continue
            sq = 0.0
            for j in range(n):
                v = (x[r, j] - lo) / rng
                out[r, j] = v
                sq += v * v
            norm = np.sqrt(sq)
            for j in range(n):
                out[r, j] /= norm
        return out

    @njit(cache=True)
    def adam_update1d(p, g, m, v, lr, beta1, beta2, eps, step):
        c1 = 1.0 - beta1 ** step
        c2 = 1.0 - beta2 ** step
        for i in range(p.shape[0]):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)

    def _rows(x):
        return np.ascontiguousarray(x).reshape(-1, x.shape[-1])

    def softmax(x):
        return softmax2d(_rows(x)).reshape(x.shape)

    def softmax_backward(y, g):
        return softmax_backward2d(_rows(y), _rows(g)).reshape(y.shape)

    def gated_forward(a, b):
        h, t, s = gated_forward1d(np.ascontiguousarray(a).ravel(), np.ascontiguousarray(b).ravel())
        return h.reshape(a.shape), t.reshape(a.shape), s.reshape(a.shape)

    def gated_backward(t, s, g):
        da, db = gated_backward1d(t.ravel(), s.ravel(), np.ascontiguousarray(g).ravel())
        return da.reshape(t.shape), db.reshape(t.shape)

    def normalize_rows(x):
        return normalize_rows2d(_rows(x)).reshape(x.shape)

    def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
        # in-place on the caller's arrays; ravel() of contiguous arrays is a view
        adam_update1d(p.ravel(), np.ascontiguousarray(g).ravel(), m.ravel(), v.ravel(),
                      float(lr), float(beta1), float(beta2), float(eps), int(step))

    def conv_fwd(x, w, dilation):
        return conv_forward(np.ascontiguousarray(x), np.ascontiguousarray(w), int(dilation))

    def conv_bwd(x, w, dilation, g):
        return conv_backward(np.ascontiguousarray(x), np.ascontiguousarray(w), int(dilation),
                             np.ascontiguousarray(g))

    return types.SimpleNamespace(
        name="numba",
        softmax=softmax,
        softmax_backward=softmax_backward,
        conv_forward=conv_fwd,
        conv_backward=conv_bwd,
        gated_forward=gated_forward,
        gated_backward=gated_backward,
        normalize_rows=normalize_rows,
        adam_update=adam_update,
    )


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_kernels = None

kernels = numba_kernels if (numba_kernels is not None and _numba_requested()) else numpy_kernels
BACKEND = kernels.name
