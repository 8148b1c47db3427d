"""Independent reference implementations used as test oracles."""

import numpy as np

from dpif.tensor import Parameter, backward, zero_grad


def numeric_grad(fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        hi = fn()
        arr[idx] = old - eps
        lo = fn()
        arr[idx] = old
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(loss_fn, params, eps=1e-6, tol=1e-5):
    """Compare analytic and numeric gradients for every parameter; returns worst error."""
    zero_grad(params)
    grads = backward(loss_fn())
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: float(loss_fn().data), p.data, eps)
        ana = grads[p.name]
        denom = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        err = np.abs(num - ana).max() / denom
        worst = max(worst, err)
        assert err <= tol, f"{p.name}: relative error {err:.3e}"
    return worst


def param(name, rng, shape, scale=1.0):
    return Parameter(name, rng.normal(0, scale, shape), dtype=np.float64)


def naive_conv2d(x, w, b, stride, padding):
    """Direct six-loop cross-correlation in N,H,W,C layout."""
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-wd // stride)
        ph = max(0, (ho - 1) * stride + kh - h)
        pw = max(0, (wo - 1) * stride + kw - wd)
        top, left = ph - ph // 2, pw - pw // 2
    else:
        ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
        top = left = 0
    out = np.zeros((n, ho, wo, co))
    for b_ in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(co):
                    acc = 0.0 if b is None else b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            r, c = i * stride + di - top, j * stride + dj - left
                            if 0 <= r < h and 0 <= c < wd:
                                acc += x[b_, r, c, :] @ w[di, dj, :, o]
                    out[b_, i, j, o] = acc
    return out


def sweep_oracle(genuine, impostor):
    """Exhaustive threshold enumeration with plain loops.

    AUC comes from pairwise ranking (ties count half), which equals the
    trapezoid area under the step ROC.
    """
    genuine, impostor = list(genuine), list(impostor)
    thresholds = [np.inf] + sorted(set(genuine) | set(impostor), reverse=True) + [-np.inf]
    pts = []
    for t in thresholds:
        tar = sum(1 for s in genuine if s >= t) / len(genuine)
        far = sum(1 for s in impostor if s >= t) / len(impostor)
        pts.append((far, tar))
    wins = 0.0
    for g in genuine:
        for i in impostor:
            wins += 1.0 if g > i else 0.5 if g == i else 0.0
    auc = wins / (len(genuine) * len(impostor))

    eer = None
    for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
        d0, d1 = f0 - (1 - t0), f1 - (1 - t1)
        if d0 == 0:
            eer = f0
            break
        if d0 < 0 <= d1:
            eer = f0 + (-d0 / (d1 - d0)) * (f1 - f0)
            break

    def tar_at(x):
        on = [t for f, t in pts if f == x]
        if on:
            return max(on)
        for (f0, t0), (f1, t1) in zip(pts, pts[1:]):
            if f0 < x < f1:
                return t0 + (x - f0) / (f1 - f0) * (t1 - t0)
        raise AssertionError("target FAR not bracketed")

    return auc, eer, tar_at(0.01), tar_at(0.05)


def loop_fuse(m):
    """Per-subject max over gallery columns, first-appearance order."""
    order = list(dict.fromkeys(m.gallery_ids))
    out = np.empty((len(m.probe_ids), len(order)))
    for i in range(len(m.probe_ids)):
        for j, s in enumerate(order):
            out[i, j] = max(m.scores[i, c] for c, g in enumerate(m.gallery_ids) if g == s)
    return out, order
