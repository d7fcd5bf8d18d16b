"""Independent reference computations used by the tests.

Nothing here reuses the package's differentiation, transform or attack
code paths, so agreement is evidence rather than tautology.
"""
import numpy as np

from bsrkit import tensor as T


def _same_pattern(a, b):
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def gradient_check(model, x, y, h=1e-3, coords=None, threshold=1e-4):
    """Compare the backward input gradient with central differences.

    Returns a dict with the relative errors of every coordinate whose
    finite difference exceeds ``threshold`` (``raw``) and of the subset
    whose stencil stays on one linear piece of the network (``smooth``).
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.atleast_1d(np.asarray(y))
    xt = T.Tensor(x, requires_grad=True)
    T.backward(model.loss(xt, y, reduction="sum"))
    analytic = xt.grad.reshape(-1).astype(np.float64)
    coords = np.arange(x.size) if coords is None else np.asarray(coords)

    def f(v):
        return T.nll_loss(T.log_softmax(model.forward(v, dtype=np.float64)), y, "sum").item()

    fd = T.finite_diff_grad(f, x, h, coords).reshape(-1)
    base64 = x.astype(np.float64)
    pattern = model.activation_pattern(base64)
    smooth = np.zeros(x.size, dtype=bool)
    for i in coords:
        v = base64.reshape(-1).copy()
        v[i] += h
        up = model.activation_pattern(v.reshape(x.shape))
        v[i] -= 2 * h
        down = model.activation_pattern(v.reshape(x.shape))
        smooth[i] = _same_pattern(pattern, up) and _same_pattern(pattern, down)
    sel = np.zeros(x.size, dtype=bool)
    sel[coords] = True
    big = sel & (np.abs(fd) > threshold)
    rel = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-300)
    return {"raw": rel[big], "smooth": rel[big & smooth], "kinked": int((big & ~smooth).sum())}


def brute_force_rotation(plane, angle_deg, mode="nearest"):
    """Rotate a square plane about its centre by inverse-mapping every pixel with plain loops."""
    h, w = plane.shape
    out = np.zeros_like(plane, dtype=np.float64)
    th = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    for r in range(h):
        for c in range(w):
            dy, dx = r - cy, c - cx
            sy = cy + np.cos(th) * dy + np.sin(th) * dx
            sx = cx - np.sin(th) * dy + np.cos(th) * dx
            if mode == "nearest":
                iy, ix = int(np.floor(sy + 0.5)), int(np.floor(sx + 0.5))
                if 0 <= iy < h and 0 <= ix < w:
                    out[r, c] = plane[iy, ix]
            else:
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                fy, fx = sy - y0, sx - x0
                for yy, xx, wt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                                   (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
                    if 0 <= yy < h and 0 <= xx < w:
                        out[r, c] += wt * plane[yy, xx]
    return out


def gaussian_kernel(size, sigma):
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def grad_cam_direct(activation, grad):
    """Grad-CAM written straight from its definition: ReLU of the weighted channel sum, max-normalised."""
    C, H, W = activation.shape
    cam = np.zeros((H, W))
    for k in range(C):
        alpha = grad[k].sum() / (H * W)
        cam += alpha * activation[k]
    cam = np.maximum(cam, 0)
    m = cam.max()
    return cam / m if m > 0 else cam


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return 0.0 if den == 0 else float((a * b).sum() / den)
