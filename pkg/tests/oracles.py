"""Independent reference implementations used as test oracles. These are
deliberately written as plain loops / brute-force routines so they share no
code path with the library."""

from __future__ import annotations

import numpy as np
import torch


def naive_ssim(a: np.ndarray, b: np.ndarray, window: int = 8, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """Per-window loop SSIM with uniform windows and biased moments."""
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, c = a.shape
    vals = []
    for ch in range(c):
        x = a[:, :, ch].astype(np.float64)
        y = b[:, :, ch].astype(np.float64)
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                px = x[i : i + window, j : j + window]
                py = y[i : i + window, j : j + window]
                mx, my = px.mean(), py.mean()
                vx = (px * px).mean() - mx * mx
                vy = (py * py).mean() - my * my
                cov = (px * py).mean() - mx * my
                num = (2 * mx * my + c1) * (2 * cov + c2)
                den = (mx * mx + my * my + c1) * (vx + vy + c2)
                vals.append(num / den)
    return float(np.mean(vals))


def brute_cumprod_alphas(betas) -> list[float]:
    """Cumulative products of (1 - beta) via an explicit loop."""
    out = []
    acc = 1.0
    for b in betas:
        acc *= 1.0 - float(b)
        out.append(acc)
    return out


def naive_bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers (align_corners=False) and
    edge clamping, one output pixel at a time."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    sy = in_h / out_h
    sx = in_w / out_w
    for i in range(out_h):
        for j in range(out_w):
            fy = (i + 0.5) * sy - 0.5
            fx = (j + 0.5) * sx - 0.5
            y0 = int(np.floor(fy))
            x0 = int(np.floor(fx))
            wy = fy - y0
            wx = fx - x0
            y0c = min(max(y0, 0), in_h - 1)
            y1c = min(max(y0 + 1, 0), in_h - 1)
            x0c = min(max(x0, 0), in_w - 1)
            x1c = min(max(x0 + 1, 0), in_w - 1)
            out[i, j] = (
                img[y0c, x0c] * (1 - wy) * (1 - wx)
                + img[y0c, x1c] * (1 - wy) * wx
                + img[y1c, x0c] * wy * (1 - wx)
                + img[y1c, x1c] * wy * wx
            )
    return out


def fd_gradient(loss_fn, params: list[torch.Tensor], probes_per_param: int, rng: np.random.Generator, eps: float = 1e-5):
    """Central finite differences of a scalar loss at randomly probed weights.

    Returns a list of (param_index, flat_index, fd_grad). ``loss_fn`` must be
    deterministic. Parameters are modified in place and restored.
    """
    out = []
    with torch.no_grad():
        for pi, p in enumerate(params):
            flat = p.reshape(-1)
            n = flat.numel()
            picks = rng.choice(n, size=min(probes_per_param, n), replace=False)
            for k in picks:
                orig = flat[k].item()
                flat[k] = orig + eps
                lp = float(loss_fn())
                flat[k] = orig - eps
                lm = float(loss_fn())
                flat[k] = orig
                out.append((pi, int(k), (lp - lm) / (2 * eps)))
    return out


def grad_check(loss_fn, params: list[torch.Tensor], probes_per_param: int, seed: int = 0, eps: float = 1e-5, rel_tol: float = 1e-3, min_pass: float = 0.99):
    """Compare autograd gradients against central finite differences.

    Asserts that at least ``min_pass`` of probed weights have relative error
    below ``rel_tol`` (absolute tolerance guards near-zero gradients).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone().reshape(-1) for p in params]
    rng = np.random.default_rng(seed)
    probes = fd_gradient(loss_fn, params, probes_per_param, rng, eps)
    assert probes, "no weights probed"
    ok = 0
    worst = 0.0
    for pi, k, fd in probes:
        an = float(grads[pi][k])
        denom = max(abs(an), abs(fd), 1e-6)
        rel = abs(an - fd) / denom
        worst = max(worst, rel)
        if rel < rel_tol or abs(an - fd) < 1e-8:
            ok += 1
    frac = ok / len(probes)
    assert frac >= min_pass, f"only {frac:.3f} of {len(probes)} probes within {rel_tol} (worst rel err {worst:.2e})"
    return frac
