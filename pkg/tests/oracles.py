"""Independent reference implementations used by the unit and acceptance tests.

Everything here is written with plain Python loops (or the most direct torch
expression) so it shares no code path with the package.
"""

import math

import numpy as np
import torch


def brute_force_argmin(cells, codes):
    out = []
    for v in cells.tolist():
        best, best_d = 0, float("inf")
        for n, e in enumerate(codes.tolist()):
            d = sum((a - b) ** 2 for a, b in zip(v, e))
            if d < best_d:
                best, best_d = n, d
        out.append(best)
    return out


def central_diff(fn, x, eps=1e-6):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = fn().item()
        flat[i] = old - eps
        lo = fn().item()
        flat[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return (a - b).norm().item() / max(a.norm().item(), b.norm().item(), 1e-30)


def rmse_loop(a, b):
    a = ((np.asarray(a, dtype=np.float64) + 1) / 2).ravel().tolist()
    b = ((np.asarray(b, dtype=np.float64) + 1) / 2).ravel().tolist()
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)) / len(a))


def ssim_loop(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Textbook SSIM: one weighted window at a time, scalar arithmetic only."""
    x = ((np.asarray(a, dtype=np.float64) + 1) / 2).tolist()
    y = ((np.asarray(b, dtype=np.float64) + 1) / 2).tolist()
    half = (size - 1) / 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma ** 2)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    c1, c2 = k1 ** 2, k2 ** 2
    h, w = len(x), len(x[0])
    vals = []
    for r in range(h - size + 1):
        for c in range(w - size + 1):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(size):
                for j in range(size):
                    wt = g[i] * g[j]
                    u, v = x[r + i][c + j], y[r + i][c + j]
                    mx += wt * u
                    my += wt * v
                    sxx += wt * u * u
                    syy += wt * v * v
                    sxy += wt * u * v
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def scalar_aggregate(weights, maps):
    b, k, d, h, w = maps.shape
    out = np.zeros((b, d, h, w))
    for bi in range(b):
        for j in range(d):
            for y in range(h):
                for x in range(w):
                    out[bi, j, y, x] = sum(weights[bi, kk, j] * maps[bi, kk, j, y, x] for kk in range(k))
    return out


def latent_loss_fd(z_e, codes, idx, alpha, beta, eps=1e-6):
    """FD of each stop-gradient term w.r.t. the side it trains, indices held fixed.

    The codebook term only moves the codes and the commitment term only moves
    the encoder output, so those are the derivatives autograd must reproduce.
    """
    ze, cb = z_e.detach().clone(), codes.detach().clone()

    def lookup(c):
        return c[idx].permute(0, 3, 1, 2)

    fd_codes = central_diff(lambda: alpha * ((lookup(cb) - ze) ** 2).mean(), cb, eps)
    fd_z = central_diff(lambda: beta * ((ze - lookup(cb)) ** 2).mean(), ze, eps)
    return fd_z, fd_codes
