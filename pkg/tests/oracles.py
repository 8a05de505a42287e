"""Independent brute-force / analytic oracles used by unit and acceptance tests.

These deliberately avoid the library's own closed-form code paths: the grid
searches evaluate raw objectives on dense grids, and the analytic values are
hand-derived.
"""

import itertools

import numpy as np


def camera_grid_search(x, y, vis, s_range=(0.1, 3.0), t_range=(-3.0, 3.0), n=81):
    """Best reprojection objective over a dense (s, tx, ty) grid."""
    xv, yv = x[vis], y[vis]
    s_grid = np.linspace(*s_range, n)
    t_grid = np.linspace(*t_range, n)
    best = np.inf
    for s in s_grid:
        r = s * xv - yv
        d0 = ((r[:, 0][:, None] + t_grid[None, :]) ** 2).sum(axis=0)
        d1 = ((r[:, 1][:, None] + t_grid[None, :]) ** 2).sum(axis=0)
        best = min(best, float((d0[:, None] + d1[None, :]).min()))
    return best


def procrustes_grid_search(pred, gt, step_deg=2.0):
    """Best similarity-alignment residual over a ZYZ Euler grid of rotations.

    For each grid rotation the optimal scale and translation are attained on
    centered data, leaving residual = Sgg - t(R)^2 / Spp with
    t(R) = sum_i <R p_i, g_i>. Returns (best residual, Sgg) so callers can
    express the grid tolerance as Sgg * step^2.
    """
    p = pred - pred.mean(axis=0)
    g = gt - gt.mean(axis=0)
    c = np.einsum("ia,ib->ab", g, p)
    spp = float((p ** 2).sum())
    sgg = float((g ** 2).sum())
    aa = np.deg2rad(np.arange(0.0, 360.0, step_deg))
    bb = np.deg2rad(np.arange(0.0, 180.0 + step_deg, step_deg))
    gg = np.deg2rad(np.arange(0.0, 360.0, step_deg))
    ca, sa = np.cos(aa), np.sin(aa)
    cg, sg = np.cos(gg), np.sin(gg)
    ones_g = np.ones_like(cg)
    best_t = 0.0
    for b in bb:
        cb, sb = np.cos(b), np.sin(b)
        t = (np.outer(ca * cb, cg) - np.outer(sa, sg)) * c[0, 0] \
            + (np.outer(-ca * cb, sg) - np.outer(sa, cg)) * c[0, 1] \
            + np.outer(ca * sb, ones_g) * c[0, 2] \
            + (np.outer(sa * cb, cg) + np.outer(ca, sg)) * c[1, 0] \
            + (np.outer(-sa * cb, sg) + np.outer(ca, cg)) * c[1, 1] \
            + np.outer(sa * sb, ones_g) * c[1, 2] \
            + np.outer(np.full_like(ca, -sb), cg) * c[2, 0] \
            + np.outer(np.full_like(ca, sb), sg) * c[2, 1] \
            + cb * c[2, 2]
        best_t = max(best_t, float(t.max()), float(-t.min()))
    return sgg - best_t * best_t / spp, sgg


def hungarian_brute_force(cost):
    """Exact minimum assignment cost by enumerating permutations (n <= 8)."""
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n))
               for p in itertools.permutations(range(n)))


def sinusoid_mean_abs_accel(amplitude, freq_hz):
    """Analytic mean |a(t)| of x(t) = A sin(2 pi f t): A w^2 * 2/pi."""
    w = 2.0 * np.pi * freq_hz
    return amplitude * w * w * 2.0 / np.pi
