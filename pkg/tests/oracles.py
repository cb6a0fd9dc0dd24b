"""Independent reference implementations shared by unit and acceptance tests.

Frozen on purpose: these are written longhand from the defining formulas and
must not be rewritten in terms of the package code they check.
"""
import itertools
import math

import numpy as np
import torch
from torch import nn


def brute_bilinear(latent, flow):
    """Per-cell bilinear sampling with border clamping, written out longhand."""
    h, w, c = latent.shape
    out = np.zeros_like(latent, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            gx = (2 * j + 1) / w - 1 + flow[i, j, 0]
            gy = (2 * i + 1) / h - 1 + flow[i, j, 1]
            x = min(max(((gx + 1) * w - 1) / 2, 0.0), w - 1.0)
            y = min(max(((gy + 1) * h - 1) / 2, 0.0), h - 1.0)
            x0, y0 = int(math.floor(x)), int(math.floor(y))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            ax, ay = x - x0, y - y0
            out[i, j] = ((1 - ax) * (1 - ay) * latent[y0, x0] + ax * (1 - ay) * latent[y0, x1]
                         + (1 - ax) * ay * latent[y1, x0] + ax * ay * latent[y1, x1])
    return out


def brute_hull(points):
    """Vertex set of the strict hull, by testing every ordered pair as a candidate edge.

    (a, b) is a hull edge when each other point is strictly left of it or lies
    on the closed segment ab; the endpoints of such edges are the vertices.
    """
    pts = [tuple(p) for p in points]
    verts = set()
    for a, b in itertools.permutations(range(len(pts)), 2):
        (ax, ay), (bx, by) = pts[a], pts[b]
        if (ax, ay) == (bx, by):
            continue

        def ok(px, py):
            cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            if cross > 0:
                return True
            dot = (px - ax) * (bx - ax) + (py - ay) * (by - ay)
            return cross == 0 and 0 <= dot <= (bx - ax) ** 2 + (by - ay) ** 2

        if all(ok(px, py) for k, (px, py) in enumerate(pts) if k not in (a, b)):
            verts.update((pts[a], pts[b]))
    return verts


def zero_model(z, t, c):
    return torch.zeros_like(z)


def closed_form_sample(z, schedule, grid_desc):
    # with eps = 0 every step rescales by sqrt(abar_prev / abar_t); the product telescopes
    return z * math.sqrt(schedule.alpha_bars[grid_desc[-1]] / schedule.alpha_bars[grid_desc[0]])


class TinyNet(nn.Module):
    """About a hundred float64 parameters: per-channel mixing plus a timestep gain."""

    def __init__(self):
        super().__init__()
        self.mix = nn.Linear(4, 4).double()
        self.gain = nn.Linear(8, 4).double()
        self.cond = nn.Linear(3, 4, bias=False).double()

    def forward(self, z, t, c):
        feats = torch.stack([torch.sin(t * (k + 1) / 1000.0) for k in range(8)], dim=-1).double()
        g = torch.tanh(self.gain(feats) + self.cond(c))[:, None, :, None, None]
        y = self.mix(z.permute(0, 1, 3, 4, 2)).permute(0, 1, 4, 2, 3)
        return torch.tanh(y) * (1 + g)
