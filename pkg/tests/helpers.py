"""Shared fixtures: analytic Gaussian scores and small models."""

import numpy as np

from causaldiff.diffusion import LinearDecay, MlpDiffusion, NodeSDE, kernel_sigma
from causaldiff.neuralnet import Mlp


def const_sde(node_id="z", g=1.0, T=1.0, steps=64, lambda0=0.0):
    return NodeSDE(node_id, diffusion=MlpDiffusion(Mlp.constant([1, 1], g, "softplus"), T),
                   lam=LinearDecay(lambda0, T), T=T, steps=steps)


class GaussianScore:
    """Exact score of ``N(mean, var)`` data pushed through a zero-drift SDE."""

    def __init__(self, sde, mean, var):
        self.sde = sde
        self.mean = np.asarray(mean, dtype=float)
        self.var = np.asarray(var, dtype=float)

    def sigma(self, t):
        return float(kernel_sigma(self.sde, t))

    def __call__(self, z, t):
        return -(np.asarray(z) - self.mean) / (self.var + self.sigma(t))

    def dz(self, z, t):
        return np.broadcast_to(-1.0 / (self.var + self.sigma(t)), np.shape(z)).copy()


CRITERIA_LOG = []


def record(n, ok, detail):
    """Log one acceptance line; the terminal summary prints them all."""
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA_LOG.append(line)
    print(line)
    return ok
