"""Conditional scores: Tweedie denoising plus Gaussian link gradients.

The conditional score of a node is its unconditional score plus the
gradient, w.r.t. the noisy state, of a Gaussian log-likelihood whose mean is
linear in the denoised state. Parents enter through the parent conditional
``P | z`` (the causal score); observations enter the same way through the
log-normal link (the evidence score).

Covariance shapes follow numpy's stacked-matrix convention: leading axes are
cells (and optionally samples), the last two are the matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateMeanScale,
    NonFiniteGradient,
    SingularCovariance,
    SingularInnerMatrix,
)
from .graph import JointMoments

EIG_FLOOR = 1e-8


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def safe_inv(cov, floor=EIG_FLOOR):
    """Inverse of a symmetric PSD stack with eigenvalues floored at ``floor``."""
    cov = np.asarray(cov, dtype=float)
    if not np.all(np.isfinite(cov)):
        raise SingularCovariance("covariance has non-finite entries")
    if cov.shape[-1] == 1:
        v = cov[..., 0, 0]
        if np.any(v < -floor):
            raise SingularCovariance("covariance is not PSD")
        return (1.0 / np.maximum(v, floor))[..., None, None]
    vals, vecs = np.linalg.eigh(_sym(cov))
    scale = np.maximum(1.0, np.abs(vals).max(axis=-1, keepdims=True))
    if np.any(vals < -1e-8 * scale):
        raise SingularCovariance("covariance is not PSD")
    vals = np.maximum(vals, floor)
    return (vecs / vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)


def _score_and_dz(score, z, t):
    if hasattr(score, "value_and_dz"):
        return score.value_and_dz(z, t)
    s = score(z, t)
    if hasattr(score, "dz"):
        return s, score.dz(z, t)
    h = 1e-5 * (1.0 + np.abs(z))
    return s, (score(z + h, t) - score(z - h, t)) / (2 * h)


def tweedie_denoise(z_t, t, score, sigma_t, mean_fn=None, mean_scale=None, full=False):
    """Posterior-mean estimate of the clean state from ``z_t``.

    Three readings of the mean factor in the denominator:

    * ``mean_scale`` given: divide elementwise by it (the literal form);
    * ``mean_fn`` given: ``mean_fn(z0) -> (mu(t, z0), dmu/dz0)``; the kernel
      mean is linearised at the factor-one estimate and one refinement step is
      taken, which is exact for affine kernels;
    * neither: factor one.

    With ``full`` returns ``(z_hat, dz_hat/dz_t, factor)``.
    """
    z_t = np.asarray(z_t, dtype=float)
    s, ds = _score_and_dz(score, z_t, t)
    out = _denoise(z_t, s, ds, sigma_t, mean_fn, mean_scale)
    return out if full else out[0]


def _denoise(z_t, s, ds, sigma_t, mean_fn=None, mean_scale=None):
    base = z_t + sigma_t * s
    dbase = 1.0 + sigma_t * ds
    if mean_scale is not None:
        factor = np.broadcast_to(np.asarray(mean_scale, dtype=float), z_t.shape)
        _check_factor(factor)
        z_hat = base / factor
    elif mean_fn is not None:
        mu0, factor = mean_fn(base)
        factor = np.broadcast_to(factor, z_t.shape)
        _check_factor(factor)
        z_hat = base + (base - mu0) / factor
    else:
        factor = np.ones_like(z_t)
        z_hat = base
    return z_hat, dbase / factor, factor


def _check_factor(factor):
    if np.any(np.abs(factor) < 1e-8):
        raise DegenerateMeanScale("kernel mean factor is numerically zero")


@dataclass
class ParentConditional:
    mu_c: np.ndarray
    sigma_c: np.ndarray
    gain: np.ndarray
    cross_cov: np.ndarray
    self_cov: np.ndarray
    parent_mean: np.ndarray


def parent_conditional(moments: JointMoments, z) -> ParentConditional:
    """Gaussian conditional of the parents given the node value ``z``.

    For ``q = 1`` (one value per cell) ``z`` is a per-cell array; otherwise
    it has shape ``(..., q)`` matching ``moments.self_cov`` ``(..., q, q)``.
    """
    z = np.asarray(z, dtype=float)
    q = moments.self_cov.shape[-1]
    mean_z = np.asarray(moments.self_mean, dtype=float)
    if q == 1:
        zz, mean_z = z[..., None], mean_z[..., None]
    else:
        zz = z
    gain = moments.cross_cov @ safe_inv(moments.self_cov)
    mu_c = moments.parent_mean + (gain @ (zz - mean_z)[..., None])[..., 0]
    sigma_c = moments.parent_cov - gain @ np.swapaxes(moments.cross_cov, -1, -2)
    return ParentConditional(mu_c, sigma_c, gain, moments.cross_cov, moments.self_cov,
                             moments.parent_mean)


@dataclass
class StabilizedCov:
    jacobian: np.ndarray
    sigma_post: np.ndarray
    sigma_eff: np.ndarray | None = None


def _as_matrix(a, q):
    a = np.asarray(a, dtype=float)
    if q == 1:
        return a[..., None, None] if a.shape[-2:] != (1, 1) else a
    if a.ndim >= 2 and a.shape[-2:] == (q, q):
        return a
    return a[..., None] * np.eye(q)


def stabilize(self_cov, sigma_t, jacobian, sigma_c=None, gain=None, literal=False) -> StabilizedCov:
    """Residual node uncertainty given ``z_t`` under a locally linear kernel mean.

    ``sigma_post = S - S J^T (J S J^T + Sigma_t)^-1 J S`` with ``S = self_cov``.
    When ``sigma_c`` is given, ``sigma_eff`` adds ``sigma_post`` to it mapped
    into parent space through ``gain`` (or unmapped with ``literal``).
    """
    self_cov = np.asarray(self_cov, dtype=float)
    q = self_cov.shape[-1]
    J = _as_matrix(jacobian, q)
    St = _as_matrix(sigma_t, q)
    SJt = self_cov @ np.swapaxes(J, -1, -2)
    inner = J @ SJt + St
    if q == 1:
        if np.any(np.abs(inner[..., 0, 0]) < 1e-300):
            raise SingularInnerMatrix("J S J^T + Sigma_t is singular")
        sol = np.swapaxes(SJt, -1, -2) / inner
    else:
        try:
            sol = np.linalg.solve(inner, np.swapaxes(SJt, -1, -2))
        except np.linalg.LinAlgError as exc:
            raise SingularInnerMatrix(str(exc)) from None
    post = _sym(self_cov - SJt @ sol)
    out = StabilizedCov(np.asarray(jacobian, dtype=float), post)
    if sigma_c is not None:
        if literal:
            out.sigma_eff = sigma_c + post
        else:
            out.sigma_eff = sigma_c + gain @ post @ np.swapaxes(gain, -1, -2)
    return out


def link_grad(target, mean, gain, cov, dzhat):
    """``d/dz_t log N(target; mean(z_hat), cov)`` with ``mean`` linear in ``z_hat``.

    ``gain`` is ``d mean / d z_hat`` (shape ``(..., p, 1)``); ``dzhat`` is the
    cellwise ``d z_hat / d z_t``.
    """
    resid = (np.asarray(target, dtype=float) - mean)[..., None]
    w = safe_inv(cov) @ resid
    return (np.swapaxes(gain, -1, -2) @ w)[..., 0, 0] * dzhat


def causal_grad(parent_values, z_t, t, score, moments: JointMoments, sigma_t,
                mean_fn=None, stabilized=True, literal=False, diagnostics=None):
    """Causal score: gradient of ``log p(parents | z_t)`` w.r.t. ``z_t``.

    ``parent_values`` has shape ``(..., d, p)``; ``z_t`` ``(..., d)``.
    """
    z_hat, dzhat, factor = tweedie_denoise(z_t, t, score, sigma_t, mean_fn=mean_fn, full=True)
    return _causal_from_denoised(parent_values, z_hat, dzhat, factor, moments, sigma_t,
                                 stabilized, literal, diagnostics)


def _causal_from_denoised(parent_values, z_hat, dzhat, factor, moments, sigma_t,
                          stabilized, literal, diagnostics):
    pc = parent_conditional(moments, z_hat)
    cov = pc.sigma_c
    if stabilized:
        st = stabilize(moments.self_cov, sigma_t, factor, sigma_c=pc.sigma_c, gain=pc.gain,
                       literal=literal)
        cov = st.sigma_eff
    g = link_grad(parent_values, pc.mu_c, pc.gain, cov, dzhat)
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("causal score is not finite")
    if diagnostics is not None:
        diagnostics.update(z_hat=z_hat, mu_c=pc.mu_c, sigma_eff=cov,
                           causal_norm=float(np.linalg.norm(g)))
    return g


@dataclass
class EvidenceTerm:
    """One log-normal source seen from its latent node.

    ``log_y`` and ``offset`` (``theta0`` plus other-parent terms) live on the
    source grid; ``factor`` is the source-to-base cell-size ratio.
    """

    log_y: np.ndarray
    theta_z: float
    offset: np.ndarray | float
    eta: float
    factor: int
    base_shape: tuple


def _block_mean(x, factor, base_shape):
    """Flat base-grid field -> flat block means on the source grid."""
    if factor == 1:
        return x
    r, c = base_shape
    b = x.reshape(*x.shape[:-1], r // factor, factor, c // factor, factor)
    return b.mean(axis=(-3, -1)).reshape(*x.shape[:-1], -1)


def _block_adjoint(x, factor, base_shape):
    """Transpose of ``_block_mean``: spread each source cell over its block / r^2."""
    if factor == 1:
        return x
    r, c = base_shape
    b = x.reshape(*x.shape[:-1], r // factor, c // factor)
    up = np.repeat(np.repeat(b, factor, axis=-2), factor, axis=-1) / factor**2
    return up.reshape(*up.shape[:-2], -1)


def evidence_grad(term: EvidenceTerm, z_hat, dzhat, factor, self_var, sigma_t, stabilized=True):
    """Gradient of ``log N(log y; offset + theta_z * R z_hat, D)`` w.r.t. ``z_t``.

    ``R`` is block averaging to the source grid and
    ``D = eta^2 + theta_z^2 * R Var[z | z_t] R^T`` (independent cells).
    """
    mean = term.offset + term.theta_z * _block_mean(z_hat, term.factor, term.base_shape)
    var = np.full(mean.shape, term.eta**2)
    if stabilized:
        post = self_var - self_var**2 * factor**2 / (factor**2 * self_var + sigma_t)
        var = var + term.theta_z**2 * _block_mean(post, term.factor, term.base_shape) / term.factor**2
    var = np.maximum(var, EIG_FLOOR)
    up = term.theta_z * (term.log_y - mean) / var
    g = _block_adjoint(up, term.factor, term.base_shape) * dzhat
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("evidence score is not finite")
    return g


def conditional_score(z_t, t, score, sigma_t, parent_values=None, moments=None, evidence=(),
                      self_var=None, mean_fn=None, stabilized=True, literal=False,
                      diagnostics=None):
    """Unconditional score plus causal and evidence terms.

    With no parents and no evidence this is ``score(z_t, t)`` unchanged.
    """
    z_t = np.asarray(z_t, dtype=float)
    has_parents = parent_values is not None and moments is not None
    if not has_parents and not evidence:
        return score(z_t, t)
    s, ds = _score_and_dz(score, z_t, t)
    z_hat, dzhat, factor = _denoise(z_t, s, ds, sigma_t, mean_fn)
    out = s
    if has_parents:
        out = out + _causal_from_denoised(parent_values, z_hat, dzhat, factor, moments, sigma_t,
                                          stabilized, literal, diagnostics)
    if evidence:
        if self_var is None:
            if moments is None:
                raise ValueError("evidence needs the node's marginal variance")
            self_var = moments.self_cov[..., 0, 0]
        for term in evidence:
            out = out + evidence_grad(term, z_hat, dzhat, factor, self_var, sigma_t, stabilized)
    return out
