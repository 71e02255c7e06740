"""Prior-seeded plane-to-plane Generalized-ICP between oriented surface clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import RigidPose, compose, skew, so3_exp
from .features import OrientedCloud

__all__ = ["RegConfig", "RegistrationResult", "InsufficientFeatures", "register"]

_MAX_HALVINGS = 12


class InsufficientFeatures(ValueError):
    pass


@dataclass(frozen=True)
class RegConfig:
    tol: float = 1e-4
    max_iters: int = 50
    min_match: float = 0.3
    epsilon: float = 1e-3
    # directions whose geometric (normal-only, lever-arm scaled) information is weaker than
    # this fraction of the strongest one are left at the prior instead of being fitted to
    # the point pattern
    degeneracy_ratio: float = 1e-3


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    transform: RigidPose
    final_error: float
    matched_fraction: float
    iterations: int
    converged: bool
    error_history: list = field(default_factory=list)
    degenerate_dims: int = 0


def _plane_covariances(normals: np.ndarray, eps: float) -> np.ndarray:
    # R_n diag(eps, 1, 1) R_n^T with R_n taking the x-axis onto n
    return np.eye(3) - (1.0 - eps) * normals[:, :, None] * normals[:, None, :]


class _Problem:
    def __init__(self, source: OrientedCloud, target: OrientedCloud, r: float, eps: float):
        self.src_mu = source.means
        self.src_n = source.normals
        self.tgt_mu = target.means
        self.tgt_n = target.normals
        self.tgt_cov = _plane_covariances(target.normals, eps)
        self.tree = target.tree
        self.r = r
        self.eps = eps

    def associate(self, T: RigidPose):
        moved = T.apply(self.src_mu)
        dist, idx = self.tree.query(moved, k=1, distance_upper_bound=self.r)
        ok = np.isfinite(dist)
        src = np.nonzero(ok)[0]
        tgt = idx[ok]
        rn = self.src_n[src] @ T.rotation.T
        info = np.linalg.inv(self.tgt_cov[tgt] + _plane_covariances(rn, self.eps))
        resid = moved[src] - self.tgt_mu[tgt]
        return src, tgt, resid, info

    def error(self, resid, info) -> float:
        if len(resid) == 0:
            return np.inf
        m = np.einsum("ni,nij,nj->n", resid, info, resid)
        # scaled so a pure offset along a shared normal reads in squared meters
        return float(2.0 * self.eps * m.mean())


def register(
    source: OrientedCloud,
    target: OrientedCloud,
    prior: RigidPose,
    r: float,
    cfg: RegConfig | None = None,
) -> RegistrationResult:
    """Find the transform mapping ``source`` onto ``target``, starting from ``prior``.

    Correspondences are nearest target surface points within ``r``. Each Gauss-Newton
    step is taken on a right-multiplied twist of the current estimate and is halved
    until it does not increase the mean residual.
    """
    cfg = cfg or RegConfig()
    if len(source) == 0 or len(target) == 0:
        raise InsufficientFeatures("insufficient features")
    if r <= 0:
        raise ValueError("correspondence distance must be positive")

    prob = _Problem(source, target, r, cfg.epsilon)
    n_src = len(source)
    T = prior
    src, tgt, resid, info = prob.associate(T)
    err = prob.error(resid, info)
    history = [err]
    small_update = False
    iters = 0
    degenerate = 0
    lever = max(float(np.sqrt(np.mean(np.sum((source.means - source.means.mean(axis=0)) ** 2, axis=1)))), 1e-6)

    while iters < cfg.max_iters and len(src) >= 6:
        iters += 1
        # d(T exp(delta) mu)/d(delta) = R [-[mu]x, I]
        Rm = T.rotation
        J = np.concatenate([-Rm @ skew(prob.src_mu[src]), np.broadcast_to(Rm, (len(src), 3, 3))], axis=2)
        JtW = np.einsum("nki,nkj->nij", J, info)
        H = np.einsum("nij,njk->ik", JtW, J)
        g = np.einsum("nij,nj->i", JtW, resid)
        # observability from surface normals alone: the in-plane part of the plane-to-plane
        # information only reflects where the points happen to sample a surface. Each pair
        # contributes the product of its source and target normal terms; normals computed
        # from voxel centres wobble with the lattice, and that wobble is uncorrelated
        # between two clouds, so it averages out instead of posing as structure.
        n_s = prob.src_n[src] @ Rm.T
        n_t = prob.tgt_n[tgt]
        sign = np.where(np.einsum("ij,ij->i", n_s, n_t) < 0, -1.0, 1.0)
        # rotation expressed as displacement at the cloud's lever arm so all six axes share units
        D = np.concatenate([np.full(3, 1.0 / lever), np.ones(3)])
        A_s = np.einsum("nk,nki->ni", n_s * sign[:, None], J) * D
        A_t = np.einsum("nk,nki->ni", n_t, J) * D
        cross = A_s.T @ A_t
        evals, evecs = np.linalg.eigh(0.5 * (cross + cross.T))
        keep = evals >= cfg.degeneracy_ratio * max(evals[-1], 1e-300)
        degenerate = int(6 - keep.sum())
        Vk = evecs[:, keep]
        Hk = Vk.T @ (D[:, None] * H * D[None, :]) @ Vk
        delta = -D * (Vk @ np.linalg.solve(Hk, Vk.T @ (D * g)))

        accepted = False
        step = delta
        for _ in range(_MAX_HALVINGS):
            cand = compose(T, RigidPose(so3_exp(step[:3]), step[3:]))
            c_src, c_tgt, c_resid, c_info = prob.associate(cand)
            c_err = prob.error(c_resid, c_info)
            if len(c_src) >= 6 and c_err <= err:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            # no descent left from this association
            small_update = True
            break
        T, src, tgt, resid, info, err = cand, c_src, c_tgt, c_resid, c_info, c_err
        history.append(err)
        if np.linalg.norm(step) < cfg.tol:
            small_update = True
            break

    matched = len(src) / n_src
    converged = bool(small_update and matched >= cfg.min_match)
    return RegistrationResult(
        transform=T,
        final_error=err,
        matched_fraction=matched,
        iterations=iters,
        converged=converged,
        error_history=history,
        degenerate_dims=degenerate,
    )
