"""SE(3) pose-graph optimisation with prior and between factors (Levenberg-Marquardt)."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Hashable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import RigidPose, skew, so3_exp, so3_log, so3_right_jacobian_inv

__all__ = [
    "Factor",
    "FactorGraph",
    "SolverConfig",
    "OptimizeResult",
    "optimize",
    "information_from_registration",
    "information_from_sigmas",
    "between_residuals",
    "between_jacobians",
    "write_g2o",
]


def information_from_sigmas(sigma_trans: float, sigma_rot: float) -> np.ndarray:
    """Diagonal information for the (rotation, translation) residual ordering."""
    return np.diag([1.0 / sigma_rot**2] * 3 + [1.0 / sigma_trans**2] * 3)


def information_from_registration(final_error: float, min_sigma_trans: float = 0.02,
                                  sigma_rot_deg: float = 0.5) -> np.ndarray:
    sigma_t = max(min_sigma_trans, float(np.sqrt(max(final_error, 0.0))))
    return information_from_sigmas(sigma_t, np.deg2rad(sigma_rot_deg))


def _check_information(info: np.ndarray) -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise ValueError("information matrix must be 6x6")
    if np.max(np.abs(info - info.T)) > 1e-12 * max(1.0, np.max(np.abs(info))):
        raise ValueError("information matrix is not symmetric")
    if np.min(np.linalg.eigvalsh(info)) <= 0:
        raise ValueError("information matrix is not positive definite")
    return 0.5 * (info + info.T)


@dataclass(frozen=True, eq=False)
class Factor:
    kind: str  # "prior" or "between"
    ids: tuple
    measurement: RigidPose
    information: np.ndarray


class FactorGraph:
    """Nodes keyed by hashable ids, each with an initial pose, plus a factor list."""

    def __init__(self):
        self.nodes: dict[Hashable, RigidPose] = {}
        self.factors: list[Factor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def add_node(self, node_id: Hashable, pose: RigidPose) -> None:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node {node_id}")
        self.nodes[node_id] = pose

    def set_pose(self, node_id: Hashable, pose: RigidPose) -> None:
        self.nodes[node_id] = pose

    def add_prior(self, node_id, measurement: RigidPose, information) -> Factor:
        if node_id not in self.nodes:
            raise KeyError(f"unknown node {node_id}")
        f = Factor("prior", (node_id,), measurement, _check_information(information))
        self.factors.append(f)
        return f

    def add_between(self, i, j, measurement: RigidPose, information) -> Factor:
        for n in (i, j):
            if n not in self.nodes:
                raise KeyError(f"unknown node {n}")
        if i == j:
            raise ValueError("between factor needs two distinct nodes")
        f = Factor("between", (i, j), measurement, _check_information(information))
        self.factors.append(f)
        return f

    def priors(self) -> list[Factor]:
        return [f for f in self.factors if f.kind == "prior"]

    def betweens(self) -> list[Factor]:
        return [f for f in self.factors if f.kind == "between"]

    def check_constrained(self) -> None:
        anchors = {f.ids[0] for f in self.priors()}
        if not anchors:
            raise ValueError("graph has no prior factor")
        adj: dict = {n: [] for n in self.nodes}
        for f in self.betweens():
            i, j = f.ids
            adj[i].append(j)
            adj[j].append(i)
        seen = set(anchors)
        queue = deque(anchors)
        while queue:
            n = queue.popleft()
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    queue.append(m)
        for n in self.nodes:
            if n not in seen:
                raise ValueError(f"unconstrained node {n}")


@dataclass(frozen=True)
class SolverConfig:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    max_iters: int = 100
    step_tol: float = 1e-8


@dataclass(eq=False)
class OptimizeResult:
    poses: dict
    final_cost: float
    initial_cost: float
    iterations: int
    cost_history: list = field(default_factory=list)


def _log_batch(R: np.ndarray) -> np.ndarray:
    return so3_log(R) if len(R) else np.zeros((0, 3))


def between_residuals(Ri, ti, Rj, tj, Zr, Zt):
    """Residual ``log(Z^-1 Ti^-1 Tj)`` for batches of factors, plus the pieces Jacobians need."""
    Ra = np.swapaxes(Ri, 1, 2) @ Rj
    ta = np.einsum("nji,nj->ni", Ri, tj - ti)
    ZrT = np.swapaxes(Zr, 1, 2)
    Re = ZrT @ Ra
    te = np.einsum("nij,nj->ni", ZrT, ta - Zt)
    phi = _log_batch(Re)
    return np.concatenate([phi, te], axis=1), (Ra, ta, ZrT, Re, phi)


def between_jacobians(parts):
    """Jacobians of the between residual w.r.t. right perturbations of Ti and Tj."""
    Ra, ta, ZrT, Re, phi = parts
    n = len(phi)
    Jinv = so3_right_jacobian_inv(phi)
    Ji = np.zeros((n, 6, 6))
    Jj = np.zeros((n, 6, 6))
    Ji[:, :3, :3] = -Jinv @ np.swapaxes(Ra, 1, 2)
    Ji[:, 3:, :3] = ZrT @ skew(ta)
    Ji[:, 3:, 3:] = -ZrT
    Jj[:, :3, :3] = Jinv
    Jj[:, 3:, 3:] = Re
    return Ji, Jj


class _Linearization:
    def __init__(self, graph: FactorGraph):
        self.ids = list(graph.nodes)
        index = {n: k for k, n in enumerate(self.ids)}
        self.n = len(self.ids)
        bet = graph.betweens()
        pri = graph.priors()
        self.bi = np.array([index[f.ids[0]] for f in bet], dtype=np.int64)
        self.bj = np.array([index[f.ids[1]] for f in bet], dtype=np.int64)
        self.bZr = np.array([f.measurement.rotation for f in bet]).reshape(-1, 3, 3)
        self.bZt = np.array([f.measurement.translation for f in bet]).reshape(-1, 3)
        self.bW = np.array([f.information for f in bet]).reshape(-1, 6, 6)
        self.pi = np.array([index[f.ids[0]] for f in pri], dtype=np.int64)
        self.pZr = np.array([f.measurement.rotation for f in pri]).reshape(-1, 3, 3)
        self.pZt = np.array([f.measurement.translation for f in pri]).reshape(-1, 3)
        self.pW = np.array([f.information for f in pri]).reshape(-1, 6, 6)

    def residuals(self, R, t, with_jacobians=False):
        rb, parts = between_residuals(R[self.bi], t[self.bi], R[self.bj], t[self.bj], self.bZr, self.bZt)
        ZrT = np.swapaxes(self.pZr, 1, 2)
        Re = ZrT @ R[self.pi]
        te = np.einsum("nij,nj->ni", ZrT, t[self.pi] - self.pZt)
        phi = _log_batch(Re)
        rp = np.concatenate([phi, te], axis=1)
        if not with_jacobians:
            return rb, rp
        Ji, Jj = between_jacobians(parts)
        Jp = np.zeros((len(phi), 6, 6))
        Jp[:, :3, :3] = so3_right_jacobian_inv(phi)
        Jp[:, 3:, 3:] = Re
        return rb, rp, Ji, Jj, Jp

    def cost(self, R, t) -> float:
        rb, rp = self.residuals(R, t)
        return float(
            np.einsum("ni,nij,nj->", rb, self.bW, rb) + np.einsum("ni,nij,nj->", rp, self.pW, rp)
        )

    def normal_equations(self, R, t):
        rb, rp, Ji, Jj, Jp = self.residuals(R, t, with_jacobians=True)
        JiW = np.swapaxes(Ji, 1, 2) @ self.bW
        JjW = np.swapaxes(Jj, 1, 2) @ self.bW
        JpW = np.swapaxes(Jp, 1, 2) @ self.pW
        blocks = [JiW @ Ji, JiW @ Jj, JjW @ Ji, JjW @ Jj, JpW @ Jp]
        rows = [self.bi, self.bi, self.bj, self.bj, self.pi]
        cols = [self.bi, self.bj, self.bi, self.bj, self.pi]
        H = _assemble(blocks, rows, cols, self.n)
        g = np.zeros((self.n, 6))
        np.add.at(g, self.bi, np.einsum("nij,nj->ni", JiW, rb))
        np.add.at(g, self.bj, np.einsum("nij,nj->ni", JjW, rb))
        np.add.at(g, self.pi, np.einsum("nij,nj->ni", JpW, rp))
        return H, g.reshape(-1)


def _assemble(blocks, rows, cols, n):
    r_off, c_off = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    data, ri, ci = [], [], []
    for B, r, c in zip(blocks, rows, cols):
        if len(r) == 0:
            continue
        data.append(B.reshape(-1))
        ri.append((6 * r[:, None, None] + r_off).reshape(-1))
        ci.append((6 * c[:, None, None] + c_off).reshape(-1))
    return sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))), shape=(6 * n, 6 * n)
    ).tocsc()


def _retract(R, t, delta):
    d = delta.reshape(-1, 6)
    return R @ so3_exp(d[:, :3]), t + np.einsum("nij,nj->ni", R, d[:, 3:])


def optimize(graph: FactorGraph, cfg: SolverConfig | None = None) -> OptimizeResult:
    """Minimise the summed squared, information-weighted factor residuals.

    Each node is updated as ``T <- T * exp(delta)``. The damped normal equations use
    Marquardt scaling ``H + lambda * diag(H)``; steps that raise the cost are rejected.
    """
    cfg = cfg or SolverConfig()
    graph.check_constrained()
    lin = _Linearization(graph)
    R = np.array([graph.nodes[n].rotation for n in lin.ids])
    t = np.array([graph.nodes[n].translation for n in lin.ids])

    cost = lin.cost(R, t)
    initial = cost
    history = [cost]
    lam = cfg.lambda_init
    iters = 0
    while iters < cfg.max_iters and cost > 0.0:
        iters += 1
        H, g = lin.normal_equations(R, t)
        diag = H.diagonal()
        A = H + sp.diags(lam * np.maximum(diag, 1e-12))
        delta = -spla.spsolve(A.tocsc(), g)
        if not np.all(np.isfinite(delta)):
            lam *= cfg.lambda_up
            continue
        R_new, t_new = _retract(R, t, delta)
        new_cost = lin.cost(R_new, t_new)
        if new_cost <= cost:
            R, t, cost = R_new, t_new, new_cost
            history.append(cost)
            lam *= cfg.lambda_down
            if np.linalg.norm(delta) < cfg.step_tol:
                break
        else:
            lam *= cfg.lambda_up
            if np.linalg.norm(delta) < cfg.step_tol or lam > 1e12:
                break

    poses = {n: RigidPose(R[k], t[k]) for k, n in enumerate(lin.ids)}
    return OptimizeResult(poses, cost, initial, iters, history)


def write_g2o(graph: FactorGraph, stream) -> None:
    """Dump nodes and between factors as g2o ``VERTEX_SE3:QUAT`` / ``EDGE_SE3:QUAT`` lines."""
    ids = {n: k for k, n in enumerate(graph.nodes)}
    # g2o orders the tangent space as (translation, rotation)
    perm = [3, 4, 5, 0, 1, 2]
    for n, pose in graph.nodes.items():
        q = pose.quaternion()
        vals = list(pose.translation) + list(q)
        stream.write(f"VERTEX_SE3:QUAT {ids[n]} " + " ".join(f"{v:.9g}" for v in vals) + "\n")
    for f in graph.betweens():
        q = f.measurement.quaternion()
        vals = list(f.measurement.translation) + list(q)
        info = f.information[np.ix_(perm, perm)]
        upper = [info[a, b] for a in range(6) for b in range(a, 6)]
        stream.write(
            f"EDGE_SE3:QUAT {ids[f.ids[0]]} {ids[f.ids[1]]} "
            + " ".join(f"{v:.9g}" for v in vals + upper)
            + "\n"
        )
