"""Levenberg-Marquardt pose-graph optimization on SE(3).

Residual convention for a binary edge ``i -> j`` with measurement ``Z``::

    e = log(Z^-1 * T_i^-1 * T_j)

and for a unary PRIOR edge ``e = log(Z^-1 * T_i)``. Poses are perturbed on the
left, ``T <- exp(d) * T``, which gives closed-form Jacobians::

    de/dd_j = Jl^-1(e) * Ad(Z^-1 T_i^-1),   de/dd_i = -de/dd_j
    de/dd_i (prior) = Jl^-1(e) * Ad(Z^-1)

Localization (reference fixed) and mapping (joint) problems differ only in
which vertices are free, so both go through :func:`optimize`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo
from .geometry import Pose
from .graph import Edge, EdgeKind, PoseGraph, VertexId

DEFAULT_KERNELS: dict[EdgeKind, float | None] = {
    EdgeKind.INTRA: None,
    EdgeKind.INTER: None,
    EdgeKind.PRIOR: None,
    EdgeKind.LOOP: 1.0,
}
"""Huber threshold (whitened residual norm) per edge kind; ``None`` = plain least squares."""

GAUGE_INFORMATION = 1e6
DENSE_SOLVE_LIMIT = 600

INITIAL_DAMPING = 1e-4
DAMPING_UP = 10.0
DAMPING_DOWN = 0.5
DAMPING_FLOOR = 1e-12
DAMPING_CEILING = 1e16


class Termination(enum.Enum):
    CONVERGED = "CONVERGED"
    MAX_ITERS = "MAX_ITERS"
    GAUGE_FAILURE = "GAUGE_FAILURE"


class GaugeFailure(RuntimeError):
    """A free component of the problem has no fixed vertex and no prior."""


@dataclass
class Convergence:
    max_iterations: int = 50
    relative_cost_tol: float = 1e-8
    update_norm_tol: float = 1e-8


@dataclass
class OptimizationProblem:
    poses: dict[VertexId, Pose]
    edges: list[Edge]
    free: list[VertexId]
    fixed: list[VertexId]
    kernels: dict[EdgeKind, float | None] = field(default_factory=lambda: dict(DEFAULT_KERNELS))
    convergence: Convergence = field(default_factory=Convergence)

    def __post_init__(self) -> None:
        self.free = sorted(self.free)
        self.fixed = sorted(self.fixed)
        if set(self.free) & set(self.fixed):
            raise ValueError("free and fixed sets overlap")


@dataclass
class OptimizationResult:
    poses: dict[VertexId, Pose]
    initial_chi2: float
    final_chi2: float
    iterations: int
    termination: Termination


def build_problem(graph: PoseGraph, free: Iterable[VertexId], *,
                  kernels: Mapping[EdgeKind, float | None] | None = None,
                  convergence: Convergence | None = None,
                  extra_edges: Iterable[Edge] = ()) -> OptimizationProblem:
    """Every edge touching a free vertex is included; its other endpoint is fixed."""
    free = set(free)
    edges = []
    touched: set[VertexId] = set()
    for eid in sorted(graph.edges):
        e = graph.edges[eid]
        if e.source in free or e.target in free:
            edges.append(e)
            touched.update((e.source, e.target))
    edges.extend(extra_edges)
    for e in extra_edges:
        touched.update((e.source, e.target))
    fixed = touched - free
    poses = {vid: graph.vertices[vid].pose for vid in free | fixed}
    return OptimizationProblem(
        poses=poses,
        edges=edges,
        free=sorted(free),
        fixed=sorted(fixed),
        kernels=dict(DEFAULT_KERNELS if kernels is None else kernels),
        convergence=convergence or Convergence(),
    )


def localization_problem(graph: PoseGraph, active: Iterable[VertexId], **kwargs) -> OptimizationProblem:
    """Active window free, every other vertex it touches (reference) fixed."""
    return build_problem(graph, active, **kwargs)


def gauge_prior(graph: PoseGraph, vid: VertexId, information: float = GAUGE_INFORMATION) -> Edge:
    return Edge(vid, vid, EdgeKind.PRIOR, graph.vertices[vid].pose, information * np.eye(6))


def mapping_problem(graph: PoseGraph, active: Iterable[VertexId], reference: Iterable[VertexId],
                    fixed: Iterable[VertexId] = (), **kwargs) -> OptimizationProblem:
    """Joint problem over active and reference poses.

    Without explicitly fixed vertices the gauge is removed by a strong prior on
    the lowest-id reference vertex, pinned at its current estimate.
    """
    reference = sorted(reference)
    fixed = set(fixed)
    free = (set(active) | set(reference)) - fixed
    extra = []
    if not fixed and reference:
        extra.append(gauge_prior(graph, reference[0]))
    return build_problem(graph, free, extra_edges=extra, **kwargs)


# ------------------------------------------------------------------ kernels


def robust_cost(s: np.ndarray, delta: float | None) -> np.ndarray:
    """Huber on the squared whitened norm ``s``; identity when ``delta`` is None."""
    if delta is None:
        return s
    r = np.sqrt(s)
    return np.where(r <= delta, s, 2.0 * delta * r - delta * delta)


def robust_weight(s: np.ndarray, delta: float | None) -> np.ndarray:
    if delta is None:
        return np.ones_like(s)
    r = np.sqrt(s)
    return np.where(r <= delta, 1.0, delta / np.maximum(r, 1e-300))


# --------------------------------------------------------------- residuals


def residual(edge: Edge, poses: Mapping[VertexId, Pose]) -> np.ndarray:
    Zi = geo.inverse(edge.measurement)
    if edge.is_unary:
        return geo.log(Zi @ poses[edge.source])
    return geo.log(Zi @ geo.inverse(poses[edge.source]) @ poses[edge.target])


class _Layout:
    """Array view of a problem: vertex order is free vertices then fixed ones."""

    def __init__(self, problem: OptimizationProblem) -> None:
        self.order = list(problem.free) + list(problem.fixed)
        self.index = {vid: k for k, vid in enumerate(self.order)}
        self.n_free = len(problem.free)
        edges = problem.edges
        self.src = np.array([self.index[e.source] for e in edges], dtype=int)
        self.tgt = np.array([self.index[e.target] for e in edges], dtype=int)
        self.unary = np.array([e.is_unary for e in edges], dtype=bool)
        zq, zt = geo.stack_poses(e.measurement for e in edges)
        self.zq_inv, self.zt_inv = geo.batch_inverse(zq, zt)
        self.info = np.stack([e.information for e in edges]) if edges else np.zeros((0, 6, 6))
        self.delta = [problem.kernels.get(e.kind) for e in edges]
        kinds = sorted({d for d in self.delta if d is not None})
        self.kernel_groups = [(d, np.array([x == d for x in self.delta])) for d in kinds]

    def arrays(self, poses: Mapping[VertexId, Pose]):
        return geo.stack_poses(poses[vid] for vid in self.order)


def _residuals(lay: _Layout, q: np.ndarray, t: np.ndarray, with_jacobians: bool):
    qi_inv, ti_inv = geo.batch_inverse(q[lay.src], t[lay.src])
    # A = Z^-1 T_i^-1 for binary edges, Z^-1 for priors.
    qa, ta = geo.batch_compose(lay.zq_inv, lay.zt_inv, qi_inv, ti_inv)
    u = lay.unary[:, None]
    qa = np.where(u, lay.zq_inv, qa)
    ta = np.where(u, lay.zt_inv, ta)
    qe, te = geo.batch_compose(qa, ta, q[lay.tgt], t[lay.tgt])
    r = geo.batch_log(qe, te)
    if not with_jacobians:
        return r, None
    J = geo.batch_left_jacobian_inv(r) @ geo.batch_adjoint(qa, ta)
    return r, J


def _costs(lay: _Layout, r: np.ndarray):
    s = np.einsum("ei,eij,ej->e", r, lay.info, r)
    rho = s.copy()
    w = np.ones_like(s)
    for d, mask in lay.kernel_groups:
        rho[mask] = robust_cost(s[mask], d)
        w[mask] = robust_weight(s[mask], d)
    return s, rho, w


def chi_squared(problem: OptimizationProblem, poses: Mapping[VertexId, Pose] | None = None) -> float:
    """Total robustified cost at ``poses`` (default: the problem's own estimates)."""
    if not problem.edges:
        return 0.0
    lay = _Layout(problem)
    q, t = lay.arrays(problem.poses if poses is None else poses)
    r, _ = _residuals(lay, q, t, with_jacobians=False)
    return float(np.sum(_costs(lay, r)[1]))


def _normal_equations(lay: _Layout, q, t):
    r, J = _residuals(lay, q, t, with_jacobians=True)
    s, rho, w = _costs(lay, r)
    WI = lay.info * w[:, None, None]
    # For binary edges the target Jacobian is J and the source Jacobian -J;
    # for priors the source Jacobian is J.
    sign_src = np.where(lay.unary, 1.0, -1.0)
    Js = J * sign_src[:, None, None]
    blocks_r, blocks_c, blocks = [], [], []
    g = np.zeros(6 * lay.n_free)
    nf = lay.n_free

    def add(rows, cols, Ja, Jb, mask):
        if not np.any(mask):
            return
        B = np.einsum("eki,ekl,elj->eij", Ja[mask], WI[mask], Jb[mask])
        blocks_r.append(rows[mask])
        blocks_c.append(cols[mask])
        blocks.append(B)

    free_s = lay.src < nf
    free_t = (lay.tgt < nf) & ~lay.unary
    add(lay.src, lay.src, Js, Js, free_s)
    add(lay.tgt, lay.tgt, J, J, free_t)
    add(lay.src, lay.tgt, Js, J, free_s & free_t)
    add(lay.tgt, lay.src, J, Js, free_s & free_t)
    WIr = np.einsum("eij,ej->ei", WI, r)
    gs = np.einsum("eki,ek->ei", Js, WIr)
    gt = np.einsum("eki,ek->ei", J, WIr)
    np.add.at(g.reshape(nf, 6), lay.src[free_s], gs[free_s])
    np.add.at(g.reshape(nf, 6), lay.tgt[free_t], gt[free_t])
    if blocks:
        br = np.concatenate(blocks_r)
        bc = np.concatenate(blocks_c)
        B = np.concatenate(blocks)
        ar = np.arange(6)
        rows = (6 * br[:, None, None] + ar[None, :, None]).repeat(6, axis=2)
        cols = (6 * bc[:, None, None] + ar[None, None, :]).repeat(6, axis=1)
        H = sp.coo_matrix((B.ravel(), (rows.ravel(), cols.ravel())), shape=(6 * nf, 6 * nf)).tocsr()
    else:
        H = sp.csr_matrix((6 * nf, 6 * nf))
    return H, g, float(np.sum(rho))


def _solve(H: sp.csr_matrix, g: np.ndarray, damping: float) -> np.ndarray:
    n = H.shape[0]
    if n <= DENSE_SOLVE_LIMIT:
        A = H.toarray() + damping * np.eye(n)
        try:
            return -scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), g)
        except np.linalg.LinAlgError:
            return -np.linalg.solve(A, g)
    A = (H + damping * sp.identity(n, format="csr")).tocsc()
    return -spla.splu(A).solve(g)


def gauge_ok(problem: OptimizationProblem) -> bool:
    """Each free component must touch a fixed vertex or carry a prior."""
    free = set(problem.free)
    parent = {v: v for v in free}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    anchored: set[VertexId] = set()
    for e in problem.edges:
        if e.is_unary:
            if e.source in free:
                anchored.add(e.source)
            continue
        a_free, b_free = e.source in free, e.target in free
        if a_free and b_free:
            ra, rb = find(e.source), find(e.target)
            if ra != rb:
                parent[ra] = rb
        elif a_free:
            anchored.add(e.source)
        elif b_free:
            anchored.add(e.target)
    anchored_roots = {find(v) for v in anchored}
    return all(find(v) in anchored_roots for v in free)


def _retract(q, t, delta, n_free):
    dq, dt = geo.batch_exp(delta.reshape(n_free, 6))
    q = q.copy()
    t = t.copy()
    q[:n_free], t[:n_free] = geo.batch_compose(dq, dt, q[:n_free], t[:n_free])
    return q, t


def optimize(problem: OptimizationProblem) -> OptimizationResult:
    """Damped Gauss-Newton on the manifold; only cost-decreasing steps are kept."""
    initial = chi_squared(problem)
    if not problem.free:
        return OptimizationResult({}, initial, initial, 0, Termination.CONVERGED)
    if not gauge_ok(problem):
        poses = {vid: problem.poses[vid] for vid in problem.free}
        return OptimizationResult(poses, initial, initial, 0, Termination.GAUGE_FAILURE)

    lay = _Layout(problem)
    q, t = lay.arrays(problem.poses)
    conv = problem.convergence
    damping = INITIAL_DAMPING
    cost = initial
    iterations = 0
    termination = Termination.MAX_ITERS
    H, g, _ = _normal_equations(lay, q, t)
    while iterations < conv.max_iterations:
        if cost == 0.0:
            termination = Termination.CONVERGED
            break
        iterations += 1
        delta = _solve(H, g, damping)
        if not np.all(np.isfinite(delta)):
            damping *= DAMPING_UP
            continue
        q_new, t_new = _retract(q, t, delta, lay.n_free)
        r_new, _ = _residuals(lay, q_new, t_new, with_jacobians=False)
        new_cost = float(np.sum(_costs(lay, r_new)[1]))
        step = float(np.linalg.norm(delta))
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            q, t, cost = q_new, t_new, new_cost
            damping = max(damping * DAMPING_DOWN, DAMPING_FLOOR)
            if rel < conv.relative_cost_tol or step < conv.update_norm_tol:
                termination = Termination.CONVERGED
                break
            H, g, _ = _normal_equations(lay, q, t)
        else:
            if step < conv.update_norm_tol:
                termination = Termination.CONVERGED
                break
            damping *= DAMPING_UP
            if damping > DAMPING_CEILING:
                termination = Termination.CONVERGED
                break
    poses = {vid: Pose(q[k], t[k]) for k, vid in enumerate(lay.order[: lay.n_free])}
    return OptimizationResult(poses, initial, cost, iterations, termination)


def jacobian_check(problem: OptimizationProblem, epsilon: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference Jacobians.

    Every endpoint (free or fixed) of every edge is perturbed. Per edge and
    endpoint the error is ``max|J_num - J| / max(max|J|, 1)``.
    """
    if not problem.edges:
        return 0.0
    lay = _Layout(problem)
    q, t = lay.arrays(problem.poses)
    _, J = _residuals(lay, q, t, with_jacobians=True)
    worst = 0.0
    for k, e in enumerate(problem.edges):
        ends = [(e.source, -1.0 if not e.is_unary else 1.0)]
        if not e.is_unary:
            ends.append((e.target, 1.0))
        for vid, sign in ends:
            analytic = sign * J[k]
            numeric = np.zeros((6, 6))
            for c in range(6):
                d = np.zeros(6)
                d[c] = epsilon
                hi = dict(problem.poses)
                lo = dict(problem.poses)
                hi[vid] = geo.exp(d) @ problem.poses[vid]
                lo[vid] = geo.exp(-d) @ problem.poses[vid]
                numeric[:, c] = (residual(e, hi) - residual(e, lo)) / (2.0 * epsilon)
            err = np.max(np.abs(numeric - analytic)) / max(np.max(np.abs(analytic)), 1.0)
            worst = max(worst, float(err))
    return worst


def edge_jacobians(edge: Edge, poses: Mapping[VertexId, Pose]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(residual, d/d source, d/d target) for one binary edge."""
    Zi = geo.inverse(edge.measurement)
    A = Zi @ geo.inverse(poses[edge.source])
    r = geo.log(A @ poses[edge.target])
    Jt = geo.left_jacobian_inv(r) @ geo.adjoint(A)
    return r, -Jt, Jt


def marginal_covariances(problem: OptimizationProblem, vertices: Iterable[VertexId]) -> dict:
    """Joint marginal covariance of the requested free vertices.

    Returns ``{"index": {vid: k}, "cov": (6K, 6K) array}`` from the
    Gauss-Newton information matrix at the current estimate. Fixed vertices
    get zero covariance.
    """
    want = [v for v in dict.fromkeys(vertices)]
    lay = _Layout(problem)
    free_want = [v for v in want if lay.index.get(v, lay.n_free) < lay.n_free]
    K = len(want)
    cov = np.zeros((6 * K, 6 * K))
    index = {v: k for k, v in enumerate(want)}
    if free_want:
        q, t = lay.arrays(problem.poses)
        H, _, _ = _normal_equations(lay, q, t)
        n = H.shape[0]
        rhs = np.zeros((n, 6 * len(free_want)))
        for k, v in enumerate(free_want):
            rhs[6 * lay.index[v]: 6 * lay.index[v] + 6, 6 * k: 6 * k + 6] = np.eye(6)
        if n <= DENSE_SOLVE_LIMIT:
            X = scipy.linalg.cho_solve(scipy.linalg.cho_factor(H.toarray()), rhs)
        else:
            X = spla.splu(H.tocsc()).solve(rhs)
        rows = np.concatenate([np.arange(6 * lay.index[v], 6 * lay.index[v] + 6) for v in free_want])
        sub = X[rows]
        pos = np.concatenate([np.arange(6 * index[v], 6 * index[v] + 6) for v in free_want])
        cov[np.ix_(pos, pos)] = 0.5 * (sub + sub.T)
    return {"index": index, "cov": cov}
