"""Loop closure with scan-context descriptors and pose-graph optimisation."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .exceptions import (
    DimMismatchError,
    LidarFuseError,
    NotConnectedError,
    SingularSystemError,
)
from .geometry import Pose, pose_compose, pose_inverse, rot_z, se3_log
from .icp import IcpConfig, RegistrationCloud, icp_align, prepare_cloud

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------- scan context


@dataclass(eq=False)
class ScanContextDescriptor:
    """``matrix[ring, sector]`` holds the max height in each polar bin (0 where empty)."""

    matrix: np.ndarray
    occupied: np.ndarray
    max_radius: float

    @property
    def ring_key(self):
        return self.occupied.mean(axis=1)

    @property
    def shape(self):
        return self.matrix.shape


def scan_context(cloud, rings=20, sectors=60, max_radius=80.0):
    if max_radius <= 0:
        raise ValueError("max_radius must be positive")
    matrix = np.zeros((rings, sectors))
    occupied = np.zeros((rings, sectors), dtype=bool)
    p = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        return ScanContextDescriptor(matrix, occupied, float(max_radius))
    r = np.hypot(p[:, 0], p[:, 1])
    az = np.mod(np.arctan2(p[:, 1], p[:, 0]), 2.0 * np.pi)
    keep = r < max_radius
    ring = np.floor(r[keep] / max_radius * rings).astype(np.int64)
    sector = np.floor(az[keep] / (2.0 * np.pi) * sectors).astype(np.int64) % sectors
    z = p[keep, 2]
    best = np.full((rings, sectors), -np.inf)
    np.maximum.at(best, (ring, sector), z)
    occupied = np.isfinite(best)
    matrix[occupied] = best[occupied]
    return ScanContextDescriptor(matrix, occupied, float(max_radius))


def shift_descriptor(desc, k):
    """Descriptor of the same scan rotated by ``k`` sectors about z."""
    return ScanContextDescriptor(np.roll(desc.matrix, k, axis=1), np.roll(desc.occupied, k, axis=1), desc.max_radius)


def sc_distance(a, b):
    """``(distance, shift)``: best mean column cosine distance over cyclic shifts of ``b``.

    ``shift = k`` means ``b`` looks like ``a`` rotated by ``k`` sectors.  Only
    columns non-empty in both descriptors count; ties go to the smallest shift.
    """
    if a.shape != b.shape:
        raise DimMismatchError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    sectors = a.shape[1]
    cols = (np.arange(sectors)[None, :] + np.arange(sectors)[:, None]) % sectors
    mb = b.matrix[:, cols]  # (rings, shift, sector)
    ob = b.occupied.any(axis=0)[cols]
    na = np.sum(a.matrix**2, axis=0)
    nb = np.sum(mb**2, axis=0)
    both = a.occupied.any(axis=0)[None, :] & ob & (na > 0)[None, :] & (nb > 0)
    dot = np.einsum("rs,rks->ks", a.matrix, mb)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = dot / np.sqrt(na[None, :] * nb)
    terms = np.where(both, np.clip(1.0 - cos, 0.0, 2.0), 0.0)
    count = both.sum(axis=1)
    dist = np.where(count > 0, terms.sum(axis=1) / np.maximum(count, 1), 1.0)
    k = int(np.argmin(dist))
    return float(dist[k]), k


@dataclass
class LoopMatch:
    index: int
    shift: int
    distance: float


def detect_loop(current, database, exclusion=50, threshold=0.2, candidates=10):
    """Best earlier frame matching ``current`` or ``None``.

    ``database[i]`` is the descriptor of frame ``i``; ``current`` is taken to be
    the frame right after the database, so the last ``exclusion`` entries are
    ineligible.
    """
    if exclusion < 1:
        raise ValueError("exclusion must be at least 1")
    eligible = len(database) - exclusion
    if eligible <= 0:
        return None
    keys = np.array([d.ring_key for d in database[:eligible]])
    dist = np.linalg.norm(keys - current.ring_key, axis=1)
    order = np.lexsort((np.arange(eligible), dist))[:candidates]
    best = None
    for i in order:
        d, k = sc_distance(current, database[i])
        if d < threshold and (best is None or d < best.distance):
            best = LoopMatch(int(i), int(k), d)
    return best


def loop_edge_from_match(scan_i, scan_j, shift, sectors=60, cfg=None, min_overlap=0.3):
    """Relative pose of frame ``i`` in frame ``j`` by ICP seeded with the descriptor shift.

    Returns ``None`` when registration fails or the result does not pass the
    convergence and overlap gate.
    """
    cfg = cfg or IcpConfig(max_correspondence_dist=2.0)
    init = Pose(rot_z(2.0 * np.pi * shift / sectors), np.zeros(3))
    try:
        src = scan_i if isinstance(scan_i, RegistrationCloud) else prepare_cloud(scan_i, cfg.normal_k)
        tgt = scan_j if isinstance(scan_j, RegistrationCloud) else prepare_cloud(scan_j, cfg.normal_k)
        # coarse pass with a wide gate, then the regular one
        coarse = icp_align(src, tgt, init, IcpConfig(max_correspondence_dist=5.0, method="point_to_point", max_iterations=30))
        result = icp_align(src, tgt, coarse.transform, cfg)
    except LidarFuseError as exc:
        logger.debug("loop candidate rejected: %s", exc)
        return None
    if not result.converged:
        return None
    moved = result.transform.transform_points(src.points)
    idx, _ = tgt.search.query(moved, 0.3)
    overlap = float(np.mean(idx >= 0))
    if overlap < min_overlap:
        logger.debug("loop candidate rejected: overlap %.2f", overlap)
        return None
    return result.transform


# ------------------------------------------------------------------------ pose graph


@dataclass
class Edge:
    i: int
    j: int
    measurement: Pose
    weight: float = 1.0


@dataclass
class OptimizationReport:
    costs: list = field(default_factory=list)
    iterations: int = 0
    status: str = "ok"


@dataclass
class PoseGraph:
    nodes: list
    odometry_edges: list = field(default_factory=list)
    loop_edges: list = field(default_factory=list)
    report: OptimizationReport | None = None

    @classmethod
    def from_odometry(cls, poses):
        """Chain graph whose edges reproduce the given trajectory exactly."""
        edges = [Edge(i, i + 1, pose_compose(pose_inverse(poses[i]), poses[i + 1])) for i in range(len(poses) - 1)]
        return cls(list(poses), edges)

    @property
    def edges(self):
        return self.odometry_edges + self.loop_edges

    def add_loop(self, i, j, measurement, weight=1.0):
        self.loop_edges.append(Edge(i, j, measurement, weight))

    def validate(self):
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise ValueError(f"edge ({e.i}, {e.j}) references a missing node")
        if n > 1:
            rows = [e.i for e in self.edges]
            cols = [e.j for e in self.edges]
            adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            n_comp, _ = connected_components(adj, directed=False)
            if n_comp > 1:
                raise NotConnectedError(f"pose graph has {n_comp} components")

    def cost(self):
        return graph_cost(self.nodes, self.edges)


def edge_residual(xi, xj, z):
    return se3_log(pose_compose(pose_inverse(z), pose_compose(pose_inverse(xi), xj))).as_vector()


# Batched SE(3) helpers on (m, 4, 4) arrays; the optimiser evaluates every edge at once.


def _hat_batch(w):
    k = np.zeros((len(w), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -w[:, 2], w[:, 1]
    k[:, 1, 0], k[:, 1, 2] = w[:, 2], -w[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -w[:, 1], w[:, 0]
    return k


def _coefficients_batch(theta):
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(t)) / t**2)
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (t - np.sin(t)) / t**3)
    return a, b, c


def _exp_batch(xi):
    w = xi[:, 3:]
    theta = np.linalg.norm(w, axis=1)
    a, b, c = _coefficients_batch(theta)
    k = _hat_batch(w)
    k2 = k @ k
    eye = np.eye(3)[None]
    out = np.zeros((len(xi), 4, 4))
    out[:, :3, :3] = eye + a[:, None, None] * k + b[:, None, None] * k2
    v = eye + b[:, None, None] * k + c[:, None, None] * k2
    out[:, :3, 3] = np.einsum("nij,nj->ni", v, xi[:, :3])
    out[:, 3, 3] = 1.0
    return out


def _log_batch(m):
    r = m[:, :3, :3]
    cos = np.clip((np.trace(r, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.stack([r[:, 2, 1] - r[:, 1, 2], r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1]], axis=1) / 2.0
    theta = np.arctan2(np.linalg.norm(skew, axis=1), cos)
    out = np.zeros((len(m), 6))
    large = theta >= 2.5
    small = theta < 1e-4
    t = np.where(small, 1.0, theta)
    scale = np.where(small, 1.0 + theta**2 / 6.0 + 7.0 * theta**4 / 360.0, t / np.sin(np.where(large, 1.0, t)))
    w = skew * scale[:, None]
    k = _hat_batch(w)
    a, b, _ = _coefficients_batch(theta)
    coef = np.where(small, 1.0 / 12.0 + theta**2 / 720.0, (1.0 - a / (2.0 * b)) / t**2)
    v_inv = np.eye(3)[None] - 0.5 * k + coef[:, None, None] * (k @ k)
    out[:, :3] = np.einsum("nij,nj->ni", v_inv, m[:, :3, 3])
    out[:, 3:] = w
    for i in np.flatnonzero(large):
        out[i] = se3_log(Pose.from_matrix(m[i], reorthonormalize=True)).as_vector()
    return out


def _inv_batch(m):
    out = np.zeros_like(m)
    rt = np.transpose(m[:, :3, :3], (0, 2, 1))
    out[:, :3, :3] = rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", rt, m[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


class _EdgeSet:
    def __init__(self, edges):
        self.i = np.array([e.i for e in edges], dtype=np.intp)
        self.j = np.array([e.j for e in edges], dtype=np.intp)
        self.w = np.array([e.weight for e in edges], dtype=float)
        self.z_inv = _inv_batch(np.array([e.measurement.as_matrix() for e in edges]))

    def residuals(self, xi, xj):
        return _log_batch(self.z_inv @ _inv_batch(xi) @ xj)

    def cost(self, x):
        r = self.residuals(x[self.i], x[self.j])
        return float(np.sum(self.w * np.sum(r * r, axis=1)))

    def linearize(self, x, step=1e-6):
        xi, xj = x[self.i], x[self.j]
        r = self.residuals(xi, xj)
        m = len(self.i)
        ji = np.zeros((m, 6, 6))
        jj = np.zeros((m, 6, 6))
        for k in range(6):
            d = np.zeros((m, 6))
            d[:, k] = step
            ep, em = _exp_batch(d), _exp_batch(-d)
            ji[:, :, k] = (self.residuals(xi @ ep, xj) - self.residuals(xi @ em, xj)) / (2 * step)
            jj[:, :, k] = (self.residuals(xi, xj @ ep) - self.residuals(xi, xj @ em)) / (2 * step)
        return r, ji, jj


def graph_cost(nodes, edges):
    if not edges:
        return 0.0
    return _EdgeSet(edges).cost(np.array([p.as_matrix() for p in nodes]))


def _normal_equations(x, es):
    n = len(x)
    r, ji, jj = es.linearize(x)
    w = es.w[:, None, None]
    g = np.zeros((n, 6))
    np.add.at(g, es.i, np.einsum("mki,mk->mi", ji, r) * es.w[:, None])
    np.add.at(g, es.j, np.einsum("mki,mk->mi", jj, r) * es.w[:, None])
    off = np.arange(6)
    rows, cols, vals = [], [], []
    for a, ja in ((es.i, ji), (es.j, jj)):
        for b, jb in ((es.i, ji), (es.j, jj)):
            blk = w * np.einsum("mki,mkj->mij", ja, jb)
            rows.append((6 * a[:, None, None] + off[None, :, None]).repeat(6, axis=2).ravel())
            cols.append((6 * b[:, None, None] + off[None, None, :]).repeat(6, axis=1).ravel())
            vals.append(blk.ravel())
    h = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(6 * n, 6 * n)
    ).tocsc()
    return h, g.ravel()


def _solve(h, rhs, dense):
    if dense:
        try:
            x = np.linalg.solve(h.toarray(), rhs)
        except np.linalg.LinAlgError:
            raise SingularSystemError("singular normal equations") from None
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MatrixRankWarning)
            x = spsolve(h, rhs)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("singular normal equations")
    return x


def optimize_graph(graph, max_iters=50, tol=1e-10, damping=1e-4, dense_below=200):
    """Levenberg-Marquardt over all node poses except node 0.

    Residuals are ``log(Z_ij^-1 X_i^-1 X_j)`` weighted by the edge weights and
    nodes are updated by right perturbations.  A step is only accepted when it
    lowers the cost, so the returned graph never costs more than the input.
    The result carries an :class:`OptimizationReport`; when the normal
    equations are singular the input nodes are returned with
    ``status="singular"``.
    """
    graph.validate()
    edges = graph.edges
    n = len(graph.nodes)
    out = PoseGraph(list(graph.nodes), list(graph.odometry_edges), list(graph.loop_edges))
    if n < 2 or not edges:
        out.report = OptimizationReport(costs=[0.0])
        return out
    es = _EdgeSet(edges)
    x = np.array([p.as_matrix() for p in graph.nodes])
    report = OptimizationReport(costs=[es.cost(x)])
    out.report = report
    lam = damping
    dense = n < dense_below
    for it in range(max_iters):
        report.iterations = it + 1
        h, g = _normal_equations(x, es)
        h = h[6:, 6:]
        rhs = -g[6:]
        reg = sp.diags(h.diagonal() + 1.0)
        improved = False
        while lam < 1e12:
            try:
                delta = _solve((h + lam * reg).tocsc(), rhs, dense)
            except SingularSystemError:
                logger.warning("singular pose-graph system; returning the input graph")
                report.status = "singular"
                report.costs = report.costs[:1]
                return PoseGraph(list(graph.nodes), out.odometry_edges, out.loop_edges, report)
            trial = x.copy()
            trial[1:] = x[1:] @ _exp_batch(delta.reshape(-1, 6))
            cost = es.cost(trial)
            if cost < report.costs[-1]:
                improved = True
                lam = max(lam / 10.0, 1e-12)
                break
            lam *= 10.0
        if not improved:
            break
        change = report.costs[-1] - cost
        x = trial
        report.costs.append(cost)
        if change < tol:
            break
    out.nodes = [graph.nodes[0]] + [Pose.from_matrix(m, reorthonormalize=True) for m in x[1:]]
    return out


# ----------------------------------------------------------------------- text export


def _pose_fields(p):
    return " ".join(repr(float(v)) for v in p.as_matrix()[:3].ravel())


def export_graph(graph, path):
    """Write the graph as text.

    One line per record::

        NODE <i> <r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3>
        EDGE <odometry|loop> <i> <j> <weight> <12 pose values as above>
    """
    with open(path, "w") as fh:
        for i, p in enumerate(graph.nodes):
            fh.write(f"NODE {i} {_pose_fields(p)}\n")
        for kind, edges in (("odometry", graph.odometry_edges), ("loop", graph.loop_edges)):
            for e in edges:
                fh.write(f"EDGE {kind} {e.i} {e.j} {e.weight!r} {_pose_fields(e.measurement)}\n")
    return path


def _pose_from_fields(vals):
    m = np.eye(4)
    m[:3] = np.array(vals, dtype=float).reshape(3, 4)
    return Pose.from_matrix(m, reorthonormalize=True)


def load_graph(path):
    nodes, odo, loops = {}, [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "NODE":
                nodes[int(parts[1])] = _pose_from_fields(parts[2:14])
            elif parts[0] == "EDGE":
                edge = Edge(int(parts[2]), int(parts[3]), _pose_from_fields(parts[5:17]), float(parts[4]))
                (odo if parts[1] == "odometry" else loops).append(edge)
    return PoseGraph([nodes[i] for i in range(len(nodes))], odo, loops)


__all__ = [
    "Edge",
    "LoopMatch",
    "PoseGraph",
    "ScanContextDescriptor",
    "detect_loop",
    "export_graph",
    "load_graph",
    "loop_edge_from_match",
    "optimize_graph",
    "sc_distance",
    "scan_context",
]
