"""Scan-to-scan registration and the point/plane alignment losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import (
    DegenerateGeometryError,
    EmptyTargetError,
    MissingNormalsError,
    NoCorrespondencesError,
)
from .geometry import Pose, so3_exp
from .pointcloud import PointCloud


@dataclass(frozen=True)
class IcpConfig:
    """Registration settings.

    ``method`` selects the per-iteration solver: ``"point_to_plane"`` (linearised
    Gauss-Newton step, the default) or ``"point_to_point"`` (closed-form SVD).
    Registration normals use their own neighbourhood size ``normal_k`` and only
    neighbourhoods whose curvature ``l0 / (l0 + l1 + l2)`` is below
    ``planarity_max`` take part in point-to-plane steps.  On noisy scans the
    gate rises to ``noise_factor`` times the first-quartile curvature of the
    source, which tracks the range-noise floor.  When the selected
    normals leave a translation direction weakly constrained (smallest
    eigenvalue of their mean outer product below ``min_constraint``) the
    curvature gate is relaxed stepwise, up to ten times its starting value.

    The correspondence gate starts at ``coarse_gate`` and is multiplied by
    ``gate_decay`` every iteration until it reaches ``max_correspondence_dist``;
    convergence is only declared at the final gate, and a pose that stops moving
    earlier jumps straight to it.
    """

    max_iterations: int = 50
    convergence_tol: float = 1e-4
    max_correspondence_dist: float = 1.0
    downsample_voxel: float = 0.2
    method: str = "point_to_plane"
    normal_k: int = 40
    planarity_max: float = 1e-5
    normal_agreement: float = 0.9
    min_constraint: float = 0.005
    noise_factor: float = 100.0
    coarse_gate: float = 4.0
    gate_decay: float = 0.5

    def __post_init__(self):
        for name in ("max_iterations", "convergence_tol", "max_correspondence_dist", "downsample_voxel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.gate_decay <= 1.0:
            raise ValueError("gate_decay must lie in (0, 1]")
        if self.method not in ("point_to_plane", "point_to_point"):
            raise ValueError(f"unknown ICP method {self.method!r}")


@dataclass(frozen=True)
class AlignmentError:
    point_to_point: float
    point_to_plane: float
    plane_to_plane: float

    @property
    def total(self):
        return self.point_to_point + self.point_to_plane + self.plane_to_plane

    def as_vector(self):
        return np.array([self.point_to_point, self.point_to_plane, self.plane_to_plane])


@dataclass
class IcpResult:
    transform: Pose
    iterations_used: int
    final_losses: AlignmentError
    converged: bool
    history: list = field(default_factory=list)


# ------------------------------------------------------------------ correspondences


def _as_points(x):
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=float).reshape(-1, 3)


class CorrespondenceSearch:
    """Exact nearest-neighbour lookup into a fixed target (ties go to the lowest index)."""

    def __init__(self, target, n_candidates=4):
        self.points = _as_points(target)
        if len(self.points) == 0:
            raise EmptyTargetError("target cloud is empty")
        self.tree = cKDTree(self.points)
        self.k = min(n_candidates, len(self.points))

    def query(self, query_points, max_dist=np.inf):
        q = _as_points(query_points)
        if len(q) == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        _, cand = self.tree.query(q, k=self.k, distance_upper_bound=max_dist)
        cand = np.asarray(cand).reshape(len(q), self.k)
        n = len(self.points)
        valid = cand < n
        safe = np.where(valid, cand, 0)
        d2 = np.sum((q[:, None, :] - self.points[safe]) ** 2, axis=2)
        d2 = np.where(valid, d2, np.inf)
        # lexicographic (distance, index) selection
        order = np.lexsort((np.where(valid, cand, n), d2), axis=1)[:, 0]
        rows = np.arange(len(q))
        best = cand[rows, order]
        best_d2 = d2[rows, order]
        # a full candidate list may hide further ties: resolve those rows exhaustively
        if self.k < n:
            worst = d2[:, -1] if self.k > 0 else np.inf
            suspect = np.flatnonzero(valid[:, -1] & (worst <= best_d2 * (1 + 1e-9) + 1e-300))
            for i in suspect:
                ball = np.array(sorted(self.tree.query_ball_point(q[i], np.sqrt(best_d2[i]) * (1 + 1e-6) + 1e-12)))
                dd = np.sum((q[i] - self.points[ball]) ** 2, axis=1)
                j = int(np.lexsort((ball, dd))[0])
                best[i], best_d2[i] = ball[j], dd[j]
        dist = np.sqrt(best_d2)
        best = np.where(np.isfinite(dist), best, -1)
        return best.astype(np.intp), dist


def nearest_neighbor_index(query_points, target, max_dist=np.inf):
    """Index of (and distance to) the nearest target point for every query point.

    Queries with no target point within ``max_dist`` get index ``-1`` and
    distance ``inf``.
    """
    return CorrespondenceSearch(target).query(query_points, max_dist)


# ----------------------------------------------------------------------- losses


def alignment_losses(transformed_source, target, correspondences):
    """Mean point-to-point, point-to-plane and plane-to-plane errors over pairs.

    ``correspondences`` is an ``(m, 2)`` array of ``(source_index, target_index)``
    pairs.  Point-to-plane uses the target normals; plane-to-plane compares unit
    normals after flipping the source normal onto the target hemisphere.
    """
    if not (transformed_source.has_normals and target.has_normals):
        raise MissingNormalsError("both clouds need normals")
    pairs = np.asarray(correspondences, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise NoCorrespondencesError("empty correspondence list")
    s = transformed_source.points[pairs[:, 0]]
    t = target.points[pairs[:, 1]]
    ns = transformed_source.normals[pairs[:, 0]]
    nt = target.normals[pairs[:, 1]]
    diff = s - t
    pt2pt = float(np.mean(np.sum(diff * diff, axis=1)))
    pt2pl = float(np.mean(np.sum(diff * nt, axis=1) ** 2))
    flip = np.where(np.sum(ns * nt, axis=1) < 0, -1.0, 1.0)
    dn = ns * flip[:, None] - nt
    pl2pl = float(np.mean(np.sum(dn * dn, axis=1)))
    return AlignmentError(pt2pt, pt2pl, pl2pl)


# -------------------------------------------------------------------- registration


@dataclass
class RegistrationCloud:
    """A cloud prepared for registration: normals, curvature and a search index."""

    cloud: PointCloud
    curvature: np.ndarray
    search: CorrespondenceSearch

    @property
    def points(self):
        return self.cloud.points

    @property
    def normals(self):
        return self.cloud.normals


def prepare_cloud(cloud, k=40):
    """Estimate normals with curvature for registration (``k`` neighbours, self included)."""
    pts = cloud.points
    if len(pts) < 3:
        raise DegenerateGeometryError("need at least 3 points")
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    idx = np.asarray(idx).reshape(len(pts), k)
    nb = pts[idx]
    c = nb - nb.mean(axis=1, keepdims=True)
    cov = np.matmul(c.transpose(0, 2, 1), c) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    normals[np.einsum("ij,ij->i", normals, -pts) < 0] *= -1.0
    curvature = w[:, 0] / np.maximum(w.sum(axis=1), 1e-300)
    full = PointCloud(pts, cloud.intensity, normals)
    return RegistrationCloud(full, curvature, CorrespondenceSearch(pts))


def voxel_representatives(points, voxel):
    """Index of the first point (in input order) of every occupied voxel, sorted by voxel."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return first


def _check_not_collinear(points):
    if len(points) < 3:
        raise DegenerateGeometryError("need at least 3 points")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometryError("points are collinear")


def _kabsch(src, tgt):
    cs, ct = src.mean(axis=0), tgt.mean(axis=0)
    h = (src - cs).T @ (tgt - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, ct - r @ cs


def _point_to_plane_step(src, tgt, normals):
    a = np.hstack([np.cross(src, normals), normals])
    b = -np.sum((src - tgt) * normals, axis=1)
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    return so3_exp(x[:3]), x[3:]


_PLANARITY_STEPS = (1.0, 2.0, 5.0, 10.0)


def _planar_selection(cloud, sel, cfg):
    """Flat source points and the curvature gate that keeps them well constrained."""
    base = max(cfg.planarity_max, cfg.noise_factor * float(np.quantile(cloud.curvature[sel], 0.25)))
    for scale in _PLANARITY_STEPS:
        limit = base * scale
        keep = sel[cloud.curvature[sel] < limit]
        if len(keep) >= 6:
            n = cloud.normals[keep]
            if np.linalg.eigvalsh(n.T @ n / len(n))[0] >= cfg.min_constraint:
                break
    return keep, limit


def icp_align(source, target, init=None, cfg=None):
    """Estimate the pose mapping ``source`` points into the ``target`` frame.

    ``source``/``target`` may be raw :class:`PointCloud` objects or clouds already
    passed through :func:`prepare_cloud` (reused across calls by the pipeline).
    """
    cfg = cfg or IcpConfig()
    init = init or Pose()
    src = source if isinstance(source, RegistrationCloud) else prepare_cloud(source, cfg.normal_k)
    tgt = target if isinstance(target, RegistrationCloud) else prepare_cloud(target, cfg.normal_k)

    sel = voxel_representatives(src.points, cfg.downsample_voxel)
    limit = np.inf
    if cfg.method == "point_to_plane":
        sel, limit = _planar_selection(src, sel, cfg)
    src_pts = src.points[sel]
    src_nrm = src.normals[sel]
    _check_not_collinear(src_pts)
    _check_not_collinear(tgt.points)

    r, t = init.rotation.copy(), init.translation.copy()
    history = []
    converged = False
    it = 0
    gate = max(cfg.coarse_gate, cfg.max_correspondence_dist)
    prev = None
    for it in range(1, cfg.max_iterations + 1):
        r_old, t_old = r, t
        moved = src_pts @ r.T + t
        idx, dist = tgt.search.query(moved, gate)
        ok = idx >= 0
        if cfg.method == "point_to_plane":
            safe = np.where(ok, idx, 0)
            agree = np.abs(np.sum((src_nrm @ r.T) * tgt.normals[safe], axis=1))
            ok &= (tgt.curvature[safe] < limit) & (agree > cfg.normal_agreement)
        if ok.sum() < 6:
            raise NoCorrespondencesError(f"only {int(ok.sum())} correspondences within the gate")
        ms, mt = moved[ok], tgt.points[idx[ok]]
        # gate-truncated squared distance: never increases under point-to-point steps
        history.append(float(np.mean(np.minimum(dist, gate) ** 2)))
        if cfg.method == "point_to_plane":
            dr, dt = _point_to_plane_step(ms, mt, tgt.normals[idx[ok]])
        else:
            dr, dt = _kabsch(ms, mt)
        r, t = dr @ r, dr @ t + dt
        step = float(np.mean(np.linalg.norm(moved @ dr.T + dt - moved, axis=1)))
        # correspondence flips can trap the iteration in a two-cycle
        cycle = np.inf if prev is None else float(np.mean(np.linalg.norm(src_pts @ (r - prev[0]).T + t - prev[1], axis=1)))
        settled = min(step, cycle) < cfg.convergence_tol
        if settled and gate <= cfg.max_correspondence_dist:
            converged = True
            break
        prev = (r_old, t_old)
        # a pose that is already settled skips the rest of the gate schedule
        gate = cfg.max_correspondence_dist if settled else max(cfg.max_correspondence_dist, gate * cfg.gate_decay)

    transform = Pose(_orthonormal(r), t)
    losses = registration_losses(transform, src.cloud, tgt, cfg.max_correspondence_dist)
    return IcpResult(transform, it, losses, converged, history)


def _orthonormal(r):
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def registration_losses(pose, source, target, max_dist=1.0):
    """Alignment losses of ``source`` moved by ``pose`` against ``target``.

    Correspondences are recomputed (nearest neighbour within ``max_dist``);
    both inputs need normals.  ``target`` may be a prepared cloud.
    """
    tgt = target if isinstance(target, RegistrationCloud) else None
    tcloud = tgt.cloud if tgt else target
    search = tgt.search if tgt else CorrespondenceSearch(tcloud)
    moved = source.transformed(pose)
    idx, _ = search.query(moved.points, max_dist)
    ok = np.flatnonzero(idx >= 0)
    if len(ok) == 0:
        raise NoCorrespondencesError("no correspondences within the gate")
    return alignment_losses(moved, tcloud, np.column_stack([ok, idx[ok]]))

