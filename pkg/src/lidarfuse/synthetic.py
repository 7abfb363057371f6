"""Ray-cast LiDAR simulator over a random world of boxes, cylinders and walls.

The world always contains the ground plane ``z = 0``.  Scans are expressed in the
sensor frame of the corresponding trajectory pose.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ConfigError
from .geometry import Pose, rot_z
from .pointcloud import PointCloud, ScanSequence

_EPS = 1e-9


@dataclass(frozen=True)
class SensorSpec:
    """Spinning LiDAR: rays at azimuth bin centres and evenly spaced ring elevations."""

    n_azimuth: int = 360
    n_rings: int = 16
    elev_min_deg: float = -15.0
    elev_max_deg: float = 15.0
    max_range: float = 80.0
    min_range: float = 0.5
    noise_sigma: float = 0.01

    @property
    def azimuths(self):
        return (np.arange(self.n_azimuth) + 0.5) * (2.0 * np.pi / self.n_azimuth)

    @property
    def elevations(self):
        return np.deg2rad(np.linspace(self.elev_min_deg, self.elev_max_deg, self.n_rings))

    @property
    def vfov_deg(self):
        """Vertical field of view with one ring spacing split evenly above and below."""
        if self.n_rings == 1:
            return self.elev_min_deg - 1.0, self.elev_max_deg + 1.0
        half = (self.elev_max_deg - self.elev_min_deg) / (self.n_rings - 1) / 2.0
        return self.elev_min_deg - half, self.elev_max_deg + half

    def ray_directions(self):
        """Unit directions, ring-major: ``index = ring * n_azimuth + azimuth``."""
        el, az = np.meshgrid(self.elevations, self.azimuths, indexing="ij")
        d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass
class World:
    boxes: np.ndarray  # (n, 6): cx, cy, yaw, sx, sy, h
    cylinders: np.ndarray  # (n, 4): cx, cy, radius, h
    walls: np.ndarray  # (n, 5): cx, cy, yaw, length, h
    reflectivity: dict

    def raycast(self, origin, dirs, max_range):
        """Nearest hit distance and surface normal per ray (``inf`` where nothing is hit)."""
        m = len(dirs)
        best = np.full(m, np.inf)
        normal = np.zeros((m, 3))
        refl = np.zeros(m)

        def take(t, n, r):
            better = t < best
            best[better] = t[better]
            normal[better] = n[better] if n.ndim == 2 else n
            refl[better] = r[better] if np.ndim(r) else r

        with np.errstate(divide="ignore", invalid="ignore"):
            if origin[2] > 0:
                t = np.where(dirs[:, 2] < -_EPS, -origin[2] / dirs[:, 2], np.inf)
                take(t, np.array([0.0, 0.0, 1.0]), self.reflectivity["ground"])
            near = self._near(self.boxes[:, :2], origin, max_range, self.boxes[:, 3:5].max(axis=1))
            for i in np.flatnonzero(near):
                t, n = _ray_box(origin, dirs, self.boxes[i])
                take(t, n, self.reflectivity["boxes"][i])
            near = self._near(self.cylinders[:, :2], origin, max_range, self.cylinders[:, 2])
            for i in np.flatnonzero(near):
                t, n = _ray_cylinder(origin, dirs, self.cylinders[i])
                take(t, n, self.reflectivity["cylinders"][i])
            near = self._near(self.walls[:, :2], origin, max_range, self.walls[:, 3])
            for i in np.flatnonzero(near):
                t, n = _ray_wall(origin, dirs, self.walls[i])
                take(t, n, self.reflectivity["walls"][i])
        return best, normal, refl

    @staticmethod
    def _near(centres, origin, max_range, size):
        if len(centres) == 0:
            return np.zeros(0, dtype=bool)
        return np.linalg.norm(centres - origin[:2], axis=1) < max_range + size

    def surface_distance(self, points):
        """Unsigned distance from world points to the closest primitive surface."""
        p = np.asarray(points, dtype=float)
        d = np.abs(p[:, 2])
        for cx, cy, yaw, sx, sy, h in self.boxes:
            local = _to_local(p, cx, cy, yaw)
            q = np.abs(local - [0.0, 0.0, h / 2]) - [sx / 2, sy / 2, h / 2]
            sdf = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
            d = np.minimum(d, np.abs(sdf))
        for cx, cy, r, h in self.cylinders:
            dr = np.hypot(p[:, 0] - cx, p[:, 1] - cy) - r
            dz = np.abs(p[:, 2] - h / 2) - h / 2
            q = np.stack([dr, dz], axis=1)
            sdf = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
            d = np.minimum(d, np.abs(sdf))
        for cx, cy, yaw, length, h in self.walls:
            local = _to_local(p, cx, cy, yaw)
            q = np.stack(
                [
                    np.maximum(np.abs(local[:, 0]) - length / 2, 0),
                    local[:, 1],
                    np.maximum(np.abs(local[:, 2] - h / 2) - h / 2, 0),
                ],
                axis=1,
            )
            d = np.minimum(d, np.linalg.norm(q, axis=1))
        return d


def _to_local(p, cx, cy, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    x, y = p[:, 0] - cx, p[:, 1] - cy
    return np.stack([c * x + s * y, -s * x + c * y, p[:, 2]], axis=1)


def _rotate_dirs(dirs, yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], 1)


def _ray_box(origin, dirs, box):
    cx, cy, yaw, sx, sy, h = box
    o = _to_local(origin[None], cx, cy, yaw)[0]
    d = _rotate_dirs(dirs, yaw)
    lo = np.array([-sx / 2, -sy / 2, 0.0])
    hi = np.array([sx / 2, sy / 2, h])
    t1 = (lo - o) / d
    t2 = (hi - o) / d
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    axis = np.argmax(tmin, axis=1)
    tnear = tmin[np.arange(len(d)), axis]
    tfar = tmax.min(axis=1)
    hit = (tnear <= tfar) & (tnear > _EPS)
    t = np.where(hit, tnear, np.inf)
    n_local = np.zeros((len(d), 3))
    n_local[np.arange(len(d)), axis] = -np.sign(d[np.arange(len(d)), axis])
    c, s = np.cos(yaw), np.sin(yaw)
    n = np.stack([c * n_local[:, 0] - s * n_local[:, 1], s * n_local[:, 0] + c * n_local[:, 1], n_local[:, 2]], 1)
    return t, n


def _ray_cylinder(origin, dirs, cyl):
    cx, cy, r, h = cyl
    ox, oy = origin[0] - cx, origin[1] - cy
    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = 2.0 * (dirs[:, 0] * ox + dirs[:, 1] * oy)
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * c
    t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    z = origin[2] + t_side * dirs[:, 2]
    ok = (disc >= 0) & (a > _EPS) & (t_side > _EPS) & (z >= 0) & (z <= h)
    t_side = np.where(ok, t_side, np.inf)
    hit_xy = np.stack([ox + t_side * dirs[:, 0], oy + t_side * dirs[:, 1]], 1)
    n_side = np.zeros((len(dirs), 3))
    n_side[:, :2] = np.where(ok[:, None], hit_xy / r, 0.0)
    t_cap = (h - origin[2]) / dirs[:, 2]
    rx, ry = ox + t_cap * dirs[:, 0], oy + t_cap * dirs[:, 1]
    cap_ok = (t_cap > _EPS) & (rx * rx + ry * ry <= r * r) & (origin[2] > h)
    t_cap = np.where(cap_ok, t_cap, np.inf)
    use_cap = t_cap < t_side
    t = np.where(use_cap, t_cap, t_side)
    n = np.where(use_cap[:, None], np.array([0.0, 0.0, 1.0]), n_side)
    return t, n


def _ray_wall(origin, dirs, wall):
    cx, cy, yaw, length, h = wall
    nrm = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    tan = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    c = np.array([cx, cy, 0.0])
    denom = dirs @ nrm
    t = np.dot(c - origin, nrm) / denom
    hit = origin + t[:, None] * dirs
    u = (hit - c) @ tan
    ok = (np.abs(denom) > _EPS) & (t > _EPS) & (np.abs(u) <= length / 2) & (hit[:, 2] >= 0) & (hit[:, 2] <= h)
    t = np.where(ok, t, np.inf)
    n = np.where((denom > 0)[:, None], -nrm, nrm)
    return t, n


# --------------------------------------------------------------------------- world


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Knobs for :func:`synthesize_world`; serialisable as ``key=value`` text."""

    seed: int = 0
    n_boxes: int = -1  # negative: derive from the covered area
    n_cylinders: int = -1
    n_planes: int = -1
    margin: float = 30.0
    clearance: float = 3.0
    n_azimuth: int = 360
    n_rings: int = 16
    elev_min_deg: float = -15.0
    elev_max_deg: float = 15.0
    max_range: float = 80.0
    noise_sigma: float = 0.01

    def sensor(self):
        return SensorSpec(
            n_azimuth=self.n_azimuth,
            n_rings=self.n_rings,
            elev_min_deg=self.elev_min_deg,
            elev_max_deg=self.elev_max_deg,
            max_range=self.max_range,
            noise_sigma=self.noise_sigma,
        )

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = int(value) if types[key] in (int, "int") else float(value)
        return cls(**values)


def generate_world(seed, trajectory, n_boxes=-1, n_cylinders=-1, n_planes=-1, margin=30.0, clearance=3.0):
    """Random primitives scattered around the trajectory, keeping the path itself clear."""
    rng = np.random.default_rng(seed)
    xy = np.array([p.translation[:2] for p in trajectory])
    lo = xy.min(axis=0) - margin
    hi = xy.max(axis=0) + margin
    area = float(np.prod(hi - lo))
    n_boxes = int(area / 400) if n_boxes < 0 else n_boxes
    n_cylinders = int(area / 600) if n_cylinders < 0 else n_cylinders
    n_planes = int(area / 1200) if n_planes < 0 else n_planes
    tree = cKDTree(xy)

    def place(count, draw, radius_of):
        out = []
        attempts = 0
        while len(out) < count and attempts < 200 * max(count, 1):
            attempts += 1
            centre = rng.uniform(lo, hi)
            params = draw()
            dist, _ = tree.query(centre)
            if dist > clearance + radius_of(params):
                out.append([*centre, *params])
        return out

    boxes = place(
        n_boxes,
        lambda: [rng.uniform(0, np.pi), rng.uniform(2, 8), rng.uniform(2, 8), rng.uniform(2, 10)],
        lambda q: 0.5 * np.hypot(q[1], q[2]),
    )
    cylinders = place(
        n_cylinders,
        lambda: [rng.uniform(0.3, 1.5), rng.uniform(3, 10)],
        lambda q: q[0],
    )
    walls = place(
        n_planes,
        lambda: [rng.uniform(0, np.pi), rng.uniform(5, 20), rng.uniform(2, 6)],
        lambda q: 0.5 * q[1],
    )
    refl = {
        "ground": 0.3,
        "boxes": rng.uniform(0.2, 1.0, len(boxes)),
        "cylinders": rng.uniform(0.2, 1.0, len(cylinders)),
        "walls": rng.uniform(0.2, 1.0, len(walls)),
    }
    return World(
        np.array(boxes, dtype=float).reshape(-1, 6),
        np.array(cylinders, dtype=float).reshape(-1, 4),
        np.array(walls, dtype=float).reshape(-1, 5),
        refl,
    )


def simulate_scan(world, pose, sensor, rng=None):
    """One sweep from ``pose``; returns the scan in the sensor frame."""
    dirs_s = sensor.ray_directions()
    dirs_w = dirs_s @ pose.rotation.T
    t, normal, refl = world.raycast(pose.translation, dirs_w, sensor.max_range)
    keep = (t <= sensor.max_range) & (t >= sensor.min_range)
    t = t[keep]
    if sensor.noise_sigma > 0:
        if rng is None:
            raise ValueError("a generator is required when noise_sigma > 0")
        t = t + rng.normal(0.0, sensor.noise_sigma, size=len(t))
    pts = t[:, None] * dirs_s[keep]
    cos_inc = np.abs(np.einsum("ij,ij->i", normal[keep], dirs_w[keep]))
    intensity = np.clip(refl[keep] * (0.5 + 0.5 * cos_inc), 0.0, 1.0)
    return PointCloud(pts, intensity)


def synthesize_world(world_seed, trajectory, sensor=None, config=None):
    """Deterministic synthetic scan sequence along ``trajectory``.

    ``config`` (a :class:`SyntheticWorldConfig`) controls primitive counts; when
    omitted, counts are derived from the covered area.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory must be non-empty")
    config = config or SyntheticWorldConfig(seed=world_seed)
    sensor = sensor or config.sensor()
    world = generate_world(
        world_seed,
        trajectory,
        config.n_boxes,
        config.n_cylinders,
        config.n_planes,
        config.margin,
        config.clearance,
    )
    noise_rng = np.random.default_rng([world_seed, 1])
    scans = [simulate_scan(world, pose, sensor, noise_rng) for pose in trajectory]
    seq = ScanSequence(scans, list(trajectory), np.arange(len(scans)) * 0.1)
    seq.meta.update(world=world, sensor=sensor, seed=world_seed)
    return seq


# --------------------------------------------------------------------- trajectories


def _planar_poses(xy, yaw, height):
    return [Pose(rot_z(a), [x, y, height]) for (x, y), a in zip(xy, yaw)]


def straight_trajectory(n, step=1.0, height=1.8, yaw=0.0):
    s = np.arange(n) * step
    xy = np.stack([s * np.cos(yaw), s * np.sin(yaw)], axis=1)
    return _planar_poses(xy, np.full(n, yaw), height)


def square_loop_trajectory(n, side=75.0, corner_radius=8.0, height=1.8, laps=1.0):
    """Counter-clockwise rounded square starting at the middle of the bottom edge.

    ``n`` poses are spaced evenly in arc length over ``laps`` laps, so the last
    pose of a full lap sits one step short of the start.
    """
    straight = side - 2 * corner_radius
    arc = 0.5 * np.pi * corner_radius
    perim = 4 * (straight + arc)
    s = np.arange(n) * (laps * perim / n)
    xs, ys, yaws = [], [], []
    half = side / 2
    for si in s:
        si = si % perim
        # begin half-way along the bottom edge
        si = (si + straight / 2) % perim
        edge, rem = divmod(si, straight + arc)
        heading = edge * np.pi / 2
        c, sn = np.cos(heading), np.sin(heading)
        start = np.array([-half + corner_radius, -half])
        # rotate the canonical bottom-edge geometry by the edge heading
        if rem < straight:
            local = start + [rem, 0.0]
            local_yaw = 0.0
        else:
            phi = (rem - straight) / corner_radius
            centre = start + [straight, corner_radius]
            local = centre + corner_radius * np.array([np.sin(phi), -np.cos(phi)])
            local_yaw = phi
        xs.append(c * local[0] - sn * local[1])
        ys.append(sn * local[0] + c * local[1])
        yaws.append(heading + local_yaw)
    return _planar_poses(np.stack([xs, ys], axis=1), np.array(yaws), height)


def random_trajectory(rng, n, speed=(0.4, 1.0), max_yaw_rate=0.08, height=1.8):
    """Smooth random drive: speed and yaw rate follow slowly varying random walks."""
    v = rng.uniform(*speed)
    w = 0.0
    x = y = yaw = 0.0
    xy, yaws = [], []
    for _ in range(n):
        xy.append((x, y))
        yaws.append(yaw)
        v = float(np.clip(v + rng.normal(0, 0.05), *speed))
        w = float(np.clip(w + rng.normal(0, 0.015), -max_yaw_rate, max_yaw_rate))
        yaw += w
        x += v * np.cos(yaw)
        y += v * np.sin(yaw)
    return _planar_poses(np.array(xy), np.array(yaws), height)
