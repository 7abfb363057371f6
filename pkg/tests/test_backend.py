import numpy as np
import pytest
from scipy.optimize import least_squares

from lidarfuse.backend import (
    Edge,
    PoseGraph,
    detect_loop,
    edge_residual,
    export_graph,
    load_graph,
    loop_edge_from_match,
    optimize_graph,
    scan_context,
    sc_distance,
    shift_descriptor,
)
from lidarfuse.exceptions import NotConnectedError
from lidarfuse.geometry import Pose, rot_z, se3_exp
from lidarfuse.pointcloud import PointCloud
from lidarfuse.synthetic import SensorSpec, generate_world, simulate_scan, square_loop_trajectory

# ---------------------------------------------------------------------- scan context


def test_descriptor_empty_and_single_point():
    d = scan_context(PointCloud(np.zeros((0, 3))))
    assert d.shape == (20, 60) and not d.occupied.any() and np.all(d.matrix == 0)
    d = scan_context(PointCloud([[5.0, 0.0, 2.0]]), rings=20, sectors=60, max_radius=80.0)
    assert d.occupied.sum() == 1 and d.occupied[1, 0] and d.matrix[1, 0] == 2.0


def test_descriptor_rotation_shifts_columns(scan_pair):
    a, _, _ = scan_pair
    d0 = scan_context(a)
    d1 = scan_context(a.transformed(Pose(rot_z(2 * np.pi / 60))))
    np.testing.assert_array_equal(np.roll(d0.occupied, 1, axis=1), d1.occupied)
    np.testing.assert_allclose(np.roll(d0.matrix, 1, axis=1), d1.matrix, atol=1e-12)


def test_sc_distance_self_and_shift(scan_pair):
    a, _, _ = scan_pair
    d = scan_context(a)
    dist, shift = sc_distance(d, d)
    assert dist < 1e-12 and shift == 0
    for k in (1, 7, 59):
        dist, shift = sc_distance(d, shift_descriptor(d, k))
        assert dist < 1e-12 and shift == k


def test_sc_distance_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = scan_context(PointCloud(np.zeros((0, 3))))
        b = scan_context(PointCloud(np.zeros((0, 3))))
        a.matrix[:], b.matrix[:] = rng.uniform(0.1, 3, a.shape), rng.uniform(0.1, 3, b.shape)
        a.occupied[:], b.occupied[:] = True, True
        assert abs(sc_distance(a, b)[0] - sc_distance(b, a)[0]) < 1e-9


def test_detect_loop_trivial(scan_pair):
    a, _, _ = scan_pair
    d = scan_context(a)
    assert detect_loop(d, []) is None
    assert detect_loop(d, [d] * 10, exclusion=50) is None


@pytest.fixture(scope="module")
def loop_run():
    traj = square_loop_trajectory(500, side=75.0)
    world = generate_world(21, traj)
    sensor = SensorSpec(noise_sigma=0.01)
    rng = np.random.default_rng(0)
    scans = [simulate_scan(world, p, sensor, rng) for p in traj]
    return traj, scans


def test_detect_loop_square(loop_run):
    traj, scans = loop_run
    descs = [scan_context(s) for s in scans]
    match = detect_loop(descs[-1], descs[:-1], exclusion=50, threshold=0.2)
    assert match is not None and match.index < 5 and match.distance < 0.2


def test_loop_edge_cases(loop_run):
    traj, scans = loop_run
    assert loop_edge_from_match(scans[0], scans[0], 0).allclose(Pose(), atol=1e-6)
    truth = traj[0].inverse() @ traj[-1]
    est = loop_edge_from_match(scans[-1], scans[0], 0)
    err = est.inverse() @ truth
    assert np.linalg.norm(err.translation) < 0.05
    assert np.degrees(err.rotation_angle()) < 0.5
    far = PointCloud(scans[0].points + [500.0, 0.0, 0.0])
    assert loop_edge_from_match(scans[0], far, 0) is None


# ------------------------------------------------------------------------ pose graph


def test_consistent_graph_is_fixed_point():
    rng = np.random.default_rng(0)
    poses = [Pose()]
    for _ in range(10):
        poses.append(poses[-1] @ se3_exp(rng.normal(0, 0.3, 6)))
    g = PoseGraph.from_odometry(poses)
    g.add_loop(0, 10, poses[0].inverse() @ poses[10])
    assert g.cost() < 1e-20
    out = optimize_graph(g)
    for p, q in zip(out.nodes, poses):
        assert p.allclose(q, atol=1e-9)


def _translation_graph(z01, z12, z02):
    nodes = [Pose(), Pose(np.eye(3), z01), Pose(np.eye(3), z01 + z12)]
    g = PoseGraph(nodes, [Edge(0, 1, Pose(np.eye(3), z01)), Edge(1, 2, Pose(np.eye(3), z12))])
    g.add_loop(0, 2, Pose(np.eye(3), z02))
    return g


def test_three_node_closed_form():
    z01, z12, z02 = np.array([1.3, 0, 0]), np.array([1.0, 0, 0]), np.array([2.0, 0, 0])
    out = optimize_graph(_translation_graph(z01, z12, z02), tol=1e-16)
    # unknowns x1, x2 with x0 = 0: x1 = z01, x2 - x1 = z12, x2 = z02
    a = np.array([[1, 0], [-1, 1], [0, 1]], dtype=float)
    sol, *_ = np.linalg.lstsq(np.kron(a, np.eye(3)), np.concatenate([z01, z12, z02]), rcond=None)
    np.testing.assert_allclose(out.nodes[1].translation, sol[:3], atol=1e-6)
    np.testing.assert_allclose(out.nodes[2].translation, sol[3:], atol=1e-6)
    np.testing.assert_allclose(out.nodes[1].rotation, np.eye(3), atol=1e-9)


def test_three_node_general_matches_dense_solver():
    rng = np.random.default_rng(3)
    truth = [Pose(), se3_exp(rng.normal(0, 0.5, 6)), se3_exp(rng.normal(0, 0.5, 6))]
    z = {(i, j): truth[i].inverse() @ truth[j] @ se3_exp(rng.normal(0, 0.05, 6)) for i, j in ((0, 1), (1, 2), (0, 2))}
    g = PoseGraph([Pose(), z[0, 1], z[0, 1] @ z[1, 2]], [Edge(0, 1, z[0, 1]), Edge(1, 2, z[1, 2])])
    g.add_loop(0, 2, z[0, 2])
    out = optimize_graph(g, tol=1e-16)

    def residual(v):
        x = [Pose(), g.nodes[1] @ se3_exp(v[:6]), g.nodes[2] @ se3_exp(v[6:])]
        return np.concatenate([edge_residual(x[i], x[j], m) for (i, j), m in z.items()])

    fit = least_squares(residual, np.zeros(12), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    assert out.nodes[1].allclose(g.nodes[1] @ se3_exp(fit.x[:6]), atol=1e-6)
    assert out.nodes[2].allclose(g.nodes[2] @ se3_exp(fit.x[6:]), atol=1e-6)


def _drifted_square(n=200, yaw_bias=0.002):
    gt = square_loop_trajectory(n, side=50.0)
    rel = [a.inverse() @ b for a, b in zip(gt[:-1], gt[1:])]
    drift = Pose(rot_z(yaw_bias), [0.01, 0.0, 0.0])
    est = [gt[0]]
    for r in rel:
        est.append(est[-1] @ r @ drift)
    return gt, est


def test_loop_closure_reduces_end_point_error():
    gt, est = _drifted_square()
    g = PoseGraph.from_odometry(est)
    g.add_loop(0, len(gt) - 1, gt[0].inverse() @ gt[-1])
    out = optimize_graph(g)

    def end_err(poses):
        return np.linalg.norm((poses[0].inverse() @ poses[-1]).translation - (gt[0].inverse() @ gt[-1]).translation)

    assert end_err(est) >= 5 * end_err(out.nodes)
    costs = np.array(out.report.costs)
    assert np.all(np.diff(costs) <= 0)
    assert out.nodes[0] is g.nodes[0]
    np.testing.assert_array_equal(out.nodes[0].as_matrix(), g.nodes[0].as_matrix())


def test_graph_validation():
    g = PoseGraph([Pose(), Pose(), Pose()], [Edge(0, 1, Pose())])
    with pytest.raises(NotConnectedError):
        optimize_graph(g)
    with pytest.raises(ValueError):
        PoseGraph([Pose()], [Edge(0, 3, Pose())]).validate()


def test_graph_text_round_trip(tmp_path):
    gt, est = _drifted_square(20)
    g = PoseGraph.from_odometry(est)
    g.add_loop(0, 19, gt[0].inverse() @ gt[-1], weight=2.0)
    path = export_graph(g, tmp_path / "g.txt")
    back = load_graph(path)
    assert len(back.nodes) == 20 and len(back.loop_edges) == 1 and back.loop_edges[0].weight == 2.0
    for p, q in zip(back.nodes, g.nodes):
        assert p.allclose(q, atol=1e-12)
    again = open(export_graph(back, tmp_path / "h.txt")).read().split()
    first = open(path).read().split()
    assert [w for w in again if w.isalpha()] == [w for w in first if w.isalpha()]
    np.testing.assert_allclose(
        [float(w) for w in again if not w.isalpha()], [float(w) for w in first if not w.isalpha()], atol=1e-12
    )
