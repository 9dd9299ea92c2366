"""Submap SLAM: local scan-to-submap matching plus pose-graph loop closure.

Scans are matched against the active submap with the Gauss-Newton refiner
and inserted as hits/misses. After a fixed number of insertions a submap is
finished (frozen) and a new one opens at the current pose. Finished
submaps are searched exhaustively with a correlative matcher to produce
loop-closure constraints, and the graph of submap and scan poses is then
relaxed by weighted nonlinear least squares.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geom import Pose2, between, compose, normalize_angle, normalize_angles
from .gridmap import OccupancyGrid, Submap, insert_scan
from .hector import MIN_BEAMS, refine, MatchDiagnostics

FINISH_THRESHOLD = 90
INTRA_WEIGHT = np.array([1e4, 1e4, 1e4])
LOW_CONFIDENCE_WEIGHT = np.array([1e2, 1e2, 1e2])
LOOP_WEIGHT = np.array([1e3, 1e3, 1e3])
CLOSURE_GATE = 3.0
MIN_SCORE = 0.6
OCCUPIED = 0.55


@dataclass(frozen=True)
class SearchWindow:
    linear: float = 0.5
    angular: float = math.radians(15.0)
    angular_step: float = math.radians(1.0)
    linear_step: float | None = None  # defaults to the grid resolution


@dataclass
class PoseGraphNode:
    id: int
    pose: Pose2
    scan: object
    timestamp: float
    submaps: list = field(default_factory=list)


@dataclass
class Constraint:
    """Relative pose of node ``to`` seen from ``from_kind``/``from_id``."""

    from_kind: str
    from_id: int
    to: int
    relative: Pose2
    weight: np.ndarray = field(default_factory=lambda: INTRA_WEIGHT.copy())
    kind: str = "intra"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        if self.from_kind not in ("submap", "node"):
            raise ValueError(f"bad constraint source kind {self.from_kind!r}")
        if np.any(self.weight <= 0):
            raise ValueError("constraint weights must be positive")


@dataclass
class PoseGraph:
    nodes: list = field(default_factory=list)
    submaps: list = field(default_factory=list)
    constraints: list = field(default_factory=list)

    def node_poses(self) -> list:
        return [n.pose for n in self.nodes]

    def to_json(self) -> dict:
        def p(pose):
            return [round(pose.x, 6), round(pose.y, 6), round(pose.yaw, 6)]
        return {
            "nodes": [{"id": n.id, "t": round(n.timestamp, 6), "pose": p(n.pose),
                       "submaps": list(n.submaps)} for n in self.nodes],
            "submaps": [{"id": s.id, "origin": p(s.origin_global), "state": s.state,
                         "scans_inserted": s.scans_inserted} for s in self.submaps],
            "constraints": [{"from": [c.from_kind, c.from_id], "to": c.to, "kind": c.kind,
                             "relative": p(c.relative), "weight": c.weight.tolist()}
                            for c in self.constraints],
        }

    def export_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path


# ------------------------------------------------------ correlative search

def correlative_scores(grid: OccupancyGrid, pts: np.ndarray, center: Pose2,
                       window: SearchWindow = SearchWindow()):
    """Score every pose of the search window.

    Returns ``(scores, angles, offsets)`` where ``scores[a, i, j]`` is the
    fraction of endpoints landing on occupied cells for yaw ``angles[a]``
    and translation ``(offsets[i], offsets[j])`` added to ``center``.
    Translations are whole cells, so each candidate is an integer shift of
    the cell indices of the rotated scan.
    """
    res = grid.resolution
    step = window.linear_step or res
    cells_per_step = max(1, int(round(step / res)))
    n_lin = int(math.floor(window.linear / step + 1e-9))
    shifts = cells_per_step * np.arange(-n_lin, n_lin + 1)
    n_ang = int(math.floor(window.angular / window.angular_step + 1e-9))
    angles = center.yaw + window.angular_step * np.arange(-n_ang, n_ang + 1)

    pad = int(np.abs(shifts).max()) + 1
    occ = np.pad(grid.probabilities > OCCUPIED, pad)
    h, w = occ.shape
    n = max(len(pts), 1)
    scores = np.zeros((len(angles), len(shifts), len(shifts)))
    for a, yaw in enumerate(angles):
        cells = np.floor(grid.world_to_cells(Pose2(center.x, center.y, yaw).transform_points(pts)))
        cx = np.clip(cells[:, 0].astype(np.int64), -pad, grid.width - 1 + pad) + pad
        cy = np.clip(cells[:, 1].astype(np.int64), -pad, grid.height - 1 + pad) + pad
        X = np.clip(cx[:, None] + shifts[None, :], 0, w - 1)
        Y = np.clip(cy[:, None] + shifts[None, :], 0, h - 1)
        scores[a] = occ[Y[:, None, :], X[:, :, None]].sum(axis=0) / n
    return scores, angles, shifts * res


def correlative_search(submap: Submap, scan, center: Pose2, window: SearchWindow = SearchWindow(),
                       min_score: float = MIN_SCORE):
    """Best ``(local pose, score)`` over the window, or None below ``min_score``.

    Ties resolve to the first candidate in (yaw, x, y) ascending order.
    """
    pts = scan.endpoints() if hasattr(scan, "endpoints") else np.asarray(scan)
    if len(pts) == 0:
        return None
    scores, angles, offsets = correlative_scores(submap.grid, pts, center, window)
    a, i, j = np.unravel_index(int(np.argmax(scores)), scores.shape)
    best = float(scores[a, i, j])
    if best < min_score:
        return None
    return Pose2(center.x + offsets[i], center.y + offsets[j], angles[a]), best


def find_loop_closures(graph: PoseGraph, node: PoseGraphNode, window: SearchWindow = SearchWindow(),
                       gate: float = CLOSURE_GATE) -> list:
    found = []
    for sm in graph.submaps:
        if not sm.finished or sm.id in node.submaps:
            continue
        if math.hypot(sm.origin_global.x - node.pose.x, sm.origin_global.y - node.pose.y) > gate:
            continue
        hit = correlative_search(sm, node.scan, sm.to_local(node.pose), window)
        if hit is not None:
            found.append(Constraint("submap", sm.id, node.id, hit[0], LOOP_WEIGHT.copy(), "loop"))
    return found


# ------------------------------------------------------------ optimization

class DisconnectedGraphError(ValueError):
    pass


def _variables(graph: PoseGraph):
    """Index map: nodes first, then submaps."""
    index = {("node", n.id): k for k, n in enumerate(graph.nodes)}
    off = len(graph.nodes)
    index.update({("submap", s.id): off + k for k, s in enumerate(graph.submaps)})
    return index


def constraint_error(a: np.ndarray, b: np.ndarray, z: Pose2) -> np.ndarray:
    """Residual of measuring ``b`` from ``a``: predicted relative pose minus ``z``."""
    c, s = math.cos(a[2]), math.sin(a[2])
    dx, dy = b[0] - a[0], b[1] - a[1]
    return np.array([c * dx + s * dy - z.x, -s * dx + c * dy - z.y,
                     normalize_angle(b[2] - a[2] - z.yaw)])


def _jacobians(a: np.ndarray, b: np.ndarray):
    c, s = math.cos(a[2]), math.sin(a[2])
    dx, dy = b[0] - a[0], b[1] - a[1]
    Ja = np.array([[-c, -s, -s * dx + c * dy],
                   [s, -c, -c * dx - s * dy],
                   [0.0, 0.0, -1.0]])
    Jb = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    return Ja, Jb


def total_error(graph: PoseGraph, x: np.ndarray | None = None) -> float:
    index = _variables(graph)
    if x is None:
        x = _state(graph)
    err = 0.0
    for c in graph.constraints:
        e = constraint_error(x[index[(c.from_kind, c.from_id)]], x[index[("node", c.to)]], c.relative)
        err += float(np.sum(c.weight * e * e))
    return err


def _state(graph: PoseGraph) -> np.ndarray:
    return np.array([n.pose.as_array() for n in graph.nodes] +
                    [s.origin_global.as_array() for s in graph.submaps]).reshape(-1, 3)


def check_connected(graph: PoseGraph):
    index = _variables(graph)
    n = len(index)
    if n <= 1:
        return
    rows, cols = [], []
    for c in graph.constraints:
        rows.append(index[(c.from_kind, c.from_id)])
        cols.append(index[("node", c.to)])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    anchor = labels[0]
    if np.any(labels != anchor):
        names = {v: f"{k[0]} {k[1]}" for k, v in index.items()}
        lost = [names[i] for i in range(n) if labels[i] != anchor]
        raise DisconnectedGraphError("pose graph is disconnected; unreachable from node "
                                     f"{graph.nodes[0].id}: {', '.join(lost)}")


def optimize(graph: PoseGraph, max_iter: int = 50, tol: float = 1e-6) -> PoseGraph:
    """Gauss-Newton relaxation with the first node held fixed.

    Each accepted step does not increase the total weighted squared
    residual; a step that would is halved up to five times, then the loop
    stops.
    """
    if len(graph.nodes) == 0 or not graph.constraints:
        return graph
    check_connected(graph)
    index = _variables(graph)
    x = _state(graph)
    nvar = len(x)
    current = total_error(graph, x)
    for _ in range(max_iter):
        H = np.zeros((3 * nvar, 3 * nvar))
        g = np.zeros(3 * nvar)
        for c in graph.constraints:
            ia, ib = index[(c.from_kind, c.from_id)], index[("node", c.to)]
            e = constraint_error(x[ia], x[ib], c.relative)
            Ja, Jb = _jacobians(x[ia], x[ib])
            W = np.diag(c.weight)
            sa, sb = slice(3 * ia, 3 * ia + 3), slice(3 * ib, 3 * ib + 3)
            H[sa, sa] += Ja.T @ W @ Ja
            H[sa, sb] += Ja.T @ W @ Jb
            H[sb, sa] += Jb.T @ W @ Ja
            H[sb, sb] += Jb.T @ W @ Jb
            g[sa] += Ja.T @ W @ e
            g[sb] += Jb.T @ W @ e
        free = np.arange(3, 3 * nvar)
        try:
            step = np.linalg.solve(H[np.ix_(free, free)], -g[free])
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H[np.ix_(free, free)], -g[free], rcond=None)[0]
        delta = np.concatenate([np.zeros(3), step]).reshape(-1, 3)
        for _ in range(6):
            cand = x + delta
            cand[:, 2] = normalize_angles(cand[:, 2])
            err = total_error(graph, cand)
            if err <= current:
                break
            delta = 0.5 * delta
        else:
            break
        x, current = cand, err
        if np.linalg.norm(delta) < tol:
            break
    for k, n in enumerate(graph.nodes):
        n.pose = Pose2.from_array(x[k])
    off = len(graph.nodes)
    for k, s in enumerate(graph.submaps):
        s.origin_global = Pose2.from_array(x[off + k])
    return graph


# ------------------------------------------------------------------ pipeline

@dataclass
class SubmapState:
    graph: PoseGraph = field(default_factory=PoseGraph)
    finish_threshold: int = FINISH_THRESHOLD
    submap_size: float = 24.0
    resolution: float = 0.05
    max_iter: int = 10
    match_levels: int = 3
    extrapolate: bool = True
    window: SearchWindow = SearchWindow()
    closure_interval: int = 5
    optimize_enabled: bool = True
    drift_per_scan: Pose2 = field(default_factory=Pose2)
    last_match: MatchDiagnostics = field(default_factory=MatchDiagnostics)
    closures: int = 0
    coarse: dict = field(default_factory=dict)
    _drift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _last_local: Pose2 = field(default_factory=Pose2)
    _last_t: float | None = None
    _motion: Pose2 = field(default_factory=Pose2)
    _motion_dt: float = 0.0
    _anchor_drift: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def active(self) -> Submap | None:
        if self.graph.submaps and not self.graph.submaps[-1].finished:
            return self.graph.submaps[-1]
        return None

    def new_submap(self, origin: Pose2) -> Submap:
        sm = Submap.create(origin, self.submap_size, self.resolution,
                           self.finish_threshold, id=len(self.graph.submaps))
        self.graph.submaps.append(sm)
        self.coarse[sm.id] = [OccupancyGrid.centered(self.submap_size, self.resolution * 2 ** k)
                              for k in range(1, self.match_levels)]
        self._anchor_drift = self._drift.copy()
        return sm


def _predict_local(state: SubmapState, t: float) -> Pose2:
    """Constant-velocity guess in the active submap frame.

    Working in the submap frame keeps the matcher independent of whatever
    the graph currently believes about global poses.
    """
    if state._last_t is None:
        return Pose2()
    if not state.extrapolate or state._motion_dt <= 0:
        return state._last_local
    f = (t - state._last_t) / state._motion_dt
    m = state._motion
    return compose(state._last_local, Pose2(m.x * f, m.y * f, m.yaw * f))


def _insert(state: SubmapState, sm: Submap, local: Pose2, scan):
    for grid in state.coarse[sm.id]:
        insert_scan(grid, local, scan)
    sm.insert(local, scan)
    if sm.finished:
        state.coarse.pop(sm.id)  # only needed while matching against it


def insert(state: SubmapState, scan, local_match_init: Pose2) -> PoseGraphNode:
    """Refine against the active submap, insert, and record the node."""
    graph = state.graph
    active = state.active
    if active is None:
        active = state.new_submap(local_match_init)
    pts = scan.endpoints()
    init_local = active.to_local(local_match_init)
    diag = MatchDiagnostics()
    if active.scans_inserted == 0:
        local, weight = init_local, INTRA_WEIGHT
    elif len(pts) < MIN_BEAMS:
        diag.no_match = True
        local, weight = init_local, LOW_CONFIDENCE_WEIGHT
    else:
        local = init_local
        for grid in reversed([active.grid] + state.coarse[active.id]):
            diag.converged = False
            local = refine(grid, pts, local, state.max_iter, diag)
        weight = INTRA_WEIGHT
    state.last_match = diag
    state._drift = state._drift + state.drift_per_scan.as_array()
    # injected drift only corrupts the global estimate, never the local match
    pose = Pose2(*(active.to_global(local).as_array() + state._drift - state._anchor_drift))
    if state._last_t is not None:
        state._motion = between(state._last_local, local)
        state._motion_dt = scan.timestamp - state._last_t
    state._last_local, state._last_t = local, scan.timestamp
    node = PoseGraphNode(len(graph.nodes), pose, scan, scan.timestamp, [active.id])
    graph.nodes.append(node)
    if len(pts):
        _insert(state, active, local, scan)
    graph.constraints.append(Constraint("submap", active.id, node.id, local, weight.copy()))
    active.members.append(node.id)
    if active.finished:
        fresh = state.new_submap(node.pose)
        if len(pts):
            _insert(state, fresh, Pose2(), scan)
        fresh.members.append(node.id)
        node.submaps.append(fresh.id)
        graph.constraints.append(Constraint("submap", fresh.id, node.id, Pose2(), weight.copy()))
        state._last_local = Pose2()
    return node


def process_scan(state: SubmapState, scan) -> tuple[Pose2, SubmapState]:
    graph = state.graph
    local = _predict_local(state, scan.timestamp)
    init = state.active.to_global(local) if state.active is not None else local
    before = len(graph.submaps)
    node = insert(state, scan, init)
    new_constraints = []
    if len(graph.submaps) > before and before > 0:
        finished = graph.submaps[-2]
        for nid in finished.members:
            new_constraints += find_loop_closures(graph, graph.nodes[nid], state.window)
    elif node.id % state.closure_interval == 0:
        new_constraints += find_loop_closures(graph, node, state.window)
    if new_constraints:
        graph.constraints += new_constraints
        state.closures += len(new_constraints)
        if state.optimize_enabled:
            optimize(graph)
    return graph.nodes[-1].pose, state


class SubmapSLAM:
    name = "submap"

    def __init__(self, **kwargs):
        self.state = SubmapState(**kwargs)

    def process_scan(self, scan) -> Pose2:
        pose, _ = process_scan(self.state, scan)
        return pose

    def final_map(self) -> OccupancyGrid:
        return self.state.graph.submaps[-1].grid if self.state.graph.submaps else None
