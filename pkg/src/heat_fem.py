"""
P1 finite elements and Crank-Nicolson time stepping for y_t - Laplace(y) = B u.

Domain (-1,1)^2, homogeneous Neumann boundary, zero initial state. Controls are
piecewise constant in time and act through characteristic functions of disks
omega_i; the state is observed on a disk omega_obs. The adjoint sweep is the
exact algebraic transpose of the forward sweep (discretize-then-optimize).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
from scipy import sparse as sp
from scipy.sparse.linalg import splu

from .config import settings
from .models import PenaltyParams

logger = logging.getLogger(__name__)

# Subdivision depth for triangles crossing a disk boundary (4**depth leaves)
QUADRATURE_DEPTH = 3


class MeshError(Exception):
    """Invalid mesh request (resolution out of range or over the vertex cap)."""
    pass


class FactorizationError(Exception):
    """Sparse factorization of the time-stepping matrix failed."""
    pass


@dataclass(frozen=True)
class SpatialMesh:
    """Triangulation of (-1,1)^2 with assembled P1 mass and stiffness matrices."""
    vertices: np.ndarray
    triangles: np.ndarray
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    cell_size: float

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.triangles)

    @property
    def max_diameter(self) -> float:
        corners = self.vertices[self.triangles]
        edges = corners - np.roll(corners, 1, axis=1)
        return float(np.sqrt((edges**2).sum(axis=2)).max())


@dataclass(frozen=True)
class ControlGeometry:
    """Control disks omega_i, observation disk and their discrete operators."""
    n_components: int
    centers: np.ndarray
    radius: float
    obs_center: np.ndarray
    obs_radius: float
    B: np.ndarray
    obs_mass: sp.csr_matrix

    @property
    def control_areas(self) -> np.ndarray:
        """Discrete |omega_i| = sum_k (b_i)_k."""
        return self.B.sum(axis=0)


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant grid t_0 = 0 < ... < t_M = T."""
    T: float
    intervals: int

    @property
    def tau(self) -> float:
        return self.T / self.intervals

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.intervals + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.intervals) + 0.5) * self.tau

    @property
    def weights(self) -> np.ndarray:
        """Trapezoidal weights for node-valued trajectories."""
        w = np.full(self.intervals + 1, self.tau)
        w[0] = w[-1] = 0.5 * self.tau
        return w


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    e1, e2 = p1 - p0, p2 - p0
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _assemble_p1(vertices: np.ndarray, triangles: np.ndarray) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
    """Exact P1 mass and stiffness matrices."""
    n = vertices.shape[0]
    areas = _triangle_areas(vertices, triangles)
    x = vertices[triangles, 0]
    y = vertices[triangles, 1]

    # gradients of the barycentric coordinates times 2*area
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    k_local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * areas[:, None, None])

    ref_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    m_local = areas[:, None, None] * ref_mass[None, :, :]

    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    mass = sp.coo_matrix((m_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    stiffness = sp.coo_matrix((k_local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return mass, stiffness


def build_mesh(resolution: float, max_vertices: Optional[int] = None) -> SpatialMesh:
    """Structured criss-cross triangulation of (-1,1)^2.

    Square cells are split into two triangles along alternating diagonals. The
    cell side h = 2/ceil(2 sqrt(2)/resolution) keeps the diagonal sqrt(2) h, the
    longest edge, at most resolution.
    """
    if not 0.0 < resolution <= 2.0:
        raise MeshError(f"Resolution must lie in (0, 2], got {resolution}")
    cap = max_vertices if max_vertices is not None else settings.max_vertices

    cells = int(np.ceil(2.0 * np.sqrt(2.0) / resolution - 1e-12))
    nodes_per_side = cells + 1
    if nodes_per_side**2 > cap:
        raise MeshError(f"Mesh with {nodes_per_side**2} vertices exceeds the cap of {cap}")

    coords = np.linspace(-1.0, 1.0, nodes_per_side)
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    i, j = np.meshgrid(np.arange(cells), np.arange(cells), indexing="xy")
    i, j = i.ravel(), j.ravel()
    v00 = j * nodes_per_side + i
    v10 = v00 + 1
    v01 = v00 + nodes_per_side
    v11 = v01 + 1
    flip = (i + j) % 2 == 1

    first = np.where(flip[:, None], np.column_stack([v00, v10, v01]), np.column_stack([v00, v10, v11]))
    second = np.where(flip[:, None], np.column_stack([v10, v11, v01]), np.column_stack([v00, v11, v01]))
    triangles = np.vstack([first, second]).astype(np.int64)

    mass, stiffness = _assemble_p1(vertices, triangles)
    logger.debug(
        "Built mesh",
        extra={"vertices": len(vertices), "triangles": len(triangles), "cell_size": 2.0 / cells},
    )
    return SpatialMesh(vertices=vertices, triangles=triangles, mass=mass, stiffness=stiffness,
                       cell_size=2.0 / cells)


def _reference_leaves(depth: int) -> np.ndarray:
    """Barycentric centroids of the 4**depth congruent sub-triangles of the reference triangle."""
    tris = [np.eye(3)]
    for _ in range(depth):
        refined = []
        for a, b, c in tris:
            ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
            refined.extend([np.array(t) for t in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
        tris = refined
    return np.array([t.mean(axis=0) for t in tris])


def _disk_split(mesh: SpatialMesh, center: np.ndarray, radius: float):
    """Triangles fully inside the disk, and triangles that may cross its boundary."""
    corners = mesh.vertices[mesh.triangles]
    dist = np.sqrt(((corners - center) ** 2).sum(axis=2))
    inside = np.all(dist <= radius, axis=1)
    lo, hi = corners.min(axis=1), corners.max(axis=1)
    near = np.all((lo <= center + radius) & (hi >= center - radius), axis=1)
    return np.flatnonzero(inside), np.flatnonzero(near & ~inside)


def _leaf_hits(mesh: SpatialMesh, tri_idx: np.ndarray, center: np.ndarray, radius: float,
               leaves: np.ndarray) -> np.ndarray:
    corners = mesh.vertices[mesh.triangles[tri_idx]]
    points = np.einsum("lk,tkd->tld", leaves, corners)
    return (((points - center) ** 2).sum(axis=2) <= radius**2).astype(float)


def disk_load_vector(mesh: SpatialMesh, center: np.ndarray, radius: float,
                     depth: int = QUADRATURE_DEPTH) -> np.ndarray:
    """b_k = integral of chi_disk * phi_k."""
    leaves = _reference_leaves(depth)
    areas = mesh.areas
    load = np.zeros(mesh.num_vertices)

    inside, crossing = _disk_split(mesh, center, radius)
    np.add.at(load, mesh.triangles[inside], (areas[inside] / 3.0)[:, None] * np.ones((1, 3)))

    if crossing.size:
        hits = _leaf_hits(mesh, crossing, center, radius, leaves)
        contrib = (areas[crossing] / len(leaves))[:, None] * (hits @ leaves)
        np.add.at(load, mesh.triangles[crossing], contrib)
    return load


def disk_mass_matrix(mesh: SpatialMesh, center: np.ndarray, radius: float,
                     depth: int = QUADRATURE_DEPTH) -> sp.csr_matrix:
    """M_kl = integral of chi_disk * phi_k * phi_l."""
    leaves = _reference_leaves(depth)
    areas = mesh.areas
    n = mesh.num_vertices
    ref_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0

    inside, crossing = _disk_split(mesh, center, radius)
    blocks = [areas[inside][:, None, None] * ref_mass[None]]
    tris = [mesh.triangles[inside]]
    if crossing.size:
        hits = _leaf_hits(mesh, crossing, center, radius, leaves)
        local = np.einsum("tl,lk,lm->tkm", hits, leaves, leaves)
        blocks.append((areas[crossing] / len(leaves))[:, None, None] * local)
        tris.append(mesh.triangles[crossing])

    local = np.concatenate(blocks)
    triangles = np.concatenate(tris)
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def control_centers(n_components: int) -> np.ndarray:
    """Disk centers (cos phi_i, sin phi_i)/sqrt(2), phi_i = pi/4 + 2 pi (i-1)/N."""
    angles = np.pi / 4.0 + 2.0 * np.pi * np.arange(n_components) / n_components
    return np.column_stack([np.cos(angles), np.sin(angles)]) / np.sqrt(2.0)


def assemble_control_geometry(mesh: SpatialMesh, n_components: int, radius: float = 0.1,
                              obs_radius: float = 0.5) -> ControlGeometry:
    """Load vectors b_i for the control disks and the observation mass matrix."""
    if n_components < 1:
        raise ValueError(f"Need at least one control component, got {n_components}")
    centers = control_centers(n_components)
    B = np.column_stack([disk_load_vector(mesh, c, radius) for c in centers])
    obs_center = np.zeros(2)
    obs_mass = disk_mass_matrix(mesh, obs_center, obs_radius)
    return ControlGeometry(n_components=n_components, centers=centers, radius=radius,
                           obs_center=obs_center, obs_radius=obs_radius, B=B, obs_mass=obs_mass)


class HeatSolver:
    """Forward (S, S_0) and adjoint (S*) Crank-Nicolson sweeps on a fixed mesh and grid.

    (M + tau/2 K) is factorized once; the solver is immutable afterwards and each
    sweep allocates its own workspace, so instances can be shared across threads.
    """

    def __init__(self, mesh: SpatialMesh, geometry: ControlGeometry, grid: TimeGrid):
        self.mesh = mesh
        self.geometry = geometry
        self.grid = grid

        tau = grid.tau
        lhs = (mesh.mass + 0.5 * tau * mesh.stiffness).tocsc()
        self._explicit = (mesh.mass - 0.5 * tau * mesh.stiffness).tocsr()
        try:
            self._factor = splu(lhs, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise FactorizationError(f"Factorization of M + tau/2 K failed: {exc}") from exc

    @property
    def control_shape(self) -> Tuple[int, int]:
        return (self.grid.intervals, self.geometry.n_components)

    @property
    def state_shape(self) -> Tuple[int, int]:
        return (self.grid.intervals + 1, self.mesh.num_vertices)

    def check_shape(self, arr, shape, name: str) -> np.ndarray:
        arr = np.asarray(arr, dtype=float)
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        return arr

    def apply_S(self, u) -> np.ndarray:
        """State y at every time node for control u (y^0 = 0)."""
        u = self.check_shape(u, self.control_shape, "control")
        loads = self.grid.tau * (self.geometry.B @ u.T)
        y = np.zeros(self.state_shape)
        for m in range(self.grid.intervals):
            y[m + 1] = self._factor.solve(self._explicit @ y[m] + loads[:, m])
        return y

    def apply_S0(self, u) -> np.ndarray:
        """Solution operator with homogeneous data; coincides with apply_S since y0 = 0."""
        return self.apply_S(u)

    def apply_Sstar(self, r) -> np.ndarray:
        """Transpose of u -> S u with respect to the observed and tau-weighted inner products."""
        r = self.check_shape(r, self.state_shape, "residual")
        weighted = self.grid.weights[:, None] * (self.geometry.obs_mass @ r.T).T
        M = self.grid.intervals
        lam = np.zeros((M, self.mesh.num_vertices))
        lam[M - 1] = self._factor.solve(weighted[M])
        for k in range(M - 2, -1, -1):
            lam[k] = self._factor.solve(weighted[k + 1] + self._explicit @ lam[k + 1])
        return lam @ self.geometry.B

    def observed_inner(self, y, r) -> float:
        """sum_m w_m (y^m)^T M_obs r^m (trapezoidal in time)."""
        y = self.check_shape(y, self.state_shape, "state")
        r = self.check_shape(r, self.state_shape, "state")
        return float(np.sum(self.grid.weights * np.einsum("mk,mk->m", y, (self.geometry.obs_mass @ r.T).T)))

    def control_inner(self, u, v) -> float:
        """tau * sum_m u_m . v_m."""
        return self.grid.tau * float(np.sum(np.asarray(u) * np.asarray(v)))

    def total_mass(self, y) -> np.ndarray:
        """1^T M y^m for every node."""
        return np.asarray(self.mesh.mass @ np.asarray(y).T).sum(axis=0)

    def injected_mass(self, u) -> np.ndarray:
        """Cumulative tau * sum_i (u_m)_i |omega_i|_h after each interval, starting at 0."""
        u = self.check_shape(u, self.control_shape, "control")
        per_step = self.grid.tau * (u @ self.geometry.control_areas)
        return np.concatenate([[0.0], np.cumsum(per_step)])


def target_yd(grid: TimeGrid, mesh: SpatialMesh, n_components: int) -> np.ndarray:
    """Nodal interpolation of y^d = sum_i cos(i + t) sin^2(2 pi t / T) |x - x_i|^2."""
    centers = control_centers(n_components)
    t = grid.nodes
    envelope = np.sin(2.0 * np.pi * t / grid.T) ** 2
    index = np.arange(1, n_components + 1)
    phase = np.cos(index[None, :] + t[:, None]) * envelope[:, None]
    sq_dist = ((mesh.vertices[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return phase @ sq_dist.T


@dataclass(frozen=True)
class SwitchingProblem:
    """Discrete switching-control problem: PDE operators, target and penalty."""
    solver: HeatSolver
    yd: np.ndarray
    penalty: PenaltyParams
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.solver.control_shape

    @property
    def tau(self) -> float:
        return self.solver.grid.tau

    def with_gamma(self, gamma: float) -> "SwitchingProblem":
        return replace(self, penalty=self.penalty.with_gamma(gamma))

    def norm(self, v) -> float:
        """Discrete L2(0,T;R^N) norm."""
        return float(np.sqrt(self.tau * np.sum(np.asarray(v) ** 2)))


def evaluate_objective(problem: SwitchingProblem, u, regularized: bool = False) -> float:
    """1/2 ||y - y^d||^2 on omega_obs plus (alpha/2) tau sum_m |u_m|_1^2.

    With ``regularized`` the Moreau-Yosida term (gamma/2) tau ||u||^2 is added,
    giving the objective minimized at fixed gamma.
    """
    solver = problem.solver
    u = solver.check_shape(u, solver.control_shape, "control")
    diff = solver.apply_S(u) - problem.yd
    value = 0.5 * solver.observed_inner(diff, diff)
    value += 0.5 * problem.penalty.alpha * problem.tau * float(np.sum(np.abs(u).sum(axis=1) ** 2))
    if regularized:
        value += 0.5 * problem.penalty.gamma * problem.tau * float(np.sum(u**2))
    return value


def build_problem(n_components: int, alpha: float, gamma: float = 1e-2, T: float = 10.0,
                  time_intervals: int = 200, mesh_edge: float = 0.1, control_radius: float = 0.1,
                  obs_radius: float = 0.5, yd: Optional[np.ndarray] = None) -> SwitchingProblem:
    """Assemble mesh, geometry, grid and target into a ready-to-solve problem."""
    mesh = build_mesh(mesh_edge)
    geometry = assemble_control_geometry(mesh, n_components, radius=control_radius, obs_radius=obs_radius)
    grid = TimeGrid(T=T, intervals=time_intervals)
    solver = HeatSolver(mesh, geometry, grid)
    target = target_yd(grid, mesh, n_components) if yd is None else np.asarray(yd, dtype=float)
    if target.shape != solver.state_shape:
        raise ValueError(f"Target has shape {target.shape}, expected {solver.state_shape}")
    logger.info(
        "Assembled problem",
        extra={"N": n_components, "alpha": alpha, "vertices": mesh.num_vertices,
               "triangles": len(mesh.triangles), "intervals": time_intervals},
    )
    return SwitchingProblem(solver=solver, yd=target, penalty=PenaltyParams(alpha=alpha, gamma=gamma),
                            meta={"mesh_edge": mesh_edge, "T": T})
