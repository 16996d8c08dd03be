"""2-D finite-element forward model for a circular multi-electrode sensor.

The mesh is a structured polar triangulation of the unit disc: concentric
rings of equally spaced nodes, quads split along alternating ("union jack")
diagonals.  That construction is invariant under the full symmetry group of
the electrode layout (rotations by one electrode pitch and reflections
through electrode centers and gaps), which is what makes the reciprocity and
rotation checks hold to solver precision instead of discretization error.

Electrodes follow the gap model: the drive current is spread uniformly over
the electrode arc, there is no contact impedance, and electrode voltages are
arc averages of the boundary potential.  The singular Neumann system is
closed with a zero-mean gauge via one bordering constraint row.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mfeit.errors import DataFormatError, NumericalError

# Pixel-inclusion radius (fraction of the disc radius) calibrated once so a
# 64x64 grid keeps exactly 3228 cells; the valid plateau is [0.99927, 1.00122].
R_INCL_DEFAULT = 1.0002

_BASE_RINGS = 8
_BASE_THETA = 64

SMAT_MAGIC = b"MFEITA01"


@dataclass(frozen=True)
class SensorGeometry:
    """Circular sensor: equal electrode arcs, equally spaced, electrode 0
    centered at angle 0, indices increasing counter-clockwise."""

    radius: float = 1.0
    n_electrodes: int = 16
    electrode_coverage: float = 1.0 / 32.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sensor radius must be positive")
        if self.n_electrodes < 4:
            raise ValueError("need at least 4 electrodes")
        if not 0.0 < self.electrode_coverage:
            raise ValueError("electrode coverage must be positive")
        if self.n_electrodes * self.electrode_coverage >= 1.0:
            raise ValueError(
                f"{self.n_electrodes} electrodes with coverage "
                f"{self.electrode_coverage} overlap"
            )

    def electrode_center(self, e):
        return 2.0 * np.pi * e / self.n_electrodes

    def electrode_half_width(self):
        return np.pi * self.electrode_coverage


@dataclass
class TriMesh:
    """Triangulation of the disc with per-electrode boundary edge lists."""

    nodes: np.ndarray          # (N, 2)
    triangles: np.ndarray      # (ne, 3) node indices, CCW
    boundary_edges: list       # per electrode: (k, 2) node-index pairs
    refinement_level: int
    geometry: SensorGeometry
    n_rings: int
    n_theta: int

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.triangles.shape[0]

    def element_geometry(self):
        """Per-element P1 shape data: (b, c, area) with grad phi_k =
        (b_k, c_k) / (2 area)."""
        p = self.nodes[self.triangles]  # (ne, 3, 2)
        x = p[:, :, 0]
        y = p[:, :, 1]
        b = np.stack(
            [y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1
        )
        c = np.stack(
            [x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1
        )
        area = 0.5 * (
            (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
            - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        )
        return b, c, area

    def element_centroids(self):
        return self.nodes[self.triangles].mean(axis=1)


@dataclass
class StimProtocol:
    """Adjacent drive/measure channel table after reciprocity deduplication.

    A channel is a pair (d, p): current through electrodes (d, d+1), voltage
    across (p, p+1).  Only the representative with d < p is retained; the
    ordering is drive-major, measurement-minor.
    """

    n_electrodes: int
    drives: list               # [(e, e+1 mod E)]
    measures: list             # per drive: [(p, p+1 mod E)] retained pairs
    channels: list = field(default_factory=list)  # [(d, p)] flattened
    m: int = 0
    raw_count: int = 0


@dataclass
class FieldSolution:
    """Node potentials for one drive, zero-mean gauge."""

    node_potentials: np.ndarray
    drive_index: int


@dataclass
class PixelGrid:
    """Square-cell reconstruction grid masked to the disc.

    Vectorization over masked cells is row-major and is the single canonical
    ordering used by every module.
    """

    H: int
    W: int
    mask: np.ndarray           # (H, W) bool
    n: int
    r_incl: float
    flat_index: np.ndarray     # (n,) row-major positions of masked cells
    centers: np.ndarray        # (n, 2) physical (x, y) of masked cell centers
    cell_size: float

    def to_image(self, vec):
        """Scatter a masked vector (n,) or (n, l) onto the H x W grid."""
        vec = np.asarray(vec)
        img = np.zeros((self.H * self.W,) + vec.shape[1:], dtype=vec.dtype)
        img[self.flat_index] = vec
        return img.reshape((self.H, self.W) + vec.shape[1:])

    def from_image(self, img):
        flat = np.asarray(img).reshape((self.H * self.W,) + np.shape(img)[2:])
        return flat[self.flat_index]

    def cell_of_point(self, xy):
        """Row-major flat cell index containing a physical point (may be an
        unmasked cell); -1 if outside the grid footprint."""
        x, y = xy
        j = int(np.floor((x / self.cell_size) + self.W / 2.0))
        i = int(np.floor(self.H / 2.0 - (y / self.cell_size)))
        if 0 <= i < self.H and 0 <= j < self.W:
            return i * self.W + j
        return -1


@dataclass
class SensitivityMatrix:
    """Normalized Jacobian A mapping fractional conductivity changes to
    fractional voltage changes (both in the Eq.-style normalized units)."""

    entries: np.ndarray        # (m, n)
    grid: PixelGrid
    background_sigma: float
    v_ref: np.ndarray          # (m,) homogeneous reference frame
    element_pixel: np.ndarray  # (ne,) masked-pixel index per mesh element

    @property
    def shape(self):
        return self.entries.shape


def build_disc_mesh(geometry, refinement_level):
    """Build the structured polar mesh at the given refinement level.

    Level L uses 8 * 2**(L-1) rings and 64 * 2**(L-1) angular divisions, so
    the element count grows ~4x per level.  The triangle count is divisible
    by the electrode count by construction.
    """
    if refinement_level < 1:
        raise ValueError("refinement_level must be >= 1")
    scale = 2 ** (refinement_level - 1)
    n_rings = _BASE_RINGS * scale
    n_theta = _BASE_THETA * scale
    E = geometry.n_electrodes
    if n_theta % (2 * E) != 0:
        raise ValueError(f"angular divisions {n_theta} not compatible with {E} electrodes")

    radius = geometry.radius
    radii = radius * np.arange(1, n_rings + 1) / n_rings
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta

    nodes = np.zeros((1 + n_rings * n_theta, 2))
    ring_xy = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    for i in range(n_rings):
        nodes[1 + i * n_theta : 1 + (i + 1) * n_theta] = radii[i] * ring_xy

    def nid(ring, j):
        return 1 + (ring - 1) * n_theta + (j % n_theta)

    tris = []
    for j in range(n_theta):
        tris.append((0, nid(1, j), nid(1, j + 1)))
    for i in range(1, n_rings):
        for j in range(n_theta):
            a = nid(i, j)
            b = nid(i, j + 1)
            c = nid(i + 1, j)
            d = nid(i + 1, j + 1)
            if (i + j) % 2 == 0:
                tris.append((a, d, b))
                tris.append((a, c, d))
            else:
                tris.append((a, c, b))
                tris.append((b, c, d))
    triangles = np.asarray(tris, dtype=np.int64)

    mesh = TriMesh(
        nodes=nodes,
        triangles=triangles,
        boundary_edges=_tag_electrode_edges(geometry, n_rings, n_theta),
        refinement_level=refinement_level,
        geometry=geometry,
        n_rings=n_rings,
        n_theta=n_theta,
    )
    _, _, area = mesh.element_geometry()
    if np.any(area <= 0):
        raise NumericalError("mesh construction produced non-positive areas")
    for e, edges in enumerate(mesh.boundary_edges):
        if len(edges) == 0:
            raise ValueError(
                f"electrode {e} spans no boundary edge at level {refinement_level}"
            )
    return mesh


def _tag_electrode_edges(geometry, n_rings, n_theta):
    """Assign outer-ring edges to electrodes by edge-midpoint angle."""
    E = geometry.n_electrodes
    half = geometry.electrode_half_width()
    first = 1 + (n_rings - 1) * n_theta
    per_electrode = [[] for _ in range(E)]
    for j in range(n_theta):
        a = first + j
        b = first + (j + 1) % n_theta
        mid = 2.0 * np.pi * (j + 0.5) / n_theta
        for e in range(E):
            delta = (mid - geometry.electrode_center(e) + np.pi) % (2.0 * np.pi) - np.pi
            if abs(delta) <= half + 1e-12:
                per_electrode[e].append((a, b))
                break
    return [np.asarray(edges, dtype=np.int64) for edges in per_electrode]


def adjacent_protocol(n_electrodes):
    """Adjacent stimulation/measurement channel table.

    16 electrodes give 16 x 13 = 208 raw channels; reciprocity keeps the 104
    with drive pair index below the measurement pair index.
    """
    if n_electrodes < 4:
        raise ValueError("adjacent protocol needs at least 4 electrodes")
    E = n_electrodes
    drives = [(e, (e + 1) % E) for e in range(E)]
    raw = 0
    measures = []
    channels = []
    for d in range(E):
        excluded = {(d - 1) % E, d, (d + 1) % E}
        valid = [p for p in range(E) if p not in excluded]
        raw += len(valid)
        kept = [p for p in valid if d < p]
        measures.append([(p, (p + 1) % E) for p in kept])
        channels.extend((d, p) for p in kept)
    return StimProtocol(
        n_electrodes=E,
        drives=drives,
        measures=measures,
        channels=channels,
        m=len(channels),
        raw_count=raw,
    )


def channel_rotation_permutation(protocol, shift):
    """Permutation `perm` with frame[perm[k]] the channel that channel k maps
    to when all electrode indices are rotated by `shift` (reciprocity folds
    the pair back into canonical d < p form)."""
    E = protocol.n_electrodes
    index = {dp: k for k, dp in enumerate(protocol.channels)}
    perm = np.empty(protocol.m, dtype=np.int64)
    for k, (d, p) in enumerate(protocol.channels):
        d2 = (d + shift) % E
        p2 = (p + shift) % E
        perm[k] = index[(min(d2, p2), max(d2, p2))]
    return perm


def _assemble_stiffness(mesh, element_sigma):
    sigma = np.asarray(element_sigma, dtype=float)
    if sigma.shape != (mesh.n_elements,):
        raise ValueError(
            f"element_sigma has shape {sigma.shape}, expected ({mesh.n_elements},)"
        )
    if np.any(sigma <= 0):
        raise NumericalError("element conductivities must be positive")
    b, c, area = mesh.element_geometry()
    coeff = sigma / (4.0 * area)  # (ne,)
    local = coeff[:, None, None] * (
        b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]
    )
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    K = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    )
    return K.tocsr()


def _drive_vector(mesh, drive):
    """Boundary load: unit current spread uniformly over the source arc,
    -1 over the sink arc (P1 edge quadrature)."""
    src, snk = drive
    f = np.zeros(mesh.n_nodes)
    for electrode, sign in ((src, 1.0), (snk, -1.0)):
        edges = mesh.boundary_edges[electrode]
        seg = mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        arc = lengths.sum()
        w = sign * lengths / (2.0 * arc)
        np.add.at(f, edges[:, 0], w)
        np.add.at(f, edges[:, 1], w)
    return f


class _GaugedSolver:
    """Sparse factorization of the stiffness matrix with the rank deficiency
    removed at the center node, reusable across right-hand sides.

    The center node is the unique fixed point of every sensor symmetry, so
    eliminating it keeps rotation/reflection invariants exact; the returned
    potentials are projected onto the zero-mean gauge.
    """

    def __init__(self, mesh, element_sigma):
        K = _assemble_stiffness(mesh, element_sigma)
        reduced = K[1:, :][:, 1:].tocsc()
        try:
            self._lu = spla.splu(reduced)
        except RuntimeError as exc:
            raise NumericalError(f"singular forward system: {exc}") from exc
        self._n = mesh.n_nodes

    def solve(self, f):
        u = np.zeros(self._n)
        u[1:] = self._lu.solve(f[1:])
        if not np.all(np.isfinite(u)):
            raise NumericalError("forward solve produced non-finite potentials")
        return u - u.mean()


def forward_solve(mesh, element_sigma, drive, _solver=None):
    """Solve the conduction problem for one adjacent drive pair.

    Returns node potentials in the zero-mean gauge.  `drive` is the source
    electrode index paired with its counter-clockwise neighbour.
    """
    solver = _solver if _solver is not None else _GaugedSolver(mesh, element_sigma)
    u = solver.solve(_drive_vector(mesh, drive))
    return FieldSolution(node_potentials=u, drive_index=drive[0])


def electrode_potentials(mesh, node_potentials):
    """Arc-averaged electrode voltages (gap model measurement functional)."""
    E = mesh.geometry.n_electrodes
    out = np.zeros(E)
    for e in range(E):
        edges = mesh.boundary_edges[e]
        seg = mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        vals = 0.5 * (
            node_potentials[edges[:, 0]] + node_potentials[edges[:, 1]]
        )
        out[e] = (lengths * vals).sum() / lengths.sum()
    return out


def _drive_fields(mesh, element_sigma, protocol):
    """Node potentials for every adjacent pair, one factorization."""
    solver = _GaugedSolver(mesh, element_sigma)
    fields = np.empty((mesh.n_nodes, protocol.n_electrodes))
    for e, drive in enumerate(protocol.drives):
        fields[:, e] = solver.solve(_drive_vector(mesh, drive))
    return fields


def forward_frame(mesh, element_sigma, protocol):
    """Concatenate the retained differential measurements in canonical
    (drive-major, measurement-minor) order."""
    if protocol.n_electrodes != mesh.geometry.n_electrodes:
        raise ValueError(
            f"protocol has {protocol.n_electrodes} electrodes, "
            f"mesh has {mesh.geometry.n_electrodes}"
        )
    fields = _drive_fields(mesh, element_sigma, protocol)
    volts = np.empty((protocol.n_electrodes, protocol.n_electrodes))
    for e in range(protocol.n_electrodes):
        volts[e] = electrode_potentials(mesh, fields[:, e])
    E = protocol.n_electrodes
    frame = np.empty(protocol.m)
    for k, (d, p) in enumerate(protocol.channels):
        frame[k] = volts[d, p] - volts[d, (p + 1) % E]
    return frame


def build_pixel_grid(H, W, r_incl=R_INCL_DEFAULT):
    """Reconstruction grid of square cells; a cell is kept when its center
    lies within r_incl of the disc radius.  64x64 keeps exactly 3228 cells
    at the calibrated default."""
    if H < 2 or W < 2:
        raise ValueError("pixel grid needs H, W >= 2")
    cell = 2.0 / min(H, W)
    i = np.arange(H) + 0.5
    j = np.arange(W) + 0.5
    y = (H / 2.0 - i) * cell
    x = (j - W / 2.0) * cell
    d2 = y[:, None] ** 2 + x[None, :] ** 2
    mask = d2 <= (r_incl * 1.0) ** 2 + 1e-12
    flat_index = np.flatnonzero(mask.ravel())
    yy, xx = np.meshgrid(y, x, indexing="ij")
    centers = np.stack([xx.ravel()[flat_index], yy.ravel()[flat_index]], axis=1)
    return PixelGrid(
        H=H,
        W=W,
        mask=mask,
        n=int(flat_index.size),
        r_incl=r_incl,
        flat_index=flat_index,
        centers=centers,
        cell_size=cell,
    )


def map_elements_to_pixels(mesh, grid):
    """Masked-pixel index for every mesh element (centroid membership;
    centroids falling in an excluded rim cell go to the nearest masked cell
    center so no sensitivity mass is dropped)."""
    centroids = mesh.element_centroids()
    j = np.floor(centroids[:, 0] / grid.cell_size + grid.W / 2.0).astype(np.int64)
    i = np.floor(grid.H / 2.0 - centroids[:, 1] / grid.cell_size).astype(np.int64)
    j = np.clip(j, 0, grid.W - 1)
    i = np.clip(i, 0, grid.H - 1)
    flat = i * grid.W + j
    lookup = np.full(grid.H * grid.W, -1, dtype=np.int64)
    lookup[grid.flat_index] = np.arange(grid.n)
    pix = lookup[flat]
    missing = np.flatnonzero(pix < 0)
    if missing.size:
        from scipy.spatial import cKDTree

        tree = cKDTree(grid.centers)
        _, nearest = tree.query(centroids[missing])
        pix[missing] = nearest
    return pix


def sensitivity_matrix(mesh, background_sigma, protocol, grid):
    """Adjoint-method Jacobian on the pixel grid, normalized so that it maps
    fractional conductivity changes to fractional voltage changes.

    For channel (d, p) and pixel q:
        A[k, q] = -sigma_ref * sum over elements in q of
                  area * grad(u_d) . grad(u_p) / V_ref[k]
    with both fields driven at unit current on the homogeneous background.
    """
    if background_sigma <= 0:
        raise NumericalError("background conductivity must be positive")
    sigma = np.full(mesh.n_elements, float(background_sigma))
    fields = _drive_fields(mesh, sigma, protocol)
    E = protocol.n_electrodes

    b, c, area = mesh.element_geometry()
    tri = mesh.triangles
    # per-field element gradients, (ne, 2, E)
    grads = np.empty((mesh.n_elements, 2, E))
    for e in range(E):
        u = fields[tri, e]  # (ne, 3)
        grads[:, 0, e] = (u * b).sum(axis=1)
        grads[:, 1, e] = (u * c).sum(axis=1)
    grads /= (2.0 * area)[:, None, None]

    volts = np.empty((E, E))
    for e in range(E):
        volts[e] = electrode_potentials(mesh, fields[:, e])
    v_ref = np.empty(protocol.m)
    for k, (d, p) in enumerate(protocol.channels):
        v_ref[k] = volts[d, p] - volts[d, (p + 1) % E]
    if np.any(np.abs(v_ref) < 1e-14):
        bad = int(np.argmin(np.abs(v_ref)))
        raise NumericalError(f"zero homogeneous reference voltage in channel {bad}")

    pix = map_elements_to_pixels(mesh, grid)
    entries = np.empty((protocol.m, grid.n))
    for k, (d, p) in enumerate(protocol.channels):
        dot = (grads[:, :, d] * grads[:, :, p]).sum(axis=1)
        s = -(dot * area) * background_sigma / v_ref[k]
        entries[k] = np.bincount(pix, weights=s, minlength=grid.n)
    if not np.all(np.isfinite(entries)):
        raise NumericalError("sensitivity matrix has non-finite entries")
    return SensitivityMatrix(
        entries=entries,
        grid=grid,
        background_sigma=float(background_sigma),
        v_ref=v_ref,
        element_pixel=pix,
    )


def save_sensitivity(path, smat):
    """Standalone sensitivity file: magic, u32 m/n/H/W, mask bytes, float32
    row-major entries (little-endian)."""
    m, n = smat.entries.shape
    grid = smat.grid
    with open(path, "wb") as fh:
        fh.write(SMAT_MAGIC)
        fh.write(struct.pack("<4I", m, n, grid.H, grid.W))
        fh.write(grid.mask.astype(np.uint8).tobytes())
        fh.write(smat.entries.astype("<f4").tobytes())


def load_sensitivity(path, background_sigma=2.0):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SMAT_MAGIC:
        raise DataFormatError(f"{path}: bad sensitivity magic", offset=0)
    if len(raw) < 24:
        raise DataFormatError(f"{path}: truncated header", offset=len(raw))
    m, n, H, W = struct.unpack_from("<4I", raw, 8)
    pos = 24
    if len(raw) < pos + H * W:
        raise DataFormatError(f"{path}: truncated mask", offset=len(raw))
    mask = np.frombuffer(raw, dtype=np.uint8, count=H * W, offset=pos)
    mask = mask.reshape(H, W).astype(bool)
    pos += H * W
    if int(mask.sum()) != n:
        raise DataFormatError(f"{path}: mask count disagrees with n={n}", offset=pos)
    if len(raw) != pos + 4 * m * n:
        raise DataFormatError(f"{path}: wrong entry payload size", offset=len(raw))
    entries = np.frombuffer(raw, dtype="<f4", count=m * n, offset=pos)
    entries = entries.reshape(m, n).astype(float)
    grid = _grid_from_mask(mask)
    return SensitivityMatrix(
        entries=entries,
        grid=grid,
        background_sigma=background_sigma,
        v_ref=np.array([]),
        element_pixel=np.array([], dtype=np.int64),
    )


def _grid_from_mask(mask):
    H, W = mask.shape
    cell = 2.0 / min(H, W)
    flat_index = np.flatnonzero(mask.ravel())
    i = np.arange(H) + 0.5
    j = np.arange(W) + 0.5
    y = (H / 2.0 - i) * cell
    x = (j - W / 2.0) * cell
    yy, xx = np.meshgrid(y, x, indexing="ij")
    centers = np.stack([xx.ravel()[flat_index], yy.ravel()[flat_index]], axis=1)
    return PixelGrid(
        H=H,
        W=W,
        mask=mask,
        n=int(flat_index.size),
        r_incl=float("nan"),
        flat_index=flat_index,
        centers=centers,
        cell_size=cell,
    )
