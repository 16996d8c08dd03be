"""Multi-frequency phantom dataset: random circular inclusions over a saline
background, simulated on a finer mesh than the one behind the Jacobian, then
normalized to fractional voltage/conductivity changes.

Conductivity groups follow the canonical 3 x 4 table (S/m), all below the
2 S/m background and strictly increasing with frequency:

    group 0:  0.01  0.6  1.2  1.8
    group 1:  0.4   0.6  0.8  1.0
    group 2:  0.8   1.0  1.2  1.4
"""

import dataclasses
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from mfeit import fem
from mfeit.errors import DataFormatError, NumericalError
from mfeit.ioutil import fnv1a64, hash_seed

CONTAINER_MAGIC = b"MFEIT001"
CONTAINER_VERSION = 1

CANONICAL_GROUP_TABLE = np.array(
    [
        [0.01, 0.6, 1.2, 1.8],
        [0.4, 0.6, 0.8, 1.0],
        [0.8, 1.0, 1.2, 1.4],
    ]
)
CANONICAL_BACKGROUND = 2.0

# inclusion-count proportions for 1/2/3 objects, canonical 3k:4k:5414 mix
CANONICAL_PROPORTIONS = (3000 / 12414, 4000 / 12414, 5414 / 12414)

DIAMETER_RANGE = (0.05, 0.3)  # fraction of the sensor diameter
REJECTION_BUDGET = 10_000


@dataclass
class ConductivityGroups:
    groups: np.ndarray = field(
        default_factory=lambda: CANONICAL_GROUP_TABLE.copy()
    )
    background_sigma: float = CANONICAL_BACKGROUND
    frequencies: tuple = ("f1", "f2", "f3", "f4")

    def __post_init__(self):
        self.groups = np.asarray(self.groups, dtype=float)
        if self.groups.ndim != 2 or self.groups.shape[0] != 3:
            raise ValueError("group table must be 3 x l")
        if len(self.frequencies) != self.groups.shape[1]:
            raise ValueError("frequency labels must match the table columns")
        if np.any(np.diff(self.groups, axis=1) <= 0):
            raise ValueError("group rows must increase strictly with frequency")
        if np.any(self.groups >= self.background_sigma):
            raise ValueError("all group values must stay below the background")

    @property
    def l(self):
        return self.groups.shape[1]


@dataclass(frozen=True)
class Inclusion:
    center: tuple  # (x, y)
    radius: float
    group_index: int


@dataclass
class Phantom:
    """Up to three disjoint circular inclusions with distinct groups; the
    empty phantom is the degenerate reference case used by tests."""

    inclusions: list

    def __post_init__(self):
        if len(self.inclusions) > 3:
            raise ValueError("at most three inclusions")
        groups = [inc.group_index for inc in self.inclusions]
        if len(set(groups)) != len(groups):
            raise ValueError("inclusion groups must be pairwise distinct")

    def validate_geometry(self, geometry):
        R = geometry.radius
        lo, hi = DIAMETER_RANGE
        for inc in self.inclusions:
            if not lo * R <= inc.radius <= hi * R:
                raise ValueError(f"inclusion radius {inc.radius} out of range")
            if np.hypot(*inc.center) + inc.radius > R + 1e-12:
                raise ValueError("inclusion leaves the sensing region")
        for a in range(len(self.inclusions)):
            for b in range(a + 1, len(self.inclusions)):
                pa, pb = self.inclusions[a], self.inclusions[b]
                gap = np.hypot(
                    pa.center[0] - pb.center[0], pa.center[1] - pb.center[1]
                )
                if gap < pa.radius + pb.radius:
                    raise ValueError("inclusions overlap")


@dataclass
class MfSample:
    B: np.ndarray       # (m, l) normalized voltage changes
    X_gt: np.ndarray    # (n, l) normalized conductivity changes
    phantom: Phantom = None


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    grid: fem.PixelGrid
    smat: fem.SensitivityMatrix
    groups: ConductivityGroups
    seed: int

    def split(self, name):
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


def sample_phantom(rng_seed, geometry, proportions=CANONICAL_PROPORTIONS, count=None):
    """Draw a phantom: inclusion count from the configured proportions, group
    indices without replacement, centers uniform over the disc with rejection
    for containment and disjointness."""
    rng = np.random.default_rng(rng_seed)
    if count is None:
        count = int(rng.choice(3, p=np.asarray(proportions) / np.sum(proportions))) + 1
    if not 1 <= count <= 3:
        raise ValueError("inclusion count must be 1..3")
    group_indices = rng.permutation(3)[:count]
    R = geometry.radius
    lo, hi = DIAMETER_RANGE
    placed = []
    attempts = 0
    for g in group_indices:
        radius = rng.uniform(lo, hi) * R
        while True:
            attempts += 1
            if attempts > REJECTION_BUDGET:
                raise NumericalError(
                    f"phantom rejection budget exhausted after {attempts - 1} attempts"
                )
            r = R * np.sqrt(rng.uniform())
            th = rng.uniform(0.0, 2.0 * np.pi)
            cx, cy = r * np.cos(th), r * np.sin(th)
            if r + radius > R:
                continue
            ok = all(
                np.hypot(cx - inc.center[0], cy - inc.center[1])
                >= radius + inc.radius
                for inc in placed
            )
            if ok:
                placed.append(
                    Inclusion(center=(cx, cy), radius=radius, group_index=int(g))
                )
                break
    phantom = Phantom(inclusions=placed)
    phantom.validate_geometry(geometry)
    return phantom


def rasterize_phantom(phantom, grid, groups, freq):
    """Pixel conductivities at one frequency in canonical masked order."""
    if not 0 <= freq < groups.l:
        raise ValueError(f"frequency index {freq} out of range")
    sigma = np.full(grid.n, groups.background_sigma)
    for inc in phantom.inclusions:
        d2 = (grid.centers[:, 0] - inc.center[0]) ** 2 + (
            grid.centers[:, 1] - inc.center[1]
        ) ** 2
        sigma[d2 <= inc.radius**2] = groups.groups[inc.group_index, freq]
    return sigma


def element_conductivities(phantom, mesh, groups, freq):
    """Per-element conductivities on a forward mesh (centroid membership)."""
    centroids = mesh.element_centroids()
    sigma = np.full(mesh.n_elements, groups.background_sigma)
    for inc in phantom.inclusions:
        d2 = (centroids[:, 0] - inc.center[0]) ** 2 + (
            centroids[:, 1] - inc.center[1]
        ) ** 2
        sigma[d2 <= inc.radius**2] = groups.groups[inc.group_index, freq]
    return sigma


def normalize_voltage(v_mea, v_ref):
    v_mea = np.asarray(v_mea, dtype=float)
    v_ref = np.asarray(v_ref, dtype=float)
    if np.any(np.abs(v_ref) == 0.0):
        raise NumericalError("zero reference voltage channel")
    return (v_mea - v_ref) / v_ref


def normalize_conductivity(sigma_mea, sigma_ref):
    if sigma_ref <= 0:
        raise ValueError("reference conductivity must be positive")
    return (np.asarray(sigma_mea, dtype=float) - sigma_ref) / sigma_ref


@dataclass
class DatasetConfig:
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40
    grid_h: int = 32
    grid_w: int = 32
    jacobian_level: int = 2
    background_sigma: float = CANONICAL_BACKGROUND
    n_electrodes: int = 16
    electrode_coverage: float = 1.0 / 32.0
    proportions: tuple = CANONICAL_PROPORTIONS
    normalization: str = "td"
    threads: int = 1

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be nonnegative")
        if self.normalization not in ("td", "fd"):
            raise ValueError("normalization must be 'td' or 'fd'")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["proportions"] = list(self.proportions)
        return d


@dataclass
class SimContext:
    """Everything needed to turn a phantom into an MfSample: the Jacobian on
    the coarse mesh, and a one-level-finer forward mesh for the data."""

    geometry: fem.SensorGeometry
    protocol: fem.StimProtocol
    jac_mesh: fem.TriMesh
    fwd_mesh: fem.TriMesh
    grid: fem.PixelGrid
    smat: fem.SensitivityMatrix
    v_ref_fwd: np.ndarray
    groups: ConductivityGroups
    normalization: str = "td"


def build_sim_context(config, groups=None):
    geometry = fem.SensorGeometry(
        n_electrodes=config.n_electrodes,
        electrode_coverage=config.electrode_coverage,
    )
    protocol = fem.adjacent_protocol(config.n_electrodes)
    jac_mesh = fem.build_disc_mesh(geometry, config.jacobian_level)
    fwd_mesh = fem.build_disc_mesh(geometry, config.jacobian_level + 1)
    grid = fem.build_pixel_grid(config.grid_h, config.grid_w)
    smat = fem.sensitivity_matrix(
        jac_mesh, config.background_sigma, protocol, grid
    )
    sigma0 = np.full(fwd_mesh.n_elements, config.background_sigma)
    v_ref_fwd = fem.forward_frame(fwd_mesh, sigma0, protocol)
    if groups is None:
        groups = ConductivityGroups(background_sigma=config.background_sigma)
    return SimContext(
        geometry=geometry,
        protocol=protocol,
        jac_mesh=jac_mesh,
        fwd_mesh=fwd_mesh,
        grid=grid,
        smat=smat,
        v_ref_fwd=v_ref_fwd,
        groups=groups,
        normalization=config.normalization,
    )


def simulate_sample(phantom, ctx):
    """Forward-simulate one phantom at every frequency and normalize.

    Time-difference convention: each column is referenced against the
    homogeneous frame at the same frequency.  The frequency-difference mode
    references columns against the measured first-frequency frame instead
    (exposed for completeness, not used by canonical configs).
    """
    groups = ctx.groups
    l = groups.l
    m = ctx.protocol.m
    frames = np.empty((m, l))
    for f in range(l):
        sigma = element_conductivities(phantom, ctx.fwd_mesh, groups, f)
        frames[:, f] = fem.forward_frame(ctx.fwd_mesh, sigma, ctx.protocol)
    if ctx.normalization == "td":
        B = normalize_voltage(frames, ctx.v_ref_fwd[:, None])
    else:
        B = normalize_voltage(frames, frames[:, :1])
    X_gt = np.empty((ctx.grid.n, l))
    for f in range(l):
        X_gt[:, f] = normalize_conductivity(
            rasterize_phantom(phantom, ctx.grid, groups, f),
            groups.background_sigma,
        )
    return MfSample(B=B, X_gt=X_gt, phantom=phantom)


def generate_dataset(config, seed, ctx=None):
    """Generate the train/val/test splits with per-sample hashed seeds so the
    result is independent of generation order."""
    if ctx is None:
        ctx = build_sim_context(config)
    total = config.n_train + config.n_val + config.n_test

    def make(index):
        phantom = sample_phantom(
            hash_seed(seed, index), ctx.geometry, config.proportions
        )
        return simulate_sample(phantom, ctx)

    threads = max(1, int(config.threads))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(make, range(total)))
    else:
        samples = [make(i) for i in range(total)]
    return Dataset(
        train=samples[: config.n_train],
        val=samples[config.n_train : config.n_train + config.n_val],
        test=samples[config.n_train + config.n_val :],
        grid=ctx.grid,
        smat=ctx.smat,
        groups=ctx.groups,
        seed=seed,
    )


def write_dataset(path, ds, manifest=None):
    """Container layout (little-endian): magic, u32 header, mask bytes, the
    sensitivity entries, the group table, then per-sample B and X blocks in
    frequency-major float32 order, closed by a u64 FNV-1a checksum."""
    m, n = ds.smat.entries.shape
    l = ds.groups.l
    grid = ds.grid
    blob = bytearray()
    blob += CONTAINER_MAGIC
    blob += struct.pack(
        "<9I",
        CONTAINER_VERSION,
        m,
        n,
        l,
        grid.H,
        grid.W,
        len(ds.train),
        len(ds.val),
        len(ds.test),
    )
    blob += grid.mask.astype(np.uint8).tobytes()
    blob += ds.smat.entries.astype("<f4").tobytes()
    blob += ds.groups.groups.astype("<f4").tobytes()
    blob += struct.pack("<f", ds.groups.background_sigma)
    for sample in (*ds.train, *ds.val, *ds.test):
        if sample.B.shape != (m, l) or sample.X_gt.shape != (n, l):
            raise ValueError("sample shapes disagree with the container header")
        blob += np.ascontiguousarray(sample.B.T).astype("<f4").tobytes()
        blob += np.ascontiguousarray(sample.X_gt.T).astype("<f4").tobytes()
    blob += struct.pack("<Q", fnv1a64(blob))
    with open(path, "wb") as fh:
        fh.write(blob)
    if manifest is not None:
        with open(str(path) + ".json", "w", encoding="ascii") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CONTAINER_MAGIC:
        raise DataFormatError(f"{path}: bad container magic", offset=0)
    if len(raw) < 8 + 36 + 8:
        raise DataFormatError(f"{path}: truncated header", offset=len(raw))
    stored = struct.unpack("<Q", raw[-8:])[0]
    actual = fnv1a64(raw[:-8])
    if stored != actual:
        raise DataFormatError(
            f"{path}: checksum mismatch ({stored:#x} != {actual:#x})",
            offset=len(raw) - 8,
        )
    version, m, n, l, H, W, n_train, n_val, n_test = struct.unpack_from(
        "<9I", raw, 8
    )
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}", offset=8)
    pos = 8 + 36
    need = H * W
    mask = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos)
    mask = mask.reshape(H, W).astype(bool)
    pos += need
    if int(mask.sum()) != n:
        raise DataFormatError(f"{path}: mask count != n", offset=pos)
    entries = np.frombuffer(raw, dtype="<f4", count=m * n, offset=pos).reshape(m, n)
    pos += 4 * m * n
    table = np.frombuffer(raw, dtype="<f4", count=3 * l, offset=pos).reshape(3, l)
    pos += 12 * l
    background = struct.unpack_from("<f", raw, pos)[0]
    pos += 4
    groups = ConductivityGroups(
        groups=table.astype(float),
        background_sigma=float(np.float32(background)),
        frequencies=tuple(f"f{i + 1}" for i in range(l)),
    )
    total = n_train + n_val + n_test
    sample_bytes = 4 * l * (m + n)
    if len(raw) != pos + total * sample_bytes + 8:
        raise DataFormatError(
            f"{path}: payload size mismatch for {total} samples", offset=pos
        )
    samples = []
    for _ in range(total):
        B = np.frombuffer(raw, dtype="<f4", count=m * l, offset=pos)
        pos += 4 * m * l
        X = np.frombuffer(raw, dtype="<f4", count=n * l, offset=pos)
        pos += 4 * n * l
        samples.append(
            MfSample(
                B=B.reshape(l, m).T.copy(),
                X_gt=X.reshape(l, n).T.copy(),
                phantom=None,
            )
        )
    grid = fem._grid_from_mask(mask)
    smat = fem.SensitivityMatrix(
        entries=entries.astype(float),
        grid=grid,
        background_sigma=groups.background_sigma,
        v_ref=np.array([]),
        element_pixel=np.array([], dtype=np.int64),
    )
    return Dataset(
        train=samples[:n_train],
        val=samples[n_train : n_train + n_val],
        test=samples[n_train + n_val :],
        grid=grid,
        smat=smat,
        groups=groups,
        seed=-1,
    )
