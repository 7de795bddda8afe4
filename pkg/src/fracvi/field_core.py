"""Periodic-grid discretization and grid fields.

A problem lives on a uniform periodic box [-L, L)^dim sampled with n
(a power of two) points per axis.  All quadrature is the rectangle rule,
which is the rule consistent with the discrete Fourier representation used
by the nonlocal operators; every norm and every two-sided estimate check
in the package uses the same rule.  Sums over nodes are numpy sums, i.e.
pairwise/tree reductions with a fixed order, so results do not depend on
any parallel schedule.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

HEADER_MAGIC = b"FVIF"
HEADER_VERSION = 1
# magic(4) + version u32 + dim u32 + n u32 + L f64 + 8 reserved = 32 bytes
_HEADER_STRUCT = struct.Struct("<4sIIId8x")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic box [-L, L)^dim with n nodes per axis.

    Node j on each axis sits at x_j = -L + j*h with h = 2L/n.  The
    frequency slot k on each axis carries the wavenumber xi_k = k/(2L)
    for k in the signed range (-n/2, n/2]; note the Nyquist slot is
    assigned the positive sign.
    """

    dim: int
    n: int
    half_length: float

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValidationError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 16 or (self.n & (self.n - 1)) != 0:
            raise ValidationError(f"n must be a power of two >= 16, got {self.n}")
        if not self.half_length > 0:
            raise ValidationError(f"half_length must be positive, got {self.half_length}")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_length / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def num_nodes(self) -> int:
        return self.n ** self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    def axis(self) -> np.ndarray:
        """Physical coordinates along one axis."""
        return -self.half_length + self.spacing * np.arange(self.n)

    def coords(self) -> tuple[np.ndarray, ...]:
        """Coordinate meshes, one array of shape `shape` per dimension."""
        ax = self.axis()
        if self.dim == 1:
            return (ax,)
        return tuple(np.meshgrid(ax, ax, indexing="ij"))

    def wavenumber_axis(self) -> np.ndarray:
        """Wavenumbers xi_k = k/(2L), with +n/2 (not -n/2) at the Nyquist slot."""
        xi = np.fft.fftfreq(self.n, d=self.spacing)
        xi[self.n // 2] = -xi[self.n // 2]
        return xi

    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Full-spectrum wavenumber meshes (complex-FFT layout)."""
        xi = self.wavenumber_axis()
        if self.dim == 1:
            return (xi,)
        return tuple(np.meshgrid(xi, xi, indexing="ij"))


def make_grid(dim: int, n: int, half_length: float) -> Grid:
    return Grid(dim=dim, n=int(n), half_length=float(half_length))


@dataclass(frozen=True)
class DomainMask:
    """Indicator of the open domain, strictly inside the periodic box.

    `boundary_distance` is the distance to the domain boundary, positive
    inside, negative outside; it is analytic for the built-in shapes and
    is used to build smooth windows supported in the domain.
    """

    grid: Grid
    indicator: np.ndarray
    margin: float
    boundary_distance: np.ndarray
    description: str = "custom"

    def __post_init__(self):
        if self.indicator.shape != self.grid.shape:
            raise ValidationError("mask shape does not match grid")
        if not self.indicator.any():
            raise ValidationError("domain mask is empty")

    @property
    def measure(self) -> float:
        return float(self.indicator.sum()) * self.grid.cell_volume

    def complement(self) -> np.ndarray:
        return ~self.indicator


def _check_margin(grid: Grid, extent: float, min_margin: float, what: str) -> float:
    margin = (grid.half_length - extent) / grid.half_length
    if margin < min_margin:
        raise ValidationError(
            f"{what} leaves margin {margin:.3f}L to the box boundary; "
            f"need at least {min_margin}L (enlarge half_length)"
        )
    return margin


def interval_mask(grid: Grid, half_width: float, min_margin: float = 0.25) -> DomainMask:
    """1D domain (-a, a)."""
    if grid.dim != 1:
        raise ValidationError("interval domain requires a 1D grid")
    margin = _check_margin(grid, half_width, min_margin, f"interval({half_width})")
    (x,) = grid.coords()
    dist = half_width - np.abs(x)
    return DomainMask(grid, dist > 0, margin, dist, f"interval({half_width})")


def disk_mask(grid: Grid, radius: float, min_margin: float = 0.25) -> DomainMask:
    """2D disk of given radius centered at the origin."""
    if grid.dim != 2:
        raise ValidationError("disk domain requires a 2D grid")
    margin = _check_margin(grid, radius, min_margin, f"disk({radius})")
    X, Y = grid.coords()
    dist = radius - np.hypot(X, Y)
    return DomainMask(grid, dist > 0, margin, dist, f"disk({radius})")


def square_mask(grid: Grid, half_width: float, min_margin: float = 0.25) -> DomainMask:
    """2D square (-a, a)^2."""
    if grid.dim != 2:
        raise ValidationError("square domain requires a 2D grid")
    margin = _check_margin(grid, half_width, min_margin, f"square({half_width})")
    X, Y = grid.coords()
    dist = half_width - np.maximum(np.abs(X), np.abs(Y))
    return DomainMask(grid, dist > 0, margin, dist, f"square({half_width})")


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValidationError("field shape does not match grid")

    def copy(self) -> "ScalarField":
        return ScalarField(self.grid, self.values.copy())


@dataclass
class VectorField:
    grid: Grid
    components: np.ndarray  # shape (dim, *grid.shape)

    def __post_init__(self):
        self.components = np.asarray(self.components, dtype=np.float64)
        if self.components.shape != (self.grid.dim,) + self.grid.shape:
            raise ValidationError("vector field shape does not match grid")

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.components.copy())

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.components ** 2, axis=0))


def zeros(grid: Grid) -> ScalarField:
    return ScalarField(grid, np.zeros(grid.shape))


def vector_zeros(grid: Grid) -> VectorField:
    return VectorField(grid, np.zeros((grid.dim,) + grid.shape))


def masked(f: ScalarField, mask: DomainMask) -> ScalarField:
    """Field set exactly to zero off the domain."""
    return ScalarField(f.grid, np.where(mask.indicator, f.values, 0.0))


def is_supported_in(f: ScalarField, mask: DomainMask) -> bool:
    return bool(np.all(f.values[mask.complement()] == 0.0))


@dataclass(frozen=True)
class NormSuite:
    l1: float
    l2: float
    linf: float
    h_sigma: float


def integrate(f: ScalarField) -> float:
    """Rectangle-rule integral: sum of values times cell volume."""
    return float(f.values.sum()) * f.grid.cell_volume


def lp_norm(values: np.ndarray, p: float, cell_volume: float) -> float:
    if np.isinf(p):
        return float(np.max(np.abs(values)))
    return float((np.sum(np.abs(values) ** p) * cell_volume) ** (1.0 / p))


def norms(f: ScalarField, sigma: float) -> NormSuite:
    """L1/L2/Linf by quadrature plus the Hilbertian seminorm ||D^sigma f||_L2."""
    from . import riesz_ops  # local import: riesz_ops builds on this module

    w = f.grid.cell_volume
    df = riesz_ops.frac_gradient(f, sigma)
    return NormSuite(
        l1=lp_norm(f.values, 1.0, w),
        l2=lp_norm(f.values, 2.0, w),
        linf=lp_norm(f.values, np.inf, w),
        h_sigma=float(np.sqrt(np.sum(df.components ** 2) * w)),
    )


def h_sigma_norm(f: ScalarField, sigma: float) -> float:
    from . import riesz_ops

    df = riesz_ops.frac_gradient(f, sigma)
    return float(np.sqrt(np.sum(df.components ** 2) * f.grid.cell_volume))


# ---------------------------------------------------------------------------
# smooth windows and random fields

def smooth_window(mask: DomainMask, ramp_width: float = 0.2) -> np.ndarray:
    """C^1 window equal to 1 deep inside the domain and exactly 0 outside.

    `ramp_width` is the ramp length as a fraction of the maximal interior
    distance, so the window is insensitive to the absolute domain size.
    """
    d = mask.boundary_distance
    w = ramp_width * float(d.max())
    s = np.clip(d / w, 0.0, 1.0)
    win = 0.5 * (1.0 - np.cos(np.pi * s))
    return np.where(mask.indicator, win, 0.0)


def random_smooth_field(grid: Grid, rng: np.random.Generator,
                        mask: DomainMask | None = None,
                        cutoff: float = 0.05,
                        ramp_width: float = 0.2) -> ScalarField:
    """Band-limited random field, optionally windowed to vanish off the domain.

    Fourier coefficients get a Gaussian decay exp(-(|xi|/xi_c)^2) with
    xi_c = cutoff * xi_max, which keeps the field smooth on the grid scale.
    """
    white = rng.standard_normal(grid.shape)
    spec = np.fft.fftn(white)
    xim = grid.wavenumbers()
    absxi = np.sqrt(sum(x ** 2 for x in xim))
    xi_c = cutoff * float(absxi.max())
    spec *= np.exp(-((absxi / xi_c) ** 2))
    f = np.fft.ifftn(spec).real
    f /= max(np.max(np.abs(f)), 1e-300)
    if mask is not None:
        f = f * smooth_window(mask, ramp_width)
    return ScalarField(grid, f)


def gaussian_bump(grid: Grid, center, width: float, amplitude: float = 1.0) -> ScalarField:
    pts = grid.coords()
    center = np.atleast_1d(np.asarray(center, dtype=float))
    r2 = sum((x - c) ** 2 for x, c in zip(pts, center))
    return ScalarField(grid, amplitude * np.exp(-r2 / width ** 2))


def raised_cosine(grid: Grid, radius: float, amplitude: float = 1.0) -> ScalarField:
    """C^1 compactly supported bump: a^2 cos^2(pi r / (2 R)) inside r < R."""
    pts = grid.coords()
    r = np.sqrt(sum(x ** 2 for x in pts))
    vals = np.where(r < radius, amplitude * np.cos(np.pi * r / (2 * radius)) ** 2, 0.0)
    return ScalarField(grid, vals)


# ---------------------------------------------------------------------------
# serialization

def write_field(path, f: ScalarField) -> None:
    """Flat binary: 32-byte header then float64 LE values in row-major order."""
    header = _HEADER_STRUCT.pack(HEADER_MAGIC, HEADER_VERSION, f.grid.dim,
                                 f.grid.n, f.grid.half_length)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.values.astype("<f8").tobytes(order="C"))


def read_field(path) -> ScalarField:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER_STRUCT.size)
        if len(header) != _HEADER_STRUCT.size:
            raise ValidationError(f"{path}: truncated header")
        magic, version, dim, n, half_length = _HEADER_STRUCT.unpack(header)
        if magic != HEADER_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != HEADER_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        grid = Grid(dim=dim, n=n, half_length=half_length)
        data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != grid.num_nodes:
            raise ValidationError(f"{path}: expected {grid.num_nodes} values, got {data.size}")
    return ScalarField(grid, data.reshape(grid.shape).copy())


def write_csv(path, f: ScalarField) -> None:
    """One node per line: coordinates then value, 17 significant digits."""
    pts = f.grid.coords()
    cols = [p.ravel() for p in pts] + [f.values.ravel()]
    with open(path, "w") as fh:
        fh.write(",".join(["x", "y"][: f.grid.dim] + ["value"]) + "\n")
        for row in zip(*cols):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
