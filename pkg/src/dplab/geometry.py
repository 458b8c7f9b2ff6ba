"""Periodic-strip domain with a two-component boundary and product measures.

The computational domain is the strip ``(0, width)_periodic x (0, height)``
whose boundary consists of the two horizontal lines ``y = 0`` and
``y = height``.  A field is a plain ``(nx, ny)`` float array; the rows
``j = 0`` and ``j = ny-1`` simultaneously carry the boundary-trace values,
so trace compatibility holds by construction (single storage).

Quadrature is uniform in the periodic direction and trapezoidal across the
strip; each boundary node additionally carries the one-dimensional surface
weight ``hx``, so the discrete pairing is the sum of a bulk and a surface
inner product.
"""

from __future__ import annotations

import numpy as np

__all__ = ["StripGrid", "save_field", "load_field", "field_for_grid"]


class StripGrid:
    """Uniform grid on the periodic strip; owns all measures and pairings."""

    def __init__(self, nx: int, ny: int, width: float = 1.0, height: float = 1.0):
        if nx < 4:
            raise ValueError("nx must be at least 4")
        if ny < 3:
            raise ValueError("ny must be at least 3")
        if width <= 0 or height <= 0:
            raise ValueError("width and height must be positive")
        self.nx = int(nx)
        self.ny = int(ny)
        self.width = float(width)
        self.height = float(height)
        self.hx = self.width / self.nx
        self.hy = self.height / (self.ny - 1)
        self.x = self.hx * np.arange(self.nx)
        self.y = self.hy * np.arange(self.ny)

        # trapezoid weights across the strip; boundary rows carry hy/2
        cy = np.ones(self.ny)
        cy[0] = cy[-1] = 0.5
        self.bulk_weights = np.tile(self.hx * self.hy * cy, (self.nx, 1))
        self.surface_weights = np.zeros((self.nx, self.ny))
        self.surface_weights[:, 0] = self.hx
        self.surface_weights[:, -1] = self.hx
        self.mass = self.bulk_weights + self.surface_weights

        self.area = self.width * self.height          # |bulk|
        self.perimeter = 2.0 * self.width             # |boundary|
        self.total_measure = self.area + self.perimeter

    # -- fields --------------------------------------------------------------

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def size(self):
        return self.nx * self.ny

    def zeros(self):
        return np.zeros(self.shape)

    def constant(self, c):
        return np.full(self.shape, float(c))

    def meshes(self):
        """(X, Y) coordinate arrays of shape (nx, ny)."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def check_field(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != self.shape:
            raise ValueError(f"field shape {z.shape} does not match grid {self.shape}")
        return z

    # -- measures and pairings -------------------------------------------------

    def mean(self, z) -> float:
        """Combined average (bulk integral + surface integral) / total measure."""
        z = self.check_field(z)
        return float((self.mass * z).sum() / self.total_measure)

    def project(self, z):
        """Shift onto the zero-mean subspace: z - mean(z)."""
        z = self.check_field(z)
        return z - self.mean(z)

    def inner_h(self, z1, z2) -> float:
        """Bulk plus surface L2 pairing (exactly symmetric in its arguments)."""
        z1 = self.check_field(z1)
        z2 = self.check_field(z2)
        return float((self.mass * (z1 * z2)).sum())

    def norm_h(self, z) -> float:
        return float(np.sqrt(max(self.inner_h(z, z), 0.0)))

    def integrate_bulk(self, z) -> float:
        z = self.check_field(z)
        return float((self.bulk_weights * z).sum())

    def integrate_surface(self, z) -> float:
        """Surface integral of the trace rows of z."""
        z = self.check_field(z)
        return float(self.hx * (z[:, 0].sum() + z[:, -1].sum()))

    def l1_potential(self, graph, lam, u):
        """(bulk, surface) L1 norms of the regularized potential of u.

        For lam > 0 this integrates the Moreau envelope; for lam = 0 the
        bare potential (the envelope's limit) is used.
        """
        u = self.check_field(u)
        env = graph.moreau_envelope(lam, u) if lam > 0 else graph.potential(u)
        return self.integrate_bulk(env), self.integrate_surface(env)


# ---------------------------------------------------------------------------
# CSV serialization: one header line "nx,ny,hx,hy", one values line, then the
# field row-major (one line per x-index).
# ---------------------------------------------------------------------------


def save_field(path, grid: StripGrid, z) -> None:
    z = grid.check_field(z)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("nx,ny,hx,hy\n")
        fh.write(f"{grid.nx},{grid.ny},{grid.hx!r},{grid.hy!r}\n")
        for i in range(grid.nx):
            fh.write(",".join(repr(float(v)) for v in z[i]) + "\n")


def load_field(path):
    """Read a field CSV; returns (nx, ny, hx, hy, values)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "nx,ny,hx,hy":
            raise ValueError(f"{path}: expected header 'nx,ny,hx,hy', got '{header}'")
        dims = fh.readline().strip().split(",")
        if len(dims) != 4:
            raise ValueError(f"{path}: malformed dimensions line")
        nx, ny = int(dims[0]), int(dims[1])
        hx, hy = float(dims[2]), float(dims[3])
        rows = []
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    values = np.asarray(rows, dtype=float)
    if values.shape != (nx, ny):
        raise ValueError(f"{path}: expected {nx}x{ny} values, got {values.shape}")
    return nx, ny, hx, hy, values


def field_for_grid(grid: StripGrid, path):
    """Load a field and require it to match the grid."""
    nx, ny, hx, hy, values = load_field(path)
    if (nx, ny) != grid.shape:
        raise ValueError(
            f"{path}: field is {nx}x{ny} but the grid is {grid.nx}x{grid.ny}")
    if not (np.isclose(hx, grid.hx) and np.isclose(hy, grid.hy)):
        raise ValueError(f"{path}: spacings {hx},{hy} do not match the grid")
    return values
