"""Two-phase coefficient fields, weight fields and problem data.

Fields are piecewise constant per fine cell.  The grid file format is a
plain ASCII layout: first line ``nx ny``, then ny rows of nx space-separated
values, the y=0 row first.  Binary masks use 0/1 tokens, real-valued fields
use decimal floats.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Cellwise scalar conductivity taking exactly two values."""

    values: np.ndarray        # (n_cells,) in {kappa_m, kappa_I}
    kappa_m: float
    kappa_I: float
    phase_mask: np.ndarray    # (n_cells,) uint8, 1 = inclusion

    @property
    def contrast(self):
        return self.kappa_I / self.kappa_m

    def __post_init__(self):
        if not (0.0 < self.kappa_m <= self.kappa_I):
            raise ValueError("phase values must satisfy 0 < kappa_m <= kappa_I")


@dataclass(frozen=True, eq=False)
class ProblemData:
    """Source, Dirichlet lift, boundary flux and Robin coefficient.

    f is cellwise, g_tilde nodal on the whole domain, q and b per boundary
    fine edge.  For Robin problems b must be nonnegative with a recorded
    positive-measure sub-segment where it is bounded below by b0 > 0.
    """

    f: np.ndarray             # (n_cells,)
    g_tilde: np.ndarray       # (n_nodes,)
    q: np.ndarray             # (n_bedges,)
    b: np.ndarray = None      # (n_bedges,) Robin coefficient, or None
    b0: float = None
    b_support: np.ndarray = None  # edge ids where b >= b0

    def __post_init__(self):
        if self.b is not None:
            if np.any(self.b < 0.0):
                raise ValueError("Robin coefficient must be nonnegative")
            pos = np.flatnonzero(self.b > 0.0)
            if pos.size == 0:
                raise ValueError("Robin coefficient must be positive on a sub-segment")
            object.__setattr__(self, "b0", float(self.b[pos].min()))
            object.__setattr__(self, "b_support", pos)


def _mask_to_field(mask, kappa_m, kappa_I):
    mask = np.ascontiguousarray(mask, dtype=np.uint8).ravel()
    values = np.where(mask == 1, float(kappa_I), float(kappa_m))
    return CoefficientField(values=values, kappa_m=float(kappa_m),
                            kappa_I=float(kappa_I), phase_mask=mask)


def read_grid_file(path, dtype=float):
    """Read a grid file, returning an (ny, nx) array (row y=0 first)."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: first line must be 'nx ny'")
        nx, ny = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=dtype, ndmin=2)
    if data.shape != (ny, nx):
        raise ValueError(f"{path}: expected {ny} rows of {nx} values, got {data.shape}")
    return data


def write_grid_file(path, grid, fmt="%.17g"):
    """Write an (ny, nx) array in the grid file layout."""
    grid = np.atleast_2d(grid)
    ny, nx = grid.shape
    with open(path, "w") as fh:
        fh.write(f"{nx} {ny}\n")
        np.savetxt(fh, grid, fmt=fmt)


def load_field(path, geom, kappa_m, kappa_I):
    """Load a binary inclusion mask and map it to a two-phase field."""
    grid = read_grid_file(path, dtype=float)
    n = geom.n_fine
    if grid.shape != (n, n):
        raise ValueError(
            f"{path}: mask is {grid.shape[1]}x{grid.shape[0]}, fine mesh is {n}x{n}")
    if not np.isin(grid, (0.0, 1.0)).all():
        raise ValueError(f"{path}: mask entries must be 0 or 1")
    return _mask_to_field(grid, kappa_m, kappa_I)


def uniform_field(geom, kappa=1.0):
    mask = np.zeros(geom.n_cells, dtype=np.uint8)
    return _mask_to_field(mask, kappa, kappa)


def _draw_strip(rng, n, touch_boundary):
    """Pick a 1-cell-wide strip; returns (orientation, position, start, length)."""
    horizontal = bool(rng.integers(0, 2))
    length = int(rng.integers(n // 2, max(n // 2 + 1, n - 1)))
    if touch_boundary:
        pos = int(rng.integers(0, n))
        start = 0 if rng.integers(0, 2) else n - length
    else:
        pos = int(rng.integers(1, n - 1))
        start = int(rng.integers(1, max(2, n - length - 1)))
    return horizontal, pos, start, length


def synth_mask(n, style, density, seed):
    """Deterministic synthetic inclusion mask on an n x n cell grid.

    Styles: 'inclusions' (interior rectangular blobs), 'channels' (thin
    strips kept off the boundary), 'boundary-channels' (alias
    'boundary-touching channels': at least one strip reaches the domain
    boundary).  Generation stops as soon as the inclusion fraction reaches
    ``density``, trimming the last piece so the overshoot stays small.
    """
    if not (0.0 <= density < 1.0):
        raise ValueError(f"density must be in [0, 1), got {density}")
    style = style.strip().lower().replace(" ", "-")
    if style == "boundary-touching-channels":
        style = "boundary-channels"
    if style not in ("inclusions", "channels", "boundary-channels"):
        raise ValueError(f"unknown medium style {style!r}")

    mask2d = np.zeros((n, n), dtype=np.uint8)
    if density == 0.0:
        return mask2d

    rng = np.random.default_rng(seed)
    target = int(np.ceil(density * n * n))
    guard = 0
    first = True
    while mask2d.sum() < target:
        guard += 1
        if guard > 100000:
            raise RuntimeError("medium generation failed to reach target density")
        remaining = target - int(mask2d.sum())
        if style == "inclusions":
            w = int(rng.integers(1, max(2, n // 8) + 1))
            hgt = int(rng.integers(1, max(2, n // 8) + 1))
            x = int(rng.integers(1, max(2, n - w - 1)))
            y = int(rng.integers(1, max(2, n - hgt - 1)))
            patch = mask2d[y:y + hgt, x:x + w]
            add = int(w * hgt - patch.sum())
            if add > remaining and hgt > 1:
                hgt = max(1, remaining // max(1, w))
                patch = mask2d[y:y + hgt, x:x + w]
            patch[...] = 1
        else:
            touch = style == "boundary-channels" and (first or bool(rng.integers(0, 4) == 0))
            horizontal, pos, start, length = _draw_strip(rng, n, touch)
            if length > remaining and not first:
                length = max(1, remaining)
            if horizontal:
                mask2d[pos, start:start + length] = 1
            else:
                mask2d[start:start + length, pos] = 1
        first = False

    if style == "boundary-channels":
        border = np.concatenate([mask2d[0], mask2d[-1], mask2d[:, 0], mask2d[:, -1]])
        if border.sum() == 0:
            raise RuntimeError("boundary-channel medium has no boundary contact")
    return mask2d


def synth_channels(geom, style, density, seed, kappa_m=1.0, kappa_I=1e4):
    """Synthetic two-phase field on the fine mesh; see `synth_mask`."""
    mask2d = synth_mask(geom.n_fine, style, density, seed)
    return _mask_to_field(mask2d, kappa_m, kappa_I)


def dump_nodal(path, geom, v):
    """Write a fine nodal vector as a real-valued grid file."""
    npa = geom.n_fine + 1
    write_grid_file(path, np.asarray(v).reshape(npa, npa))


def derive_kappa_tilde(field, geom, convention="scaled-24"):
    """Cellwise weight field for the penalty mass form.

    'scaled-24' is the experiment convention 24*kappa/H^2; 'lagrange-sum'
    evaluates (Nv-1) * kappa * sum_j |grad eta_j|^2 at fine cell centers,
    eta_j being the bilinear Lagrange bases of the owning coarse element.
    Both dominate the gradient energy of any coarse partition function.
    """
    H = geom.H
    if convention == "scaled-24":
        return 24.0 * field.values / (H * H)
    if convention == "lagrange-sum":
        n = geom.n_fine
        r = geom.refine
        cell = np.arange(geom.n_cells)
        fx = cell % n
        fy = cell // n
        # local coordinates of the cell center inside its coarse element
        xi = ((fx % r) + 0.5) / r
        et = ((fy % r) + 0.5) / r
        grad_sq = 2.0 * ((1 - xi) ** 2 + xi ** 2 + (1 - et) ** 2 + et ** 2) / (H * H)
        return 3.0 * field.values * grad_sq
    raise ValueError(f"unknown kappa-tilde convention {convention!r}")
