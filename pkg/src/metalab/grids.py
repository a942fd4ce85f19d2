"""Cartesian and polar grids with quadrature, gradients and exact C3 action.

Grid vectors use a half-density convention: a function u is stored as
phi = u * sqrt(node quadrature weight), so the L2 inner product is the plain
dot product on every grid kind and symmetric operators stay symmetric
matrices.  On polar grids the potential and all rotation-equivariant fields
are evaluated on the first 120-degree sector and tiled, so the discrete
rotation is an exact index permutation and equivariant assembly is exact to
the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

BOUNDARY_MASS_TOL = 1e-14


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid2D:
    """Tensor grid, cartesian ([-L, L]^2, n x n) or polar (N_r x N_theta).

    Attributes
    ----------
    kind : 'cartesian' | 'polar'
    points : (n, 2) node coordinates
    weights : (n,) quadrature weights (cell areas)
    f : (n,) potential values (exactly C3-periodic on polar grids)
    gibbs : (n,) half-density Gibbs vector sqrt(w) * exp(-(f - f_ref)/h)
    """

    kind: str
    shape: tuple
    extent: float
    h: float
    points: np.ndarray
    weights: np.ndarray
    f: np.ndarray
    f_ref: float
    surface: object = field(repr=False)
    spacing: tuple = ()

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def sqrtw(self):
        return np.sqrt(self.weights)

    @property
    def gibbs(self):
        """Half-density Gibbs vector, the exact kernel element of d_f."""
        return self.sqrtw * np.exp(-(self.f - self.f_ref) / self.h)

    def to_function(self, phi):
        """Convert a half-density vector back to node values of the function."""
        return np.asarray(phi) / self.sqrtw

    def to_halfdensity(self, u):
        return np.asarray(u) * self.sqrtw

    def inner(self, phi, psi):
        """L2 inner product (plain dot in the half-density convention)."""
        return np.vdot(phi, psi)

    def norm(self, phi):
        return np.linalg.norm(phi)

    # -- polar-only helpers -------------------------------------------------
    def rotation_permutation(self):
        """Index permutation perm with (u o Rot)[i] = u[perm[i]].

        Rot is the rotation by +2pi/3; on functions (R u)(x) = u(Rot x).
        Polar grids only.
        """
        if self.kind != "polar":
            raise GridError("exact rotation permutation exists only on polar grids")
        nr, nt = self.shape
        s = nt // 3
        idx = np.arange(nr * nt).reshape(nr, nt)
        return np.roll(idx, -s, axis=1).ravel()

    def rotate_field(self, u):
        """Apply the exact 2pi/3 rotation to a grid field (polar only)."""
        return np.asarray(u)[self.rotation_permutation()]

    def gradient_matrices(self):
        """Sparse (D1, D2): centered-difference cartesian partials.

        On polar grids these are built from d/dr and d/dtheta and rotated to
        cartesian components; one-sided at radial boundaries, periodic in
        theta.  Act on node values (not half-densities).
        """
        if self.kind == "cartesian":
            n = self.shape[0]
            d = self.spacing[0]
            D = _centered_1d(n, d)
            I = sp.identity(n, format="csr")
            return sp.kron(D, I).tocsr(), sp.kron(I, D).tocsr()
        nr, nt = self.shape
        dr, dt = self.spacing
        Dr = _centered_1d(nr, dr)
        Dt = _periodic_centered_1d(nt, dt)
        Ir = sp.identity(nr, format="csr")
        It = sp.identity(nt, format="csr")
        Dr2 = sp.kron(Dr, It).tocsr()
        Dt2 = sp.kron(Ir, Dt).tocsr()
        r = self.points[:, 0] * 0.0
        r = np.linalg.norm(self.points, axis=1)
        theta = np.arctan2(self.points[:, 1], self.points[:, 0])
        ct, st = np.cos(theta), np.sin(theta)
        Rinv = sp.diags(1.0 / r)
        D1 = sp.diags(ct) @ Dr2 - sp.diags(st) @ (Rinv @ Dt2)
        D2 = sp.diags(st) @ Dr2 + sp.diags(ct) @ (Rinv @ Dt2)
        return D1.tocsr(), D2.tocsr()

    def gradient(self, u):
        """Cartesian gradient of node values, shape (n, 2)."""
        D1, D2 = self.gradient_matrices()
        u = np.asarray(u)
        return np.stack([D1 @ u, D2 @ u], axis=-1)


def _centered_1d(n, d):
    D = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        D[i, i - 1] = -0.5 / d
        D[i, i + 1] = 0.5 / d
    # second-order one-sided at the ends
    D[0, 0], D[0, 1], D[0, 2] = -1.5 / d, 2.0 / d, -0.5 / d
    D[n - 1, n - 1], D[n - 1, n - 2], D[n - 1, n - 3] = 1.5 / d, -2.0 / d, 0.5 / d
    return D.tocsr()


def _periodic_centered_1d(n, d):
    D = sp.lil_matrix((n, n))
    for i in range(n):
        D[i, (i - 1) % n] = -0.5 / d
        D[i, (i + 1) % n] = 0.5 / d
    return D.tocsr()


def build_grid(kind, extent, resolution, surface, h, f_ref=None, check_boundary=True):
    """Construct a validated Grid2D for (surface, h).

    kind='cartesian': extent = half-width L, resolution = n (n x n nodes).
    kind='polar': extent = outer radius, resolution = (N_r, N_theta) with
    3 | N_theta; nodes at r_a = (a + 1/2) dr (no node at the origin).

    The Dirichlet truncation must be spectrally negligible: the Gibbs density
    on the boundary ring may not exceed BOUNDARY_MASS_TOL times its maximum.
    f_ref (default min f on the grid) only rescales the stored Gibbs vector
    to avoid overflow; it cancels in every normalized quantity.
    """
    if h <= 0:
        raise GridError("temperature h must be positive")
    if kind == "cartesian":
        n = int(resolution)
        if n < 48:
            raise GridError("resolution must be >= 48 per axis")
        L = float(extent)
        R_surf = getattr(surface, "R", 0.0)
        if L < R_surf:
            raise GridError(f"extent {L} does not reach the quadratic regime (R = {R_surf})")
        ax = np.linspace(-L, L, n)
        d = ax[1] - ax[0]
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        fvals = surface.f(pts.reshape(n, n, 2)).ravel()
        w = np.full(n * n, d * d)
        shape = (n, n)
        spacing = (d, d)
        boundary = np.zeros((n, n), dtype=bool)
        boundary[0, :] = boundary[-1, :] = True
        boundary[:, 0] = boundary[:, -1] = True
        bmask = boundary.ravel()
    elif kind == "polar":
        nr, nt = resolution
        nr, nt = int(nr), int(nt)
        if nr < 48 or nt < 48:
            raise GridError("resolution must be >= 48 per axis")
        if nt % 3 != 0:
            raise GridError(f"N_theta = {nt} must be divisible by 3 for the exact rotation")
        Rmax = float(extent)
        R_surf = getattr(surface, "R", 0.0)
        if Rmax < R_surf:
            raise GridError(f"extent {Rmax} does not reach the quadratic regime (R = {R_surf})")
        dr = Rmax / nr
        dt = 2.0 * np.pi / nt
        r = (np.arange(nr) + 0.5) * dr
        # evaluate f on the first sector only, then tile: exact periodicity
        s = nt // 3
        theta_sector = np.arange(s) * dt
        Rg, Tg = np.meshgrid(r, theta_sector, indexing="ij")
        pts_sector = np.stack([Rg * np.cos(Tg), Rg * np.sin(Tg)], axis=-1)
        f_sector = surface.f(pts_sector)
        fvals = np.tile(f_sector, (1, 3)).ravel()
        theta = np.arange(nt) * dt
        Rg, Tg = np.meshgrid(r, theta, indexing="ij")
        pts = np.stack([(Rg * np.cos(Tg)).ravel(), (Rg * np.sin(Tg)).ravel()], axis=-1)
        w = np.repeat(r * dr * dt, nt)
        shape = (nr, nt)
        spacing = (dr, dt)
        bmask = np.zeros((nr, nt), dtype=bool)
        bmask[-1, :] = True
        bmask = bmask.ravel()
    else:
        raise GridError(f"unknown grid kind {kind!r}")

    if f_ref is None:
        f_ref = float(fvals.min())
    dens = np.exp(-(fvals - f_ref) / h)
    if check_boundary:
        ratio = dens[bmask].max() / dens.max()
        if ratio > BOUNDARY_MASS_TOL:
            raise GridError(
                f"boundary Gibbs mass ratio {ratio:.3e} exceeds {BOUNDARY_MASS_TOL:.0e}; "
                "enlarge the domain for this (surface, h)"
            )
    return Grid2D(
        kind=kind,
        shape=shape,
        extent=float(extent),
        h=float(h),
        points=pts,
        weights=w,
        f=fvals,
        f_ref=float(f_ref),
        surface=surface,
        spacing=spacing,
    )
