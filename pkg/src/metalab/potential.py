"""Threefold-symmetric Morse landscapes and their critical-point geometry.

The working potential is

    f(x) = |x|^2 + beta(|x|^2 / R^2) * (c0 - c1*|x|^2 + c2*(x1^3 - 3*x1*x2^2))

where beta is a smooth cutoff profile that is identically 1 on [0, 1/2] and
identically 0 on [1, oo).  The cubic term equals r^3 cos(3*theta), so f is
exactly invariant under rotation by 2*pi/3 and reduces to |x|^2 outside the
ball of radius R.  With suitable bump parameters the landscape has three
global minima, three saddles and one local maximum; everything downstream
(operators, quasimodes, asymptotic constants) is driven by the geometry
extracted here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROT120 = np.array([[-0.5, -np.sqrt(3.0) / 2.0], [np.sqrt(3.0) / 2.0, -0.5]])

# Default bump parameters.  Tuned so the critical-point inventory is 3/3/1,
# the barrier S = f(s) - f(m) sits near 0.7 (resolvable for h in [0.15, 0.6])
# and the saddle curvatures are steep enough for desk-scale quasimodes.
DEFAULT_PARAMS = {"c0": 1.1, "c1": 2.4, "c2": 0.55, "R": 2.0}

DEGENERACY_RTOL = 1e-6  # Hessian eigenvalue below this (relative) = non-Morse


class SurfaceValidationError(ValueError):
    """Raised when a parameter set fails Morse/inventory validation."""


def _exp_step(t: np.ndarray):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1, built from exp(-1/t).

    Returns (sigma, sigma', sigma'') evaluated elementwise.
    """
    t = np.asarray(t, dtype=float)
    a = np.zeros_like(t)
    b = np.zeros_like(t)
    da = np.zeros_like(t)
    db = np.zeros_like(t)
    d2a = np.zeros_like(t)
    d2b = np.zeros_like(t)

    pos = t > 0.0
    tp = np.where(pos, t, 1.0)
    a[pos] = np.exp(-1.0 / tp[pos])
    da[pos] = a[pos] / tp[pos] ** 2
    d2a[pos] = a[pos] * (1.0 - 2.0 * tp[pos]) / tp[pos] ** 4

    neg = t < 1.0
    s = np.where(neg, 1.0 - t, 1.0)
    b[neg] = np.exp(-1.0 / s[neg])
    # derivatives with respect to t, so the inner chain picks up signs
    db[neg] = -b[neg] / s[neg] ** 2
    d2b[neg] = b[neg] * (1.0 - 2.0 * s[neg]) / s[neg] ** 4

    denom = a + b
    sig = a / denom
    dsig = (da * b - a * db) / denom**2
    d2sig = (d2a * b - a * d2b) / denom**2 - 2.0 * (da * b - a * db) * (da + db) / denom**3
    return sig, dsig, d2sig


def _quintic_step(t: np.ndarray):
    """Polynomial smoothstep of order 5 (C^2), same interface as _exp_step."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    sig = t**3 * (10.0 - 15.0 * t + 6.0 * t**2)
    dsig = 30.0 * t**2 * (1.0 - t) ** 2
    d2sig = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)
    inside = (np.asarray(t) > 0.0) & (np.asarray(t) < 1.0)
    dsig = np.where(inside, dsig, 0.0)
    d2sig = np.where(inside, d2sig, 0.0)
    return sig, dsig, d2sig


_PROFILES = {"exp": _exp_step, "quintic": _quintic_step}


def cutoff_profile(s, kind: str = "exp"):
    """Cutoff in the variable s = |x|^2/R^2: 1 on [0, 1/2], 0 on [1, oo).

    Returns (beta, dbeta/ds, d2beta/ds2).
    """
    step = _PROFILES[kind]
    # beta(s) = step(2*(1 - s)) transitions on s in [1/2, 1]
    sig, dsig, d2sig = step(2.0 * (1.0 - np.asarray(s, dtype=float)))
    return sig, -2.0 * dsig, 4.0 * d2sig


@dataclass(frozen=True)
class MorseSurface:
    """Immutable C3-symmetric Morse function with quadratic far field."""

    c0: float
    c1: float
    c2: float
    R: float
    profile: str = "exp"

    def _bump_parts(self, x1, x2):
        r2 = x1 * x1 + x2 * x2
        beta, dbeta, d2beta = cutoff_profile(r2 / self.R**2, self.profile)
        cubic = x1 * (x1 * x1 - 3.0 * x2 * x2)
        amp = self.c0 - self.c1 * r2 + self.c2 * cubic
        return r2, beta, dbeta, d2beta, cubic, amp

    def f(self, x):
        """Potential value; x has shape (..., 2)."""
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        r2, beta, _, _, _, amp = self._bump_parts(x1, x2)
        return r2 + beta * amp

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        r2, beta, dbeta, _, cubic, amp = self._bump_parts(x1, x2)
        R2 = self.R**2
        # d(amp)
        damp1 = -2.0 * self.c1 * x1 + self.c2 * 3.0 * (x1 * x1 - x2 * x2)
        damp2 = -2.0 * self.c1 * x2 - self.c2 * 6.0 * x1 * x2
        g1 = 2.0 * x1 + dbeta * (2.0 * x1 / R2) * amp + beta * damp1
        g2 = 2.0 * x2 + dbeta * (2.0 * x2 / R2) * amp + beta * damp2
        return np.stack([g1, g2], axis=-1)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        r2, beta, dbeta, d2beta, cubic, amp = self._bump_parts(x1, x2)
        R2 = self.R**2
        damp1 = -2.0 * self.c1 * x1 + self.c2 * 3.0 * (x1 * x1 - x2 * x2)
        damp2 = -2.0 * self.c1 * x2 - self.c2 * 6.0 * x1 * x2
        h11 = (
            2.0
            + d2beta * (2.0 * x1 / R2) ** 2 * amp
            + dbeta * (2.0 / R2) * amp
            + 2.0 * dbeta * (2.0 * x1 / R2) * damp1
            + beta * (-2.0 * self.c1 + 6.0 * self.c2 * x1)
        )
        h22 = (
            2.0
            + d2beta * (2.0 * x2 / R2) ** 2 * amp
            + dbeta * (2.0 / R2) * amp
            + 2.0 * dbeta * (2.0 * x2 / R2) * damp2
            + beta * (-2.0 * self.c1 - 6.0 * self.c2 * x1)
        )
        h12 = (
            d2beta * (2.0 * x1 / R2) * (2.0 * x2 / R2) * amp
            + dbeta * (2.0 * x1 / R2) * damp2
            + dbeta * (2.0 * x2 / R2) * damp1
            + beta * (-6.0 * self.c2 * x2)
        )
        H = np.empty(x.shape[:-1] + (2, 2))
        H[..., 0, 0] = h11
        H[..., 0, 1] = h12
        H[..., 1, 0] = h12
        H[..., 1, 1] = h22
        return H


@dataclass(frozen=True)
class CriticalPoint:
    location: np.ndarray
    index: int
    hess_eigvals: np.ndarray  # ascending
    hess_eigvecs: np.ndarray  # columns match eigvals
    f_value: float

    def __repr__(self):
        return (
            f"CriticalPoint(x=({self.location[0]:+.6f}, {self.location[1]:+.6f}), "
            f"index={self.index}, f={self.f_value:+.6f})"
        )


@dataclass(frozen=True)
class GeometrySummary:
    """Scalar geometry feeding every asymptotic formula."""

    S: float                 # f(s) - f(m), common to all wells by symmetry
    mu_s: float              # unique negative Hessian eigenvalue at saddles
    mu_s_pos: float          # the positive saddle eigenvalue
    det_hess_min: float      # det Hess f(m) > 0
    det_hess_saddle: float   # det Hess f(s) < 0
    f_min: float
    f_saddle: float
    minima: tuple
    saddles: tuple
    maximum: CriticalPoint
    orbit_minima: tuple      # indices such that Rot(minima[i]) = minima[orbit[i]]
    orbit_saddles: tuple
    adjacency: tuple = field(default=())  # adjacency[nu] = (j, k) wells of saddle nu

    def as_dict(self):
        return {
            "S": self.S,
            "mu_s": self.mu_s,
            "mu_s_pos": self.mu_s_pos,
            "det_hess_min": self.det_hess_min,
            "det_hess_saddle": self.det_hess_saddle,
            "f_min": self.f_min,
            "f_saddle": self.f_saddle,
            "minima": [p.location.tolist() for p in self.minima],
            "saddles": [p.location.tolist() for p in self.saddles],
            "maximum": self.maximum.location.tolist(),
            "adjacency": [list(a) for a in self.adjacency],
        }


def find_critical_points(surface: MorseSurface, seed_grid_resolution: int = 64):
    """Locate all critical points by Newton iteration on grad f from a seed grid.

    Every node of a uniform grid over [-R, R]^2 is used as a Newton seed (the
    iterations are vectorized, so this is cheap and does not miss shallow
    critical points the way |grad f|-minimum seeding can).  Results are
    deduplicated; each point carries its Morse index and Hessian data.
    """
    if seed_grid_resolution < 32:
        raise ValueError("seed grid resolution must be >= 32 per axis")
    R = surface.R
    n = seed_grid_resolution
    ax = np.linspace(-R, R, n)
    X1, X2 = np.meshgrid(ax, ax, indexing="ij")
    x = np.stack([X1, X2], axis=-1).reshape(-1, 2)

    hess_scale = max(abs(surface.hess(np.zeros(2))).max(), 2.0)
    active = np.ones(len(x), dtype=bool)
    for _ in range(50):
        g = surface.grad(x)
        gn = np.linalg.norm(g, axis=-1)
        active &= gn > 1e-13 * hess_scale
        active &= np.linalg.norm(x, axis=-1) < 2.0 * R
        if not active.any():
            break
        H = surface.hess(x[active])
        det = H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] * H[:, 1, 0]
        ok = np.abs(det) > 1e-14 * hess_scale**2
        # explicit 2x2 solve; degenerate Hessians freeze their seed
        ga = g[active]
        dx = np.zeros_like(ga)
        dx[ok, 0] = (H[ok, 1, 1] * ga[ok, 0] - H[ok, 0, 1] * ga[ok, 1]) / det[ok]
        dx[ok, 1] = (-H[ok, 1, 0] * ga[ok, 0] + H[ok, 0, 0] * ga[ok, 1]) / det[ok]
        x[active] -= dx

    gn = np.linalg.norm(surface.grad(x), axis=-1)
    converged = (gn <= 1e-12 * hess_scale) & (np.linalg.norm(x, axis=-1) < 1.5 * R)
    found = []
    for xi in x[converged]:
        if any(np.linalg.norm(xi - p) < 1e-6 * R for p in found):
            continue
        found.append(xi)

    points = []
    for x in found:
        H = surface.hess(x)
        w, V = np.linalg.eigh(H)
        if np.min(np.abs(w)) < DEGENERACY_RTOL * np.max(np.abs(w)):
            raise SurfaceValidationError(
                f"numerically degenerate critical point at {x}: eigvals {w}"
            )
        points.append(
            CriticalPoint(
                location=x.copy(),
                index=int(np.sum(w < 0.0)),
                hess_eigvals=w,
                hess_eigvecs=V,
                f_value=float(surface.f(x)),
            )
        )
    points.sort(key=lambda p: (p.index, np.arctan2(p.location[1], p.location[0])))
    return points


def _orbit_map(group, tol):
    """For each point, index of the point closest to Rot(location)."""
    orbit = []
    for p in group:
        rx = ROT120 @ p.location
        dists = [np.linalg.norm(rx - q.location) for q in group]
        k = int(np.argmin(dists))
        if dists[k] > tol:
            raise SurfaceValidationError(
                f"rotation image of {p.location} missing from inventory (miss {dists[k]:.2e})"
            )
        orbit.append(k)
    return tuple(orbit)


def validate_morse_structure(surface: MorseSurface, points=None, seed_grid_resolution: int = 64):
    """Check the 3 minima / 3 saddles / 1 maximum inventory and symmetry."""
    if points is None:
        points = find_critical_points(surface, seed_grid_resolution)
    by_index = {k: [p for p in points if p.index == k] for k in (0, 1, 2)}
    counts = tuple(len(by_index[k]) for k in (0, 1, 2))
    if counts != (3, 3, 1):
        raise SurfaceValidationError(
            f"critical point inventory {counts} != (3, 3, 1); points: {points}"
        )
    _orbit_map(by_index[0], 1e-8 * surface.R)
    _orbit_map(by_index[1], 1e-8 * surface.R)
    return points


def build_surface(params: dict | None = None, profile: str = "exp", validate: bool = True):
    """Construct and (by default) validate a MorseSurface.

    params: mapping with keys c0, c1, c2, R; missing keys fall back to the
    tuned defaults.
    """
    p = dict(DEFAULT_PARAMS)
    if params:
        p.update(params)
    if p["R"] <= 0:
        raise SurfaceValidationError("bump radius R must be positive")
    surface = MorseSurface(c0=p["c0"], c1=p["c1"], c2=p["c2"], R=p["R"], profile=profile)
    if validate:
        validate_morse_structure(surface)
    return surface


def geometry_summary(surface: MorseSurface, points) -> GeometrySummary:
    """Extract S, mu(s), Hessian determinants and the rotation orbit map.

    Fails unless the inventory is exactly 3/3/1, each saddle has exactly one
    negative Hessian eigenvalue, and all symmetry-equal quantities agree to
    1e-8 relative.
    """
    minima = [p for p in points if p.index == 0]
    saddles = [p for p in points if p.index == 1]
    maxima = [p for p in points if p.index == 2]
    if (len(minima), len(saddles), len(maxima)) != (3, 3, 1):
        raise SurfaceValidationError(
            f"inventory {(len(minima), len(saddles), len(maxima))} != (3, 3, 1)"
        )
    for s in saddles:
        if np.sum(s.hess_eigvals < 0) != 1:
            raise SurfaceValidationError(f"saddle {s} does not have exactly one negative eigenvalue")

    f_min = np.array([p.f_value for p in minima])
    f_sad = np.array([p.f_value for p in saddles])
    det_min = np.array([np.prod(p.hess_eigvals) for p in minima])
    det_sad = np.array([np.prod(p.hess_eigvals) for p in saddles])
    mu_neg = np.array([p.hess_eigvals[0] for p in saddles])
    mu_pos = np.array([p.hess_eigvals[1] for p in saddles])

    def _check_equal(name, vals):
        scale = max(abs(vals).max(), 1e-30)
        if (vals.max() - vals.min()) > 1e-8 * scale:
            raise SurfaceValidationError(f"{name} not symmetric across the orbit: {vals}")

    _check_equal("f(m)", f_min)
    _check_equal("f(s)", f_sad)
    _check_equal("det Hess f(m)", det_min)
    _check_equal("det Hess f(s)", det_sad)
    _check_equal("mu(s)", mu_neg)

    S = float(f_sad.mean() - f_min.mean())
    if not (S > 0):
        raise SurfaceValidationError(f"barrier S = {S} must be positive")
    if not (det_min.mean() > 0 and det_sad.mean() < 0):
        raise SurfaceValidationError("Hessian determinant signs violated")

    # adjacency: saddle nu belongs to the two wells whose minima are nearest
    adjacency = []
    for s in saddles:
        d = [np.linalg.norm(s.location - m.location) for m in minima]
        adjacency.append(tuple(np.argsort(d)[:2]))

    return GeometrySummary(
        S=S,
        mu_s=float(mu_neg.mean()),
        mu_s_pos=float(mu_pos.mean()),
        det_hess_min=float(det_min.mean()),
        det_hess_saddle=float(det_sad.mean()),
        f_min=float(f_min.mean()),
        f_saddle=float(f_sad.mean()),
        minima=tuple(minima),
        saddles=tuple(saddles),
        maximum=maxima[0],
        orbit_minima=_orbit_map(minima, 1e-8 * surface.R),
        orbit_saddles=_orbit_map(saddles, 1e-8 * surface.R),
        adjacency=tuple(adjacency),
    )


@dataclass(frozen=True)
class HarmonicPotential:
    """f(x) = alpha |x|^2; reference potential for the exactly solvable model."""

    alpha: float = 0.5

    def f(self, x):
        x = np.asarray(x, dtype=float)
        return self.alpha * (x[..., 0] ** 2 + x[..., 1] ** 2)

    def grad(self, x):
        return 2.0 * self.alpha * np.asarray(x, dtype=float)

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        H = np.zeros(x.shape[:-1] + (2, 2))
        H[..., 0, 0] = 2.0 * self.alpha
        H[..., 1, 1] = 2.0 * self.alpha
        return H
