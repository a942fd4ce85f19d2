"""Low-lying spectral windows by shift-invert Krylov-Schur with banded LU.

The solver runs in complex arithmetic for every operator (uniform code
path); for real operators the window is realified afterwards and the
reported eigenvalues come from a small real eigenproblem, which restores
exact conjugation pairing.  A dense fallback covers every instance small
enough to certify against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg import lapack

from .operators import GridOperator

DENSE_LIMIT = 4096
DEFAULT_KRYLOV_DIM = 60
DEFAULT_RESTARTS = 20
DEFAULT_TOL = 1e-10
START_SEED = 2357


class EigensolveError(RuntimeError):
    pass


class BandedLU:
    """LU factorization of a sparse banded matrix via LAPACK ?gbtrf.

    Partial pivoting doubles the lower band in storage.  solve() supports
    the transposed system, which is how left eigenvectors are obtained
    without a second factorization.
    """

    def __init__(self, A, dtype=complex):
        A = sp.csr_matrix(A).astype(dtype)
        n = A.shape[0]
        coo = A.tocoo()
        if coo.nnz == 0:
            raise EigensolveError("empty matrix")
        band = int(np.max(np.abs(coo.row - coo.col)))
        kl = ku = band
        ab = np.zeros((2 * kl + ku + 1, n), dtype=dtype, order="F")
        ab[kl + ku + coo.row - coo.col, coo.col] = coo.data
        if dtype == complex:
            lu, ipiv, info = lapack.zgbtrf(ab, kl, ku)
        else:
            lu, ipiv, info = lapack.dgbtrf(ab, kl, ku)
        if info < 0:
            raise EigensolveError(f"gbtrf: illegal argument {-info}")
        if info > 0:
            raise SingularFactor(f"gbtrf: zero pivot at {info}")
        self.n = n
        self.kl, self.ku = kl, ku
        self.lu, self.ipiv = lu, ipiv
        self.dtype = dtype

    def solve(self, b, trans=False):
        b = np.asarray(b, dtype=self.dtype)
        one_d = b.ndim == 1
        if one_d:
            b = b[:, None]
        t = "T" if trans else "N"
        if self.dtype == complex:
            x, info = lapack.zgbtrs(self.lu, self.kl, self.ku, b, self.ipiv, trans=1 if trans else 0)
        else:
            x, info = lapack.dgbtrs(self.lu, self.kl, self.ku, b, self.ipiv, trans=1 if trans else 0)
        if info != 0:
            raise EigensolveError(f"gbtrs failed: info={info} (trans={t})")
        return x[:, 0] if one_d else x


class SingularFactor(EigensolveError):
    pass


@dataclass
class SpectralWindow:
    """Converged low-lying window plus the gap certificate."""

    eigenvalues: np.ndarray          # sorted by real part, length = count
    residuals: np.ndarray
    vectors: np.ndarray              # columns, same order
    first_excluded: complex
    lambda_cut: float
    shift: complex
    op_norm: float
    clusters: list = field(default_factory=list)
    cluster_widths: np.ndarray | None = None

    @property
    def count(self):
        return len(self.eigenvalues)

    def gap_ratio(self):
        top = max(abs(ev.real) for ev in self.eigenvalues)
        if top == 0.0:
            return np.inf
        return self.first_excluded.real / top

    def conjugation_defect(self):
        """Hausdorff-type distance between the window and its conjugate."""
        ev = self.eigenvalues
        return max(np.min(np.abs(ev - np.conj(lam))) for lam in ev)

    def records(self):
        cl = np.zeros(self.count, dtype=int)
        for k, idx in enumerate(self.clusters):
            cl[idx] = k
        return [
            {
                "re": float(ev.real),
                "im": float(ev.imag),
                "residual": float(r),
                "cluster": int(c),
            }
            for ev, r, c in zip(self.eigenvalues, self.residuals, cl)
        ]


def _operator_matrix(A):
    if isinstance(A, GridOperator):
        return A.matrix
    return sp.csr_matrix(A)


def _start_vector(A, n, seed=START_SEED):
    rng = np.random.default_rng(seed)
    if isinstance(A, GridOperator):
        v0 = A.grid.gibbs.astype(complex)
    else:
        v0 = np.ones(n, dtype=complex)
    v0 = v0 / np.linalg.norm(v0)
    v0 = v0 + 1e-3 * rng.standard_normal(n)
    return v0 / np.linalg.norm(v0)


def _krylov_schur(solve, n, nwanted, v0, krylov_dim, restarts, conv_test):
    """Shift-invert Krylov-Schur: returns (ritz values nu of B, vectors)."""
    m = min(krylov_dim, n - 1)
    V = np.zeros((n, m + 1), dtype=complex)
    H = np.zeros((m + 1, m), dtype=complex)
    V[:, 0] = v0
    k = 0  # locked/compressed block size
    for it in range(restarts + 1):
        # expand Arnoldi from column k to m
        for j in range(k, m):
            w = solve(V[:, j])
            for _ in range(2):  # MGS with one reorthogonalization pass
                coeffs = V[:, : j + 1].conj().T @ w
                w = w - V[:, : j + 1] @ coeffs
                H[: j + 1, j] += coeffs
            beta = np.linalg.norm(w)
            H[j + 1, j] = beta
            if beta < 1e-14:
                m_eff = j + 1
                Hm = H[:m_eff, :m_eff]
                nu, Y = np.linalg.eig(Hm)
                order = np.argsort(-np.abs(nu))
                return nu[order], V[:, :m_eff] @ Y[:, order], 0.0
            V[:, j + 1] = w / beta
        Hm = H[:m, :m]
        beta_m = H[m, m - 1].real
        nu_all = np.linalg.eig(Hm)[0]
        thresh = np.sort(np.abs(nu_all))[-min(nwanted, m)]
        T, Z, sdim = sla.schur(Hm, output="complex", sort=lambda x: abs(x) >= thresh * (1 - 1e-12))
        keep = max(sdim, nwanted)
        keep = min(keep, m - 2)
        # convergence: residual row of the sorted Schur basis
        b_row = beta_m * Z[m - 1, :]
        ritz = np.diag(T)
        if conv_test(ritz[:keep], np.abs(b_row[:keep])) or it == restarts:
            nu, Ysmall = np.linalg.eig(T[:keep, :keep])
            order = np.argsort(-np.abs(nu))
            vecs = V[:, :m] @ (Z[:, :keep] @ Ysmall[:, order])
            res_row = b_row[:keep] @ Ysmall[:, order]
            return nu[order], vecs, np.abs(res_row)
        # Krylov-Schur restart: compress to keep block
        Vk = V[:, :m] @ Z[:, :keep]
        V[:, :keep] = Vk
        V[:, keep] = V[:, m]
        H[:, :] = 0.0
        H[:keep, :keep] = T[:keep, :keep]
        H[keep, :keep] = b_row[:keep]
        k = keep
    raise EigensolveError("Krylov-Schur failed to converge")


def spectral_window(
    A,
    count: int = 3,
    shift: complex = None,
    tol: float = DEFAULT_TOL,
    krylov_dim: int = DEFAULT_KRYLOV_DIM,
    restarts: int = DEFAULT_RESTARTS,
    cluster_tol: float = 1e-3,
    seed: int = START_SEED,
) -> SpectralWindow:
    """Compute the count lowest-Re eigenvalues plus the gap certificate.

    Shift-invert Krylov-Schur around `shift` using a banded LU of
    (A - shift I); singular factorizations are retried with a small
    imaginary offset.  Falls back to a dense solve for n <= DENSE_LIMIT
    when the iteration stalls.
    """
    M = _operator_matrix(A)
    n = M.shape[0]
    is_real = not np.iscomplexobj(M.data)
    norm = float(abs(M).sum(axis=0).max())
    if shift is None:
        shift = -1e-3 * norm / n  # a hair left of the PSD spectrum
    shift = complex(shift)

    nextra = 1  # converge one more pair to certify the gap
    nwanted = count + nextra

    lu = None
    for attempt in range(3):
        try:
            lu = BandedLU(M - shift * sp.identity(n, format="csr"), dtype=complex)
            break
        except SingularFactor:
            shift = shift + 1j * max(abs(shift), 1e-8 * norm)
    if lu is None:
        raise EigensolveError("factorization singular after 3 re-shifts")

    v0 = _start_vector(A, n, seed)
    scale = norm

    def conv_test(ritz, res_rows):
        if len(ritz) < nwanted:
            return False
        # translate B-residuals to A-relative residuals
        lam = shift + 1.0 / ritz
        rel = res_rows * (np.abs(lam - shift) + 1.0) / (np.abs(ritz) * scale)
        return bool(np.all(rel[:nwanted] <= tol))

    try:
        nu, vecs, _res = _krylov_schur(lu.solve, n, nwanted, v0, krylov_dim, restarts, conv_test)
    except EigensolveError:
        if n <= DENSE_LIMIT:
            return dense_window(A, count, cluster_tol=cluster_tol)
        raise

    lam = shift + 1.0 / nu
    order = np.argsort(lam.real)
    lam, vecs = lam[order], vecs[:, order]
    lam = lam[: nwanted + 2]
    vecs = vecs[:, : nwanted + 2]

    if is_real:
        lam_w, vecs_w = _realified_eigen(M, vecs[:, : nwanted + 2], count + 1)
    else:
        lam_w, vecs_w = lam[: count + 1], vecs[:, : count + 1]

    window_vals = lam_w[:count]
    window_vecs = vecs_w[:, :count]
    first_excluded = lam_w[count]
    residuals = _true_residuals(M, window_vals, window_vecs) / norm
    if np.any(residuals > 10 * max(tol, 1e-9)):
        if n <= DENSE_LIMIT:
            return dense_window(A, count, cluster_tol=cluster_tol)
        raise EigensolveError(f"window residuals too large: {residuals}")

    last_re = max(abs(window_vals.real))
    lc = float(np.sqrt(max(last_re, 1e-300) * max(first_excluded.real, 1e-300)))
    win = SpectralWindow(
        eigenvalues=window_vals,
        residuals=residuals,
        vectors=window_vecs,
        first_excluded=complex(first_excluded),
        lambda_cut=lc,
        shift=shift,
        op_norm=norm,
    )
    win.clusters, win.cluster_widths = cluster_eigenvalues(win, cluster_tol)
    return win


def _realified_eigen(M, vecs, take):
    """Real orthonormal span of the converged vectors, then small real eig.

    Guarantees the reported window of a real operator is exactly closed
    under conjugation (eigenvalues of a small real matrix).
    """
    W = np.hstack([vecs.real, vecs.imag])
    Q, sv, _ = np.linalg.svd(W, full_matrices=False)
    rank = int(np.sum(sv > sv[0] * 1e-11))
    Q = Q[:, :rank]
    Mr = Q.T @ (M @ Q)
    nu, Y = np.linalg.eig(Mr)
    order = np.argsort(nu.real)
    nu, Y = nu[order], Y[:, order]
    return nu[:take], Q @ Y[:, :take]


def _true_residuals(M, vals, vecs):
    res = np.empty(len(vals))
    for k, lam in enumerate(vals):
        v = vecs[:, k]
        nv = np.linalg.norm(v)
        res[k] = np.linalg.norm(M @ v - lam * v) / nv
    return res


def dense_window(A, count, cluster_tol=1e-3):
    """Dense oracle: full eigensolve, same window contract."""
    M = _operator_matrix(A)
    n = M.shape[0]
    if n > DENSE_LIMIT:
        raise EigensolveError(f"dense fallback limited to {DENSE_LIMIT}, got {n}")
    D = M.toarray()
    norm = float(abs(M).sum(axis=0).max())
    sym = isinstance(A, GridOperator) and A.flags.get("symmetric", False)
    if sym:
        vals, vecs = np.linalg.eigh(D)
        vals = vals.astype(complex)
    else:
        vals, vecs = np.linalg.eig(D)
    order = np.argsort(vals.real)
    vals, vecs = vals[order], vecs[:, order]
    window_vals = vals[:count]
    window_vecs = vecs[:, :count]
    residuals = _true_residuals(M, window_vals, window_vecs) / norm
    last_re = max(abs(window_vals.real))
    lc = float(np.sqrt(max(last_re, 1e-300) * max(vals[count].real, 1e-300)))
    win = SpectralWindow(
        eigenvalues=window_vals,
        residuals=residuals,
        vectors=window_vecs,
        first_excluded=complex(vals[count]),
        lambda_cut=lc,
        shift=complex(0.0),
        op_norm=norm,
    )
    win.clusters, win.cluster_widths = cluster_eigenvalues(win, cluster_tol)
    return win


def cluster_eigenvalues(window, tol: float = 1e-3):
    """Group window eigenvalues within tol * local scale; report widths.

    The local scale of a candidate cluster is max(|lambda|) over its
    members, floored at tol * ||A|| to keep the zero eigenvalue a cluster
    of its own rather than absorbing everything.
    """
    if isinstance(window, SpectralWindow):
        ev = window.eigenvalues
        floor = 1e-9 * window.op_norm
    else:
        ev = np.asarray(window)
        floor = 1e-14 * max(np.abs(ev)) if len(ev) else 0.0
    order = np.argsort(ev.real)
    clusters = []
    for i in order:
        placed = False
        for cl in clusters:
            scale = max(max(abs(ev[j]) for j in cl), floor)
            if min(abs(ev[i] - ev[j]) for j in cl) <= tol * scale:
                cl.append(i)
                placed = True
                break
        if not placed:
            clusters.append([i])
    widths = np.array(
        [
            max(abs(ev[i] - ev[j]) for i in cl for j in cl) if len(cl) > 1 else 0.0
            for cl in clusters
        ]
    )
    return [np.array(cl) for cl in clusters], widths


def invariant_subspace(A, window: SpectralWindow, cluster_id: int, refine: bool = True):
    """Orthonormal basis of the invariant subspace of one cluster.

    For real operators and conjugation-closed clusters the basis is real;
    returns (B, M) with M = B^T A B the reduced matrix and checks the
    residual ||A B - B M|| <= 1e-9 ||A||.
    """
    Mmat = _operator_matrix(A)
    norm = window.op_norm
    idx = window.clusters[cluster_id]
    # isolation: distance to the nearest eigenvalue outside the cluster
    others = [window.eigenvalues[j] for j in range(window.count) if j not in idx]
    others.append(window.first_excluded)
    width = window.cluster_widths[cluster_id]
    gap = min(
        abs(window.eigenvalues[i] - mu) for i in idx for mu in others
    )
    if width > 0 and gap < 10 * width:
        raise EigensolveError(f"cluster {cluster_id} not isolated: gap {gap}, width {width}")

    Z = np.ascontiguousarray(window.vectors[:, idx])
    ev = window.eigenvalues[idx]
    is_real = not np.iscomplexobj(Mmat.data)
    scale = max(np.max(np.abs(ev)), 1e-12 * norm)
    conj_closed = all(np.min(np.abs(ev - np.conj(lam))) <= 1e-8 * scale for lam in ev)

    mu0 = complex(np.mean(ev))
    if refine:
        # one inverse-iteration pass tightens the subspace at solver cost ~ 0
        shift = mu0 + (1e-3 * max(abs(mu0), 1e-8 * norm))
        try:
            lu = BandedLU(Mmat - shift * sp.identity(Mmat.shape[0], format="csr"), dtype=complex)
            X = lu.solve(Z.astype(complex))
            Q, _ = np.linalg.qr(X)
            Z = Q
        except EigensolveError:
            pass

    if is_real and conj_closed:
        W = np.hstack([Z.real, Z.imag])
        Q, sv, _ = np.linalg.svd(W, full_matrices=False)
        B = np.ascontiguousarray(Q[:, : len(idx)])
    else:
        B, _ = np.linalg.qr(Z)

    Mred = B.conj().T @ (Mmat @ B)
    if is_real and conj_closed:
        Mred = Mred.real
    resid = np.linalg.norm(Mmat @ B - B @ Mred) / norm
    if resid > 1e-9:
        raise EigensolveError(f"invariant subspace residual {resid:.2e} exceeds 1e-9")
    return B, Mred
