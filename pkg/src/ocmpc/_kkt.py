"""Linear algebra for the barrier KKT system ``[[H, A'], [A, 0]]``."""
from __future__ import annotations

import logging

import numpy as np
import qdldl
import scipy.linalg.lapack as lapack
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

# systems up to this order are solved densely
DENSE_KKT_MAX = 300
# quasi-definite regularizations tried in turn; preconditioned GMRES removes the perturbation
KKT_REG_LADDER = (1e-5, 1e-4, 1e-6)
KKT_RTOL = 1e-10
# plain refinement steps tried before preconditioned GMRES
REFINE_STEPS = 4


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float = np.inf, rank_defect=None):
        super().__init__(message)
        self.condition = condition
        self.rank_defect = rank_defect


def dense_symmetric_solve(K, rhs, *, rtol=1e-10, refine=3):
    """Solve ``K sol = rhs`` for symmetric, possibly indefinite ``K``.

    LAPACK's Bunch-Kaufman factorization (``sytrf``, deterministic pivot
    choice) followed by iterative refinement. Raises
    :class:`SingularSystemError` on an exactly zero pivot, a reciprocal
    condition estimate below machine epsilon, or a relative residual that
    stays above ``rtol``.
    """
    K = np.asarray(K, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"K must be square, got shape {K.shape}")
    if rhs.shape[0] != K.shape[0]:
        raise ValueError("rhs length does not match K")
    n = K.shape[0]
    if n == 0:
        return rhs.copy()
    lwork = max(1, int(lapack.dsytrf_lwork(n)[0]))
    ldu, ipiv, info = lapack.dsytrf(K, lower=1, lwork=lwork)
    if info > 0:
        raise SingularSystemError(f"zero pivot at position {info - 1}")
    anorm = np.abs(K).sum(axis=0).max()
    rcond, _ = lapack.dsycon(ldu, ipiv, anorm, lower=1)
    if rcond < np.finfo(float).eps:
        cond = 1.0 / max(rcond, 1e-300)
        raise SingularSystemError(f"numerically singular (condition estimate {cond:.2e})", condition=cond)
    b2 = rhs.reshape(n, -1)
    sol = lapack.dsytrs(ldu, ipiv, b2, lower=1)[0]
    rnorm = np.linalg.norm(b2)
    for _ in range(refine):
        res = b2 - K @ sol
        if np.linalg.norm(res) <= 1e-2 * rtol * rnorm:
            break
        sol = sol + lapack.dsytrs(ldu, ipiv, res, lower=1)[0]
    res = np.linalg.norm(b2 - K @ sol)
    if rnorm > 0 and res > rtol * rnorm:
        raise SingularSystemError(f"relative residual {res / rnorm:.2e} above {rtol:.0e}",
                                  condition=1.0 / rcond)
    return sol.reshape(rhs.shape)


class KKTPattern:
    """Fixed sparsity pattern of the upper triangle of the KKT matrix.

    ``H = C' diag(v) C`` changes every Newton step through ``v = 1 / s**2``
    only, so each stored entry is a fixed linear combination of ``v``; the
    pattern records those combinations once per ``(A, C)`` pair.
    """

    def __init__(self, A, C):
        A = sp.csr_matrix(A)
        C = sp.csr_matrix(C)
        self.A_id, self.C_id = None, None
        n = C.shape[1]
        m = A.shape[0]
        self.n, self.m = n, m
        N = n + m

        ii, jj, src, coef = [], [], [], []
        counts = np.diff(C.indptr)
        for q in np.unique(counts):
            if q == 0:
                continue
            rows = np.flatnonzero(counts == q)
            pos = C.indptr[rows][:, None] + np.arange(q)
            cols, vals = C.indices[pos], C.data[pos]
            a, b = np.triu_indices(q)
            ci, cj = cols[:, a], cols[:, b]
            ii.append(np.minimum(ci, cj).ravel())
            jj.append(np.maximum(ci, cj).ravel())
            src.append(np.repeat(rows, len(a)))
            coef.append((vals[:, a] * vals[:, b]).ravel())
        Acoo = A.tocoo()
        # A' block sits in the upper triangle at (variable, n + row)
        ii.append(Acoo.col)
        jj.append(Acoo.row + n)
        src.append(np.full(Acoo.nnz, -1))
        coef.append(Acoo.data)
        ii.append(np.arange(N))
        jj.append(np.arange(N))
        src.append(np.full(N, -1))
        coef.append(np.zeros(N))

        ii, jj = np.concatenate(ii), np.concatenate(jj)
        self.src = np.concatenate(src)
        self.coef = np.concatenate(coef)
        keys = jj.astype(np.int64) * N + ii
        ukeys, self.inv = np.unique(keys, return_inverse=True)
        self.nnz = len(ukeys)
        self.indices = (ukeys % N).astype(np.int32)
        cols = ukeys // N
        self.indptr = np.searchsorted(cols, np.arange(N + 1)).astype(np.int32)
        self.row_of = self.indices.astype(np.int64)
        self.col_of = cols.astype(np.int64)
        self.diag_pos = self.indptr[1:] - 1  # diagonal is the last entry of each upper column
        self.is_h = self.src >= 0
        self.h_src = self.src[self.is_h]
        self.h_coef = self.coef[self.is_h]
        self.const = np.bincount(self.inv[~self.is_h], weights=self.coef[~self.is_h],
                                 minlength=self.nnz)
        self.C2T = sp.csr_matrix(C.multiply(C).T)
        A_abs = abs(A).tocsr()
        A_abs.sort_indices()
        self.A_abs_data, self.A_abs_cols = A_abs.data, A_abs.indices
        self.A_row_start = A_abs.indptr[:-1]
        self.A_row_empty = np.diff(A_abs.indptr) == 0
        # full symmetric pattern: upper entries plus mirrored strict-upper entries
        strict = self.row_of != self.col_of
        rows = np.concatenate([self.row_of, self.col_of[strict]])
        cols = np.concatenate([self.col_of, self.row_of[strict]])
        src_idx = np.concatenate([np.arange(self.nnz), np.flatnonzero(strict)])
        order = np.lexsort((cols, rows))
        self.full_map = src_idx[order]
        self.full_indices = cols[order].astype(np.int32)
        self.full_indptr = np.searchsorted(rows[order], np.arange(N + 1)).astype(np.int32)
        # numeric refactorizations reuse the symbolic analysis, one solver per regularization
        self.solvers = {}

    def values(self, v):
        """Upper-triangle values of the unscaled KKT matrix for barrier weights ``v``."""
        data = self.const.copy()
        data += np.bincount(self.inv[self.is_h], weights=self.h_coef * v[self.h_src],
                            minlength=self.nnz)
        return data

    def scaling(self, v):
        """Diagonal scaling: unit H diagonal, unit max-norm A rows."""
        hdiag = self.C2T @ v
        dx = 1.0 / np.sqrt(np.maximum(hdiag, 1.0))
        if self.m == 0:
            return dx
        scaled = self.A_abs_data * dx[self.A_abs_cols]
        rmax = np.ones(self.m)
        if scaled.size:
            full = ~self.A_row_empty
            rmax[full] = np.maximum.reduceat(scaled, self.A_row_start[full])
        rmax[rmax == 0] = 1.0
        return np.concatenate([dx, 1.0 / rmax])


def kkt_pattern(lp) -> KKTPattern:
    """Pattern for ``lp``, cached on ``lp.kkt_cache`` when the problem carries one."""
    cache = getattr(lp, "kkt_cache", None)
    if cache is not None:
        pat = cache.get("pattern")
        if pat is not None and pat.A_id == id(lp.A) and pat.C_id == id(lp.C):
            return pat
    pat = KKTPattern(lp.A, lp.C)
    pat.A_id, pat.C_id = id(lp.A), id(lp.C)
    if cache is not None:
        cache["pattern"] = pat
    return pat


class EqualityProjector:
    """Least-norm corrections ``A' (A A')^-1 e``; one factorization per matrix."""

    def __init__(self, A):
        self.A = sp.csr_matrix(A)
        self.A_id = None
        self.AT = self.A.T.tocsr()
        gram = (self.A @ self.A.T).tocsc()
        self._lu = spla.splu(gram) if gram.shape[0] else None

    def correct(self, e):
        if self._lu is None:
            return np.zeros(self.A.shape[1])
        return np.asarray(self.AT @ self._lu.solve(e)).ravel()


def equality_projector(lp) -> EqualityProjector:
    cache = getattr(lp, "kkt_cache", None)
    if cache is not None:
        proj = cache.get("projector")
        if proj is not None and proj.A_id == id(lp.A):
            return proj
    proj = EqualityProjector(lp.A)
    proj.A_id = id(lp.A)
    if cache is not None:
        cache["projector"] = proj
    return proj


def solve_kkt(lp, v, rhs_top, rhs_bottom, *, refine=60, stats=None):
    """Solve ``[[C' diag(v) C, A'], [A, 0]] [dx; nu] = [rhs_top; rhs_bottom]``.

    One factorization per call. Small systems use
    :func:`dense_symmetric_solve`; larger ones are scaled and factored as the
    quasi-definite matrix ``[[H + rI, A'], [A, -rI]]`` by sparse LDL' with AMD
    ordering, and iterative refinement against the unregularized matrix
    removes the perturbation: GMRES preconditioned by the regularized factor.
    ``r`` grows when that stalls; sparse LU is the last resort. Every
    factorization attempted is counted in ``stats["factorizations"]`` when
    ``stats`` is given.
    """
    def count():
        if stats is not None:
            stats["factorizations"] = stats.get("factorizations", 0) + 1

    pat = kkt_pattern(lp)
    n, m = pat.n, pat.m
    rhs = np.concatenate([rhs_top, rhs_bottom])
    data = pat.values(v)
    D = pat.scaling(v)
    data *= D[pat.row_of] * D[pat.col_of]
    rs = D * rhs

    if n + m <= DENSE_KKT_MAX:
        U = sp.csc_matrix((data, pat.indices, pat.indptr), shape=(n + m, n + m)).toarray()
        K = U + U.T - np.diag(np.diag(U))
        count()
        try:
            sol = dense_symmetric_solve(K, rs, rtol=1e-9)
            return D[:n] * sol[:n], D[n:] * sol[n:]
        except SingularSystemError:
            log.debug("dense KKT solve rejected; using regularized sparse LDL'")

    Kfull = sp.csr_matrix((data[pat.full_map], pat.full_indices, pat.full_indptr),
                          shape=(n + m, n + m))

    def matvec(z):
        return Kfull @ z

    n_tot = n + m
    op = spla.LinearOperator((n_tot, n_tot), matvec=matvec, dtype=float)
    rnorm = np.linalg.norm(rs)
    best, best_res = None, np.inf
    for reg in KKT_REG_LADDER:
        reg_data = data.copy()
        reg_data[pat.diag_pos[:n]] += reg
        reg_data[pat.diag_pos[n:]] -= reg
        U = sp.csc_matrix((reg_data, pat.indices, pat.indptr), shape=(n_tot, n_tot))
        count()
        try:
            factor = pat.solvers.get(reg)
            if factor is None:
                factor = pat.solvers[reg] = qdldl.Solver(U, upper=True)
            else:
                factor.update(U, upper=True)
        except (ValueError, RuntimeError):
            pat.solvers.pop(reg, None)
            continue
        sol = factor.solve(rs)
        res = np.linalg.norm(rs - matvec(sol))
        for _ in range(REFINE_STEPS):
            if not np.isfinite(res) or res <= KKT_RTOL * rnorm:
                break
            trial = sol + factor.solve(rs - matvec(sol))
            trial_res = np.linalg.norm(rs - matvec(trial))
            if not trial_res < 0.5 * res:
                break
            sol, res = trial, trial_res
        if np.isfinite(res) and res > KKT_RTOL * rnorm:
            # the regularized factor preconditions GMRES; the few eigenvalues
            # it perturbs are removed in a handful of iterations
            prec = spla.LinearOperator((n_tot, n_tot), matvec=factor.solve, dtype=float)
            trial, _ = spla.gmres(op, rs, x0=sol, M=prec, rtol=0.1 * KKT_RTOL, atol=0.0,
                                  restart=refine, maxiter=4)
            trial_res = np.linalg.norm(rs - matvec(trial))
            if trial_res < res:
                sol, res = trial, trial_res
        if np.isfinite(res) and res < best_res:
            best, best_res = sol, res
        if best_res <= KKT_RTOL * rnorm:
            break
    if best is None or best_res > KKT_RTOL * rnorm:
        log.debug("regularized LDL' inaccurate (%.1e); falling back to sparse LU", best_res / max(rnorm, 1e-300))
        count()
        try:
            best = spla.splu(Kfull.tocsc()).solve(rs)
        except RuntimeError as exc:
            raise SingularSystemError(f"KKT factorization failed: {exc}") from exc
    if not np.all(np.isfinite(best)):
        raise SingularSystemError("KKT solve produced non-finite values")
    return D[:n] * best[:n], D[n:] * best[n:]
