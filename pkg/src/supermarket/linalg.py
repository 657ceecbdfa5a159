"""Dense Kronecker/Hadamard kernel and small Markov-chain solvers.

All matrices here are tiny (a handful of phases), so everything is dense
numpy. Row vectors are plain 1-d arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, NumericError, StructuralError, ValidationError

#: tolerance for structural checks (generator row sums, sign patterns)
STRUCT_TOL = 1e-9
#: relative residual demanded from linear solves
SOLVE_TOL = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise StructuralError(f"expected a non-empty 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("matrix has non-finite entries")
    return m


def as_vector(v) -> np.ndarray:
    x = np.array(v, dtype=float).reshape(-1)
    if x.size < 1:
        raise StructuralError("expected a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise ValidationError("vector has non-finite entries")
    return x


def kron(a, b) -> np.ndarray:
    """Kronecker product; block (i, j) of the result is ``a[i, j] * b``."""
    return np.kron(as_matrix(a), as_matrix(b))


def kron_sum(a, b) -> np.ndarray:
    """Kronecker sum ``a (x) I + I (x) b`` of two square matrices."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[0] != a.shape[1] or b.shape[0] != b.shape[1]:
        raise StructuralError("Kronecker sum needs square operands")
    return np.kron(a, np.eye(b.shape[0])) + np.kron(np.eye(a.shape[0]), b)


def hadamard_power(v, d: int) -> np.ndarray:
    if d < 1:
        raise DomainError(f"power must be a positive integer, got {d}")
    return np.asarray(v, dtype=float) ** int(d)


def hadamard_root(v, d: int) -> np.ndarray:
    if d < 1:
        raise DomainError(f"root order must be a positive integer, got {d}")
    x = np.asarray(v, dtype=float)
    if np.any(x < 0):
        raise DomainError("entrywise root of a vector with negative entries")
    if d == 1:
        return x.copy()
    return x ** (1.0 / d)


def is_irreducible(q) -> bool:
    """Strong connectivity of the positive off-diagonal pattern (iterative DFS)."""
    q = as_matrix(q)
    n = q.shape[0]
    adj = (q > 0) & ~np.eye(n, dtype=bool)

    def reach(mat):
        seen = {0}
        stack = [0]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(mat[i]):
                if j not in seen:
                    seen.add(int(j))
                    stack.append(int(j))
        return len(seen) == n

    return reach(adj) and reach(adj.T)


def check_generator(q, what: str = "generator") -> np.ndarray:
    q = as_matrix(q)
    n, m = q.shape
    if n != m:
        raise StructuralError(f"{what} must be square, got {q.shape}")
    off = q - np.diag(np.diag(q))
    bad = np.argwhere(off < -STRUCT_TOL)
    if bad.size:
        i, j = bad[0]
        raise ValidationError(f"{what} has negative off-diagonal entry at ({i}, {j}): {q[i, j]}")
    rows = q.sum(axis=1)
    scale = max(1.0, float(np.abs(q).max()))
    bad_rows = np.flatnonzero(np.abs(rows) > STRUCT_TOL * scale)
    if bad_rows.size:
        i = bad_rows[0]
        raise ValidationError(f"{what} row {i} sums to {rows[i]}, not 0")
    return q


def stationary_vector(q) -> np.ndarray:
    """Stationary distribution x of an irreducible generator: x Q = 0, x e = 1.

    Solved as the overdetermined system ``x [Q | e] = [0 | 1]`` in the
    least-squares sense, which is exact for an irreducible generator.
    """
    q = check_generator(q)
    n = q.shape[0]
    if not is_irreducible(q):
        raise StructuralError("generator is reducible")
    aug = np.hstack([q, np.ones((n, 1))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    x, *_ = np.linalg.lstsq(aug.T, rhs, rcond=None)
    # one Newton-style refinement keeps the residual at round-off level
    r = rhs - x @ aug
    dx, *_ = np.linalg.lstsq(aug.T, r, rcond=None)
    x = x + dx
    scale = max(1.0, float(np.abs(q).max()))
    if np.abs(x @ q).max() > SOLVE_TOL * scale * n or abs(x.sum() - 1.0) > SOLVE_TOL * n:
        raise NumericError("stationary solve did not reach the residual tolerance")
    if np.any(x <= 0):
        raise NumericError("stationary vector has non-positive entries")
    return x


def neg_inverse(t) -> np.ndarray:
    """Return ``(-T)^{-1}`` for a phase-type subgenerator ``T``."""
    t = as_matrix(t)
    n, m = t.shape
    if n != m:
        raise StructuralError(f"subgenerator must be square, got {t.shape}")
    try:
        inv = np.linalg.solve(-t, np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise NumericError("subgenerator is singular") from exc
    resid = np.abs(-t @ inv - np.eye(n)).max()
    if not np.all(np.isfinite(inv)) or resid > SOLVE_TOL * max(1.0, np.abs(inv).max() * np.abs(t).max()):
        raise NumericError(f"subgenerator is numerically singular (residual {resid:.3g})")
    # entries are nonnegative in exact arithmetic; clip round-off negatives
    inv[(inv < 0) & (inv > -SOLVE_TOL * np.abs(inv).max())] = 0.0
    return inv
