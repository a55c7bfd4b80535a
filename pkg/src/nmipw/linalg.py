"""Small dense linear-algebra helpers with surfaced regularisation."""
from __future__ import annotations

import numpy as np
from scipy import linalg


def ridge_for(A: np.ndarray) -> float:
    d = A.shape[0]
    tr = float(np.trace(A))
    return 1e-10 * (tr / d if tr > 0 else 1.0)


def solve_psd(A, B, warnings: list | None = None, what: str = "matrix"):
    """Solve ``A X = B`` for symmetric PSD ``A``.

    Falls back to a ridge of ``1e-10 * trace / dim`` when the Cholesky
    factorisation fails, and records that in ``warnings``.
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return np.zeros((0,) + np.shape(B)[1:])
    try:
        c = linalg.cho_factor(A, check_finite=True)
        X = linalg.cho_solve(c, B)
        if np.all(np.isfinite(X)):
            return X
    except linalg.LinAlgError:
        pass
    eps = ridge_for(A)
    if warnings is not None:
        warnings.append(f"singular {what}; ridge {eps:.3g} added")
    return linalg.solve(A + eps * np.eye(A.shape[0]), B, assume_a="sym")


def inv_psd(A, warnings: list | None = None, what: str = "matrix"):
    return solve_psd(A, np.eye(np.shape(A)[0]), warnings, what)


def independent_columns(X: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Indices of a maximal set of linearly independent columns, in original order.

    Uses column-pivoted QR; a column is dependent when its pivot falls below
    ``rtol`` times the largest pivot.
    """
    if X.shape[1] == 0:
        return np.zeros(0, dtype=int)
    scale = np.sqrt(np.sum(X * X, axis=0))
    scale[scale == 0] = 1.0
    _, R, piv = linalg.qr(X / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > rtol * diag[0]))
    return np.sort(piv[:rank])


def symmetrize(A):
    return 0.5 * (A + A.T)
