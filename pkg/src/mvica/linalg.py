"""Small complex matrix algebra, batched over leading axes.

All functions accept arrays of shape ``(..., K, K)`` (and ``(..., K)`` for
vectors) and operate on the trailing matrix dimensions, so a whole stack of
per-frequency matrices is processed in one call.
"""

import numpy as np

from .errors import NotPositiveDefinite, SingularMatrix

PIVOT_FLOOR = 1e-30
COND_CAP = 1e12


def herm(A):
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(A, -1, -2))


def hermitize(A):
    """Return the Hermitian part ``(A + A^H) / 2``; exact symmetry is guaranteed."""
    H = 0.5 * (A + herm(A))
    # the diagonal of a Hermitian matrix is real
    d = np.arange(A.shape[-1])
    H[..., d, d] = H[..., d, d].real
    return H


def _flat(M):
    M = np.asarray(M)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {M.shape}")
    return M.reshape((-1,) + M.shape[-2:]), M.shape


def herm_inverse(M, cond_cap=COND_CAP):
    """Invert a stack of small square matrices by Gauss-Jordan elimination.

    Works for any invertible matrix (the demixing matrices are not
    Hermitian); partial pivoting is used throughout.

    Parameters
    ----------
    M : ndarray, shape (..., K, K)
    cond_cap : float
        Upper bound on the Frobenius condition number
        ``||M||_F ||M^-1||_F``. Larger values raise :class:`SingularMatrix`.

    Raises
    ------
    SingularMatrix
        If a pivot magnitude drops below ``1e-30`` or the condition cap is
        exceeded. Callers are expected to add diagonal loading and retry.
    """
    M0, shape = _flat(M)
    A = M0.astype(complex, copy=True)
    B, K, _ = A.shape
    inv = np.broadcast_to(np.eye(K, dtype=complex), A.shape).copy()
    rows = np.arange(B)

    for c in range(K):
        p = c + np.argmax(np.abs(A[:, c:, c]), axis=1)
        swap = p != c
        if np.any(swap):
            r, pr = rows[swap], p[swap]
            A[r, c], A[r, pr] = A[r, pr].copy(), A[r, c].copy()
            inv[r, c], inv[r, pr] = inv[r, pr].copy(), inv[r, c].copy()

        piv = A[:, c, c].copy()
        bad = np.abs(piv) < PIVOT_FLOOR
        if np.any(bad):
            raise SingularMatrix(
                f"pivot below {PIVOT_FLOOR:g} in {int(bad.sum())} of {B} matrices"
            )
        A[:, c, :] /= piv[:, None]
        inv[:, c, :] /= piv[:, None]

        f = A[:, :, c].copy()
        f[:, c] = 0.0
        A -= f[:, :, None] * A[:, None, c, :]
        inv -= f[:, :, None] * inv[:, None, c, :]

    if cond_cap is not None:
        kappa = np.linalg.norm(M0, axis=(1, 2)) * np.linalg.norm(
            inv, axis=(1, 2)
        )
        bad = ~(kappa <= cond_cap)
        if np.any(bad):
            raise SingularMatrix(
                f"condition number {np.max(kappa[bad]):.3g} exceeds cap {cond_cap:g}"
            )
    return inv.reshape(shape)


def cholesky(M):
    """Upper-triangular factor ``P`` with ``P^H P = M``.

    Only the upper triangle of ``M`` is read.

    Raises
    ------
    NotPositiveDefinite
        When a diagonal pivot is not strictly positive.
    """
    A, shape = _flat(M)
    A = A.astype(complex)
    B, K, _ = A.shape
    P = np.zeros_like(A)
    for i in range(K):
        d = A[:, i, i].real - np.sum(np.abs(P[:, :i, i]) ** 2, axis=1)
        if np.any(~(d > 0)):
            raise NotPositiveDefinite(f"non-positive pivot at position {i}")
        pii = np.sqrt(d)
        P[:, i, i] = pii
        if i + 1 < K:
            acc = np.einsum("bk,bkj->bj", np.conj(P[:, :i, i]), P[:, :i, i + 1 :])
            P[:, i, i + 1 :] = (A[:, i, i + 1 :] - acc) / pii[:, None]
    return P.reshape(shape)


def diag_load(M, eps):
    """Return ``M + eps * I``. ``eps`` may be a scalar or one value per matrix."""
    M = np.asarray(M)
    eps = np.asarray(eps, dtype=float)
    out = M.astype(np.result_type(M.dtype, float), copy=True)
    d = np.arange(M.shape[-1])
    out[..., d, d] += eps[..., None]
    return out


def _top_eigh2(C):
    # closed form for 2x2 Hermitian; C has shape (B, 2, 2)
    a = C[:, 0, 0].real
    d = C[:, 1, 1].real
    b = C[:, 0, 1]
    half = 0.5 * (a - d)
    lam = 0.5 * (a + d) + np.sqrt(half**2 + np.abs(b) ** 2)
    v = np.empty((C.shape[0], 2), dtype=complex)
    use_first = a < d
    # [b, lam - a] and [lam - d, conj(b)] both span the top eigenspace;
    # pick the one whose leading difference is larger
    v[:, 0] = np.where(use_first, b, lam - d)
    v[:, 1] = np.where(use_first, lam - a, np.conj(b))
    nrm = np.linalg.norm(v, axis=1)
    flat = nrm == 0
    v[flat] = [1.0, 0.0]
    nrm[flat] = 1.0
    return lam, v / nrm[:, None]


def fix_phase(v):
    """Rotate each vector so that its largest-magnitude entry is real positive."""
    v = np.asarray(v, dtype=complex)
    idx = np.argmax(np.abs(v), axis=-1)
    ref = np.take_along_axis(v, idx[..., None], axis=-1)
    mag = np.abs(ref)
    mag[mag == 0] = 1.0
    return v * (np.conj(ref) / mag)


def gen_eig_max(S, N):
    """Largest generalized eigenpair of ``S v = lambda N v``.

    ``N`` is reduced by its Cholesky factor, ``N = P^H P``, and the standard
    Hermitian problem ``P^-H S P^-1 u = lambda u`` is solved; ``v = P^-1 u``.

    Returns
    -------
    lam : ndarray, shape (...)
        Largest eigenvalue, clipped at zero.
    v : ndarray, shape (..., K)
        Unit 2-norm eigenvector whose largest-magnitude entry is real positive.
    """
    S_flat, shape = _flat(S)
    P = cholesky(N).reshape(S_flat.shape)
    Pinv = herm_inverse(P, cond_cap=None)
    C = hermitize(herm(Pinv) @ S_flat @ Pinv)
    if C.shape[-1] == 2:
        lam, u = _top_eigh2(C)
    else:
        w, U = np.linalg.eigh(C)
        lam, u = w[:, -1], U[:, :, -1]
    v = np.einsum("bij,bj->bi", Pinv, u)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v = fix_phase(v)
    lam = np.maximum(lam, 0.0)
    return lam.reshape(shape[:-2]), v.reshape(shape[:-1])
