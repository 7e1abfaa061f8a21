"""Shared building blocks of auxiliary-function separation.

Shapes used throughout:

* ``X``, ``Y``: (K, F, T) complex spectrograms (channel/source, bin, frame)
* ``W``: (F, K, K) demixing stack; row ``k`` of ``W[f]`` is ``w_k(f)^H``
* ``V``: (F, K, K) one weighted covariance per bin
* weights ``phi``: (K, F, T) positive reals

Every function is vectorized over frequency; bins never interact.
"""

import numpy as np

from .errors import DegenerateDirection, ShapeMismatch, SingularMatrix
from .linalg import diag_load, herm_inverse, hermitize

MODELS = ("fdica", "iva", "variance")
CLAMP_REL = 1e-8
V_LOAD_REL = 1e-10


def _floor(r, axes):
    # per-source floor, 1e-8 of the mean magnitude; silent sources borrow the
    # global scale so their weights stay finite
    scale = np.mean(r, axis=axes, keepdims=True)
    overall = np.mean(r)
    scale = np.where(scale > 0, scale, overall if overall > 0 else 1.0)
    return np.maximum(r, CLAMP_REL * scale)


def contrast_weights(Y, model="iva", variance=None):
    """Per-bin, per-frame weights ``G'(r) / r`` of the chosen source model.

    ``fdica`` uses ``r = |y_k(f,t)|``; ``iva`` uses the full-band frame norm
    ``||y_k(t)||_2`` (the same value in every bin of a frame); ``variance``
    uses the supplied ``v_k(f,t)`` directly. ``r`` is floored at ``1e-8``
    times its per-source mean before inversion.

    Returns
    -------
    ndarray, shape (K, F, T)
    """
    Y = np.asarray(Y)
    if model == "fdica":
        r = _floor(np.abs(Y), (1, 2))
    elif model == "iva":
        r = np.linalg.norm(Y, axis=1, keepdims=True)
        r = np.broadcast_to(_floor(r, (1, 2)), Y.shape)
    elif model == "variance":
        if variance is None:
            raise ValueError("variance model needs the variance field")
        r = np.broadcast_to(_floor(np.asarray(variance, dtype=float), (1, 2)), Y.shape)
    else:
        raise ValueError(f"unknown source model {model!r}; choose from {MODELS}")
    return 1.0 / r


def weighted_covariance(X, phi):
    """``V(f) = mean_t phi(f,t) x(f,t) x(f,t)^H`` for every bin.

    Parameters
    ----------
    X : ndarray, shape (K, F, T)
    phi : ndarray, shape (F, T)

    Returns
    -------
    ndarray, shape (F, K, K), exactly Hermitian.
    """
    X = np.asarray(X)
    T = X.shape[-1]
    V = np.einsum("ift,jft->fij", X * phi[None], np.conj(X)) / T
    return hermitize(V)


def load_for_inverse(V, rel=V_LOAD_REL):
    """Add ``rel * trace(V) / K`` to the diagonal of each bin's matrix."""
    K = V.shape[-1]
    tr = np.trace(V, axis1=-2, axis2=-1).real
    return diag_load(V, rel * tr / K)


def demixing_inverse(W):
    """``W^{-1}`` per bin, computed on the row-equilibrated stack.

    Rows of an un-normalized demixing matrix may differ in scale by many
    orders of magnitude without being close to singular; equilibrating
    first keeps the condition-number check meaningful.
    ``(D W)^{-1} D = W^{-1}`` for any diagonal ``D``.
    """
    W = np.asarray(W)
    norms = np.linalg.norm(W, axis=-1)
    d = 1.0 / np.where(norms > 0, norms, 1.0)
    return herm_inverse(d[..., :, None] * W) * d[..., None, :]


def update_demixing_row(V, W, k):
    """Auxiliary-function row update ``w_k = V^{-1} W^{-1} e_k``.

    Returns the column vectors ``w_k(f)`` with shape (F, K); the new row of
    ``W`` is their conjugate.
    """
    rhs = demixing_inverse(W)[..., :, k]
    return np.einsum("fij,fj->fi", herm_inverse(V), rhs)


def normalize_row(w, V):
    """Scale ``w`` so that ``w^H V w = 1`` in every bin."""
    q = np.einsum("fi,fij,fj->f", np.conj(w), V, w).real
    if np.any(~(q > 1e-30)):
        raise DegenerateDirection("w^H V w is not positive in some bins")
    return w / np.sqrt(q)[:, None]


def apply_demixing(W, X):
    """``y(f,t) = W(f) x(f,t)``."""
    W = np.asarray(W)
    X = np.asarray(X)
    if W.ndim != 3 or X.ndim != 3 or W.shape[0] != X.shape[1] or W.shape[2] != X.shape[0]:
        raise ShapeMismatch(f"demixing stack {W.shape} does not fit spectrogram {X.shape}")
    return np.einsum("fkm,mft->kft", W, X)


def contrast(Y, model="iva", variance=None):
    """Sum over sources and frames of the contrast ``G``."""
    if model == "iva":
        return float(np.sum(np.linalg.norm(Y, axis=1)))
    if model == "fdica":
        return float(np.sum(np.abs(Y)))
    if model == "variance":
        v = np.asarray(variance, dtype=float)
        return float(np.sum(np.abs(Y) ** 2 / v + np.log(v)))
    raise ValueError(f"unknown source model {model!r}")


def objective(Y, W, model="iva", variance=None):
    """Negative log-likelihood ``sum_{k,t} G(y_k(t)) - T sum_f log|det W(f)|``.

    The log-determinant is counted once per frame so that the value equals
    ``T`` times the per-frame cost that the row updates minimize.
    """
    T = Y.shape[-1]
    _, logdet = np.linalg.slogdet(W)
    if np.any(np.isneginf(logdet)):
        raise SingularMatrix("demixing matrix has zero determinant")
    return contrast(Y, model, variance) - T * float(np.sum(logdet))


def minimal_distortion_rescale(W):
    """Resolve the scale ambiguity: ``W'(f) = diag(W(f)^{-1}) W(f)``.

    Output ``k`` then estimates source ``k``'s image at microphone ``k``.
    """
    d = np.diagonal(demixing_inverse(W), axis1=-2, axis2=-1)
    return d[..., :, None] * W


def identity_stack(n_freq, K):
    return np.broadcast_to(np.eye(K, dtype=complex), (n_freq, K, K)).copy()
