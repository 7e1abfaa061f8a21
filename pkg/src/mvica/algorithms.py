"""Separator drivers.

Blind methods (AuxIVA, ILRMA) alternate weight estimation with the row-wise
auxiliary-function update. MVICA replaces the weighted covariance by the
interference covariance of each source, which makes the row update produce
the maximum-SIR filter; it iterates a fixed number of times and skips the
row normalization. A GEV beamformer driven by the same covariances is
provided as a reference.

Shapes follow :mod:`mvica.core`; covariance sets are (K, F, M, M) arrays,
one stack per source.
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    apply_demixing,
    contrast_weights,
    demixing_inverse,
    identity_stack,
    load_for_inverse,
    minimal_distortion_rescale,
    normalize_row,
    objective,
    update_demixing_row,
    weighted_covariance,
)
from .errors import BadMaskHeader, DataError, DegenerateDirection, ShapeMismatch, UnknownAlgo, ZeroMaskEnergy
from .linalg import diag_load, gen_eig_max, herm_inverse, hermitize

MASK_MAGIC = b"MSK1"
DEMIX_MAGIC = b"WDM1"
MASK_CAP = 4.0


@dataclass
class SeparatorConfig:
    algo: str = "mvica-oracle"
    iterations: int = 50
    L: int = 5
    eps_load: float = 1e-6
    nmf_bases: int = 2
    nmf_steps: int = 2
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.L < 1 or self.iterations < 1:
            raise ValueError("iteration counts must be at least 1")
        if not self.eps_load > 0:
            raise ValueError("eps_load must be positive")


@dataclass
class OracleInfo:
    """Ground truth in the STFT domain.

    ``images[k, m]`` is the spectrogram of source ``k`` at microphone ``m``;
    ``mixing`` optionally holds the narrowband mixing matrices (F, M, K).
    The reference microphone of source ``k`` is microphone ``k``.
    """

    images: np.ndarray
    mixing: np.ndarray = None
    rtol: float = 1e-10

    @classmethod
    def from_images(cls, images, frame_size=4096, hop=None, mixing=None, rtol=1e-10):
        """Analyze time-domain images of shape (K, M, n).

        ``rtol`` is the tolerance of :meth:`check`; loosen it for images
        read back from 32-bit files.
        """
        from .stft import analyze

        images = np.asarray(images)
        spec = np.stack([analyze(img, frame_size, hop).data for img in images])
        return cls(spec, mixing, rtol)

    @classmethod
    def narrowband(cls, A, S):
        """Exact narrowband images ``a_k(f) s_k(f,t)`` from mixing matrices
        (F, M, K) and dry spectrograms (K, F, T)."""
        images = np.einsum("fmk,kft->kmft", A, S)
        return cls(images, A)

    @property
    def n_sources(self):
        return self.images.shape[0]

    @property
    def mixture(self):
        return self.images.sum(axis=0)

    def check(self, X, rtol=None):
        rtol = self.rtol if rtol is None else rtol
        if self.images.shape[1:] != np.shape(X):
            raise ShapeMismatch(f"oracle images {self.images.shape} do not fit mixture {np.shape(X)}")
        err = np.linalg.norm(self.mixture - X)
        if err > rtol * max(np.linalg.norm(X), 1e-300):
            raise ShapeMismatch(f"oracle images do not sum to the mixture (error {err:.3g})")

    def reference(self):
        """Each source's image at its reference microphone, shape (K, F, T)."""
        K = self.n_sources
        return self.images[np.arange(K), np.arange(K)]

    def frame_rms(self):
        """Per-frame RMS over frequency of the reference images, shape (K, T)."""
        return np.sqrt(np.mean(np.abs(self.reference()) ** 2, axis=1))

    def source_power(self):
        """Mean dry-source power per bin, shape (K, F); needs exact narrowband images."""
        K = self.n_sources
        a_ref = self.mixing[:, np.arange(K), np.arange(K)].T
        s = self.reference() / np.where(a_ref == 0, 1.0, a_ref)[:, :, None]
        return np.mean(np.abs(s) ** 2, axis=-1)


# --- covariance estimators -------------------------------------------------


def _load(Phi, eps, relative):
    if not relative:
        return diag_load(Phi, eps)
    K = Phi.shape[-1]
    tr = np.trace(Phi, axis1=-2, axis2=-1).real
    return diag_load(Phi, np.where(tr > 0, eps * tr / K, eps))


def covariance(Z):
    """Sample covariance ``mean_t z z^H`` per bin of a (M, F, T) spectrogram."""
    T = Z.shape[-1]
    return hermitize(np.einsum("ift,jft->fij", Z, np.conj(Z)) / T)


def interference_cov_oracle(X, images, k, eps=1e-6, relative=True):
    """Loaded covariance of everything except source ``k``'s image.

    With ``relative=True`` the loading is ``eps * trace / M`` per bin (plain
    ``eps`` where the trace vanishes), which keeps the result invariant to
    the overall signal scale.
    """
    N = np.asarray(X) - np.asarray(images)[k]
    return _load(covariance(N), eps, relative)


def interference_covariances(X, images, eps=1e-6, relative=True):
    return np.stack([interference_cov_oracle(X, images, k, eps, relative) for k in range(len(images))])


def source_covariance(images, k):
    return covariance(np.asarray(images)[k])


def rank1_source_covariance(sigma2, a):
    """``sigma2 * a a^H`` per bin; ``sigma2`` (F,), ``a`` (F, M)."""
    return np.asarray(sigma2)[:, None, None] * np.einsum("fi,fj->fij", a, np.conj(a))


def interference_cov_masked(X, mask, eps=1e-6, relative=True):
    """Mask-based interference covariance.

    The interference is estimated as ``m(f,t) x(f,t)`` with one complex mask
    value shared by all channels, and the covariance is normalized by the
    mask energy ``sum_t |m|^2``. Bins whose mask is identically zero fall
    back to pure loading and trigger a :class:`ZeroMaskEnergy` warning.
    """
    X = np.asarray(X)
    mask = np.asarray(mask)
    if mask.shape != X.shape[1:]:
        raise ShapeMismatch(f"mask {mask.shape} does not fit spectrogram {X.shape}")
    N = mask[None] * X
    energy = np.sum(np.abs(mask) ** 2, axis=-1)
    num = hermitize(np.einsum("ift,jft->fij", N, np.conj(N)))
    zero = energy == 0
    Phi = num / np.where(zero, 1.0, energy)[:, None, None]
    if np.any(zero):
        warnings.warn(
            f"mask energy is zero in {int(zero.sum())} bins; using loading only", ZeroMaskEnergy
        )
    return _load(Phi, eps, relative)


def oracle_masks(X, images, kind="ratio"):
    """Interference masks derived from ground truth, shape (K, F, T).

    ``complex``: ratio of the interference to the mixture at the reference
    microphone, magnitude capped at 4. ``ratio``: real ideal-ratio style mask
    ``|N| / (|S| + |N|)``.
    """
    X = np.asarray(X)
    images = np.asarray(images)
    K = images.shape[0]
    masks = np.zeros((K,) + X.shape[1:], dtype=complex)
    for k in range(K):
        s = images[k, k]
        n = X[k] - s
        if kind == "complex":
            x = X[k]
            m = np.divide(n, x, out=np.zeros_like(n), where=np.abs(x) > 0)
            mag = np.abs(m)
            m = np.where(mag > MASK_CAP, m * (MASK_CAP / np.maximum(mag, 1e-300)), m)
        elif kind == "ratio":
            den = np.abs(s) + np.abs(n)
            m = np.divide(np.abs(n), den, out=np.zeros(n.shape), where=den > 0)
        else:
            raise ValueError(f"unknown mask kind {kind!r}")
        masks[k] = m
    return masks


# --- SIR helpers -----------------------------------------------------------


def narrowband_sir(w, PhiS, PhiN):
    """Output SIR ``(w^H PhiS w) / (w^H PhiN w)`` per bin (linear scale)."""
    num = np.einsum("...i,...ij,...j->...", np.conj(w), PhiS, w).real
    den = np.einsum("...i,...ij,...j->...", np.conj(w), PhiN, w).real
    if np.any(~(den > 0)):
        raise DegenerateDirection("interference power along w is not positive")
    return num / den


def sir_bound(sigma2, a, PhiN):
    """Largest achievable narrowband SIR, ``sigma2 a^H PhiN^{-1} a``."""
    inv = herm_inverse(PhiN)
    return np.asarray(sigma2) * np.einsum("...i,...ij,...j->...", np.conj(a), inv, a).real


def narrowband_sir_trace(W, PhiS, PhiN):
    """Per-source, per-bin output SIR in dB of demixing stack ``W`` (K, F)."""
    K = W.shape[-1]
    return np.stack(
        [10 * np.log10(narrowband_sir(np.conj(W[:, k, :]), PhiS[k], PhiN[k])) for k in range(K)]
    )


# --- drivers -----------------------------------------------------------------


def run_mvica(X, PhiN, L=5, W0=None, rescale=True, refresh=None):
    """Maximum-SIR demixing from interference covariances.

    For ``L`` passes and each source ``k``: ``w_k <- PhiN_k^{-1} W^{-1} e_k``,
    with no row normalization. The minimal-distortion rescale resolves the
    scale afterwards.

    Parameters
    ----------
    X : ndarray, shape (K, F, T)
    PhiN : ndarray, shape (K, F, K, K)
        Positive definite (already loaded) interference covariances.
    refresh : callable, optional
        ``refresh(W, l) -> PhiN`` re-estimates the covariances after pass
        ``l``; off by default.

    Returns
    -------
    W : ndarray, shape (F, K, K)
    Y : ndarray, shape (K, F, T)
    """
    X = np.asarray(X)
    K, F, _ = X.shape
    PhiN = np.asarray(PhiN)
    if PhiN.shape != (K, F, K, K):
        raise ShapeMismatch(f"covariance set {PhiN.shape} does not fit spectrogram {X.shape}")
    W = identity_stack(F, K) if W0 is None else np.array(W0, dtype=complex)
    Phi_inv = herm_inverse(PhiN)
    for l in range(L):
        for k in range(K):
            a_tilde = demixing_inverse(W)[:, :, k]
            W[:, k, :] = np.conj(np.einsum("fij,fj->fi", Phi_inv[k], a_tilde))
        if refresh is not None and l + 1 < L:
            Phi_inv = herm_inverse(refresh(W, l))
    if rescale:
        W = minimal_distortion_rescale(W)
    return W, apply_demixing(W, X)


def _sweep(X, W, covs):
    # one pass of row updates; covs(k, W) returns the loaded V_k stack
    K = X.shape[0]
    for k in range(K):
        V = covs(k, W)
        w = update_demixing_row(V, W, k)
        W[:, k, :] = np.conj(normalize_row(w, V))
    return W


def _demix_row(W, X, k):
    return np.einsum("fm,mft->ft", W[:, k, :], X)


def _iterate(X, covs, iterations, W0, tol, cost, callback):
    K, F, _ = X.shape
    W = identity_stack(F, K) if W0 is None else np.array(W0, dtype=complex)
    prev = None
    for it in range(iterations):
        W = _sweep(X, W, covs)
        if cost is None and callback is None:
            continue
        J = cost(W) if cost is not None else None
        if callback is not None:
            callback(W, J)
        if tol and J is not None and prev is not None and abs(prev - J) <= tol * abs(prev):
            break
        prev = J
    return W


def run_auxiva(X, iterations=50, tol=1e-6, W0=None, rescale=True, callback=None):
    """AuxIVA with the spherical Laplace source model.

    Stops after ``iterations`` sweeps or when the relative change of the
    objective falls below ``tol`` (``tol=0`` disables early stopping).
    ``callback(W, J)`` sees the un-rescaled stack and the objective after
    every sweep.
    """
    X = np.asarray(X)

    def covs(k, W):
        phi = contrast_weights(_demix_row(W, X, k)[None], "iva")[0]
        return load_for_inverse(weighted_covariance(X, phi))

    def cost(W):
        return objective(apply_demixing(W, X), W, "iva")

    W = _iterate(X, covs, iterations, W0, tol, cost, callback)
    if rescale:
        W = minimal_distortion_rescale(W)
    return W, apply_demixing(W, X)


def run_auxica(X, iterations=50, tol=1e-6, W0=None, rescale=True, callback=None):
    """Per-bin Laplace model (FDICA weights). No permutation alignment is done."""
    X = np.asarray(X)

    def covs(k, W):
        phi = contrast_weights(_demix_row(W, X, k)[None], "fdica")[0]
        return load_for_inverse(weighted_covariance(X, phi))

    def cost(W):
        return objective(apply_demixing(W, X), W, "fdica")

    W = _iterate(X, covs, iterations, W0, tol, cost, callback)
    if rescale:
        W = minimal_distortion_rescale(W)
    return W, apply_demixing(W, X)


def is_divergence(P, R):
    """Itakura-Saito divergence between power ``P`` and model ``R``."""
    q = P / R
    return float(np.sum(q - np.log(q) - 1.0))


def nmf_is_update(P, T, V, floor=1e-12):
    """One majorization-minimization step of IS-NMF, ``P ~ T @ V``.

    The square-root multiplicative form never increases the IS divergence
    and keeps both factors nonnegative.
    """
    P = np.maximum(P, floor)
    R = np.maximum(T @ V, floor)
    T = T * np.sqrt(((P / R**2) @ V.T) / np.maximum((1.0 / R) @ V.T, floor))
    T = np.maximum(T, floor)
    R = np.maximum(T @ V, floor)
    V = V * np.sqrt((T.T @ (P / R**2)) / np.maximum(T.T @ (1.0 / R), floor))
    V = np.maximum(V, floor)
    return T, V


def run_ilrma(X, iterations=50, nmf_bases=2, nmf_steps=2, seed=0, tol=1e-6,
              W0=None, init=None, rescale=True, callback=None):
    """ILRMA: IVA-style demixing with an IS-NMF low-rank source variance.

    ``init`` may supply ``(T, V)`` arrays of shapes (K, F, B) and (K, B, T)
    instead of the seeded uniform(0.1, 1) initialization.
    """
    X = np.asarray(X)
    K, F, N = X.shape
    if nmf_bases < 1:
        raise ValueError("nmf_bases must be at least 1")
    if init is None:
        rng = np.random.default_rng(seed)
        bases = rng.uniform(0.1, 1.0, (K, F, nmf_bases))
        acts = rng.uniform(0.1, 1.0, (K, nmf_bases, N))
    else:
        bases, acts = (np.array(a, dtype=float) for a in init)

    def covs(k, W):
        P = np.abs(_demix_row(W, X, k)) ** 2
        for _ in range(nmf_steps):
            bases[k], acts[k] = nmf_is_update(P, bases[k], acts[k])
        phi = contrast_weights(P[None], "variance", variance=(bases[k] @ acts[k])[None])[0]
        return load_for_inverse(weighted_covariance(X, phi))

    def cost(W):
        model = np.einsum("kfb,kbt->kft", bases, acts)
        return objective(apply_demixing(W, X), W, "variance", model)

    W = _iterate(X, covs, iterations, W0, tol, cost, callback)
    if rescale:
        W = minimal_distortion_rescale(W)
    return W, apply_demixing(W, X)


# near-silent cells would otherwise dominate the weighted covariances
IDLMA_VARIANCE_FLOOR = 1e-2

ORACLE_KINDS = ("idlma_oracle", "kang_oracle", "auxica_oracle", "auxiva_oracle_init")


def run_oracle_variant(X, oracle, kind="idlma_oracle", iterations=50, rescale=True):
    """Auxiliary-function separation with source models taken from ground truth.

    ``idlma_oracle``: variance weights ``1 / |s_k(f,t)|^2``, with the variance
    floored at ``IDLMA_VARIANCE_FLOOR`` times its per-source mean.
    ``kang_oracle``: frame weights ``1 / r_k(t)``, ``r_k(t)`` the per-frame
    RMS of the reference image.
    ``auxica_oracle``: per-bin weights ``1 / |s_k(f,t)|``.
    ``auxiva_oracle_init``: one sweep with IVA weights computed from the
    reference images, then blind AuxIVA.

    Here ``s_k`` is source ``k``'s image at its reference microphone.
    """
    X = np.asarray(X)
    oracle.check(X)
    ref = oracle.reference()
    if kind == "idlma_oracle":
        v = np.abs(ref) ** 2
        v = np.maximum(v, IDLMA_VARIANCE_FLOOR * v.mean(axis=(1, 2), keepdims=True))
        phi = contrast_weights(ref, "variance", variance=v)
    elif kind == "kang_oracle":
        phi = contrast_weights(ref, "variance", variance=np.broadcast_to(oracle.frame_rms()[:, None, :], ref.shape))
    elif kind == "auxica_oracle":
        phi = contrast_weights(ref, "fdica")
    elif kind == "auxiva_oracle_init":
        phi = contrast_weights(ref, "iva")
    else:
        raise UnknownAlgo(f"unknown oracle variant {kind!r}; choose from {ORACLE_KINDS}")

    V = [load_for_inverse(weighted_covariance(X, phi[k])) for k in range(len(phi))]
    n_fixed = 1 if kind == "auxiva_oracle_init" else iterations
    W = _iterate(X, lambda k, W: V[k], n_fixed, None, 0, None, None)
    if kind == "auxiva_oracle_init":
        return run_auxiva(X, iterations=iterations, W0=W, rescale=rescale)
    if rescale:
        W = minimal_distortion_rescale(W)
    return W, apply_demixing(W, X)


def run_gev(PhiS, PhiN, X, ban=True):
    """GEV beamformer for each source, optionally with blind analytic normalization.

    The filter is the top generalized eigenvector of ``(PhiS_k, PhiN_k)``;
    BAN scales it by ``sqrt(w^H PhiN PhiN w) / (w^H PhiN w)``.
    """
    X = np.asarray(X)
    K, F, _ = X.shape
    W = np.zeros((F, K, K), dtype=complex)
    for k in range(K):
        _, w = gen_eig_max(PhiS[k], PhiN[k])
        if ban:
            Nw = np.einsum("fij,fj->fi", PhiN[k], w)
            num = np.sqrt(np.sum(np.abs(Nw) ** 2, axis=-1))
            den = np.einsum("fi,fi->f", np.conj(w), Nw).real
            w = w * (num / den)[:, None]
        W[:, k, :] = np.conj(w)
    return W, apply_demixing(W, X)


# --- binary formats ----------------------------------------------------------


def write_masks(path, masks):
    """Write an MSK1 file: ``MSK1``, u32 version, K, F, T, then complex64 (k, f, t)."""
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ShapeMismatch(f"masks must be (K, F, T), got {masks.shape}")
    K, F, T = masks.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<4I", 1, K, F, T))
        fh.write(np.ascontiguousarray(masks, dtype="<c8").tobytes())


def read_masks(path):
    """Read an MSK1 file into a complex128 array of shape (K, F, T)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20 or raw[:4] != MASK_MAGIC:
        raise BadMaskHeader(f"{path}: missing MSK1 header")
    version, K, F, T = struct.unpack("<4I", raw[4:20])
    if version != 1:
        raise BadMaskHeader(f"{path}: unsupported MSK1 version {version}")
    expected = 8 * K * F * T
    if len(raw) - 20 != expected:
        raise BadMaskHeader(f"{path}: payload has {len(raw) - 20} bytes, header implies {expected}")
    m = np.frombuffer(raw[20:], dtype="<c8").reshape(K, F, T).astype(complex)
    if not np.all(np.isfinite(m)):
        raise DataError(f"{path}: non-finite mask values")
    if np.any(np.abs(m) > MASK_CAP * (1 + 1e-6)):
        raise DataError(f"{path}: mask magnitude exceeds {MASK_CAP}")
    return m


def write_demixing(path, W):
    """Demixing dump: ``WDM1``, u32 version, K, F, then complex64 W[f] row-major."""
    W = np.asarray(W)
    F, K, _ = W.shape
    with open(path, "wb") as fh:
        fh.write(DEMIX_MAGIC + struct.pack("<3I", 1, K, F))
        fh.write(np.ascontiguousarray(W, dtype="<c8").tobytes())


def read_demixing(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DEMIX_MAGIC:
        raise DataError(f"{path}: not a demixing dump")
    _, K, F = struct.unpack("<3I", raw[4:16])
    return np.frombuffer(raw[16:], dtype="<c8").reshape(F, K, K).astype(complex)


# --- dispatch ----------------------------------------------------------------

ALGOS = (
    "mvica-oracle",
    "mvica-mask",
    "gev-oracle",
    "idlma-oracle",
    "kang-oracle",
    "auxica-oracle",
    "auxiva-oracle-init",
    "auxiva",
    "ilrma",
)
NEEDS_ORACLE = {"mvica-oracle", "gev-oracle", "idlma-oracle", "kang-oracle", "auxica-oracle", "auxiva-oracle-init"}


def separate(X, config, oracle=None, masks=None):
    """Run the algorithm named in ``config.algo`` on spectrogram data ``X``."""
    algo = config.algo
    if algo not in ALGOS:
        raise UnknownAlgo(f"unknown algorithm {algo!r}; choose from {', '.join(ALGOS)}")
    if algo in NEEDS_ORACLE and oracle is None:
        raise UnknownAlgo(f"{algo} needs oracle source images")
    if algo == "mvica-oracle":
        oracle.check(X)
        PhiN = interference_covariances(X, oracle.images, config.eps_load)
        return run_mvica(X, PhiN, config.L)
    if algo == "mvica-mask":
        if masks is None:
            raise UnknownAlgo("mvica-mask needs a mask set")
        if masks.shape[0] != X.shape[0]:
            raise ShapeMismatch(f"{masks.shape[0]} masks for {X.shape[0]} channels")
        PhiN = np.stack([interference_cov_masked(X, m, config.eps_load) for m in masks])
        return run_mvica(X, PhiN, config.L)
    if algo == "gev-oracle":
        oracle.check(X)
        PhiN = interference_covariances(X, oracle.images, config.eps_load)
        PhiS = np.stack([source_covariance(oracle.images, k) for k in range(oracle.n_sources)])
        return run_gev(PhiS, PhiN, X)
    if algo == "auxiva":
        return run_auxiva(X, config.iterations, config.tol)
    if algo == "ilrma":
        return run_ilrma(X, config.iterations, config.nmf_bases, config.nmf_steps, config.seed, config.tol)
    kind = algo.replace("-", "_")
    return run_oracle_variant(X, oracle, kind, config.iterations)
