"""Separation quality metrics.

``bss_eval`` follows the usual time-domain decomposition of an estimate into
target, interference and artifact parts: the target is the projection onto
the span of 512 delayed copies of the matching reference, interference is
the remaining projection onto all references' delayed copies, and artifacts
are what lies outside that subspace.
"""

import csv
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.signal import fftconvolve

from .errors import LengthMismatch, PermutationMismatch, SilentReference

CAP_DB = 100.0
FILTER_LEN = 512
CSV_COLUMNS = (
    "seed", "algo", "k", "sir_db", "sdr_db", "si_sdr_db",
    "sir_delta_db", "sdr_delta_db", "rt60_ms", "n_sources", "failed",
)


def _db(num, den):
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(num) - 10.0 * np.log10(den)
    return float(np.clip(np.nan_to_num(val, nan=0.0, posinf=CAP_DB, neginf=-CAP_DB), -CAP_DB, CAP_DB))


@dataclass
class EvalReport:
    """Scores per reference source ``k`` (index = reference, not estimate).

    ``perm[k]`` is the estimate assigned to reference ``k``.
    """

    sir: np.ndarray
    sdr: np.ndarray
    si_sdr: np.ndarray
    perm: tuple
    sir_delta: np.ndarray = None
    sdr_delta: np.ndarray = None
    narrowband_sir: np.ndarray = None
    objective_trace: list = field(default_factory=list)


def si_sdr(estimate, reference):
    """Scale-invariant SDR in dB, capped to +-100 dB."""
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise LengthMismatch(f"estimate {est.shape} vs reference {ref.shape}")
    rr = np.dot(ref, ref)
    if rr == 0:
        raise SilentReference("reference signal is all zeros")
    target = (np.dot(est, ref) / rr) * ref
    return _db(np.dot(target, target), np.sum((est - target) ** 2))


class _Projector:
    """Least-squares projection onto delayed copies of a set of references."""

    def __init__(self, refs, flen):
        self.refs = refs
        self.flen = flen
        K, n = refs.shape
        self.nfft = int(2 ** np.ceil(np.log2(n + flen - 1)))
        self.R = np.fft.rfft(refs, self.nfft)
        # cross-correlations of every reference pair for lags -(flen-1)..flen-1
        G = np.zeros((K * flen, K * flen))
        for i in range(K):
            for j in range(i, K):
                xc = np.fft.irfft(np.conj(self.R[i]) * self.R[j], self.nfft)
                pos = xc[:flen]  # sum_t r_i(t) r_j(t + lag)
                neg = np.concatenate([[xc[0]], xc[::-1][: flen - 1]])
                block = scipy.linalg.toeplitz(pos, neg)
                G[i * flen : (i + 1) * flen, j * flen : (j + 1) * flen] = block
                G[j * flen : (j + 1) * flen, i * flen : (i + 1) * flen] = block.T
        ridge = 1e-10 * np.mean(np.diag(G))
        self.G = G + ridge * np.eye(K * flen)
        self._cho = {}

    def _factor(self, idx):
        key = tuple(idx)
        if key not in self._cho:
            sel = np.concatenate([np.arange(i * self.flen, (i + 1) * self.flen) for i in idx])
            self._cho[key] = (sel, scipy.linalg.cho_factor(self.G[np.ix_(sel, sel)]))
        return self._cho[key]

    def project(self, est, idx):
        """Projection of ``est`` (length n) onto references ``idx``; length n + flen - 1."""
        flen = self.flen
        E = np.fft.rfft(est, self.nfft)
        D = np.concatenate(
            [np.fft.irfft(np.conj(self.R[i]) * E, self.nfft)[:flen] for i in idx]
        )
        sel, cho = self._factor(idx)
        C = scipy.linalg.cho_solve(cho, D).reshape(len(idx), flen)
        out = sum(fftconvolve(self.refs[i], C[n]) for n, i in enumerate(idx))
        return out


def _decompose(proj, est, k):
    n = est.shape[0]
    padded = np.concatenate([est, np.zeros(proj.flen - 1)])
    s_target = proj.project(est, [k])
    p_all = proj.project(est, list(range(proj.refs.shape[0])))
    e_interf = p_all - s_target
    e_artif = padded - p_all
    sir = _db(np.sum(s_target**2), np.sum(e_interf**2))
    sdr = _db(np.sum(s_target**2), np.sum((e_interf + e_artif) ** 2))
    return sir, sdr


def bss_eval(estimates, references, flen=FILTER_LEN, permute=True):
    """SIR/SDR/SI-SDR of ``estimates`` (K, n) against ``references`` (K, n).

    With ``permute=True`` the assignment of estimates to references that
    maximizes the mean SIR is chosen among all K! permutations; otherwise
    estimate ``k`` is scored against reference ``k``.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    ref = np.atleast_2d(np.asarray(references, dtype=float))
    if est.shape != ref.shape:
        raise LengthMismatch(f"estimates {est.shape} vs references {ref.shape}")
    if np.any(np.all(ref == 0, axis=1)):
        raise SilentReference("a reference signal is all zeros")
    K = ref.shape[0]
    proj = _Projector(ref, flen)

    pairs = [(j, k) for j in range(K) for k in range(K)] if permute else [(k, k) for k in range(K)]
    sir = np.full((K, K), -np.inf)
    sdr = np.full((K, K), -np.inf)
    for j, k in pairs:
        sir[j, k], sdr[j, k] = _decompose(proj, est[j], k)

    if permute:
        perms = list(itertools.permutations(range(K)))
        best = max(perms, key=lambda p: np.mean([sir[p[k], k] for k in range(K)]))
    else:
        best = tuple(range(K))
    idx = np.arange(K)
    chosen = np.array(best)
    return EvalReport(
        sir=sir[chosen, idx],
        sdr=sdr[chosen, idx],
        si_sdr=np.array([si_sdr(est[best[k]], ref[k]) for k in range(K)]),
        perm=tuple(int(p) for p in best),
    )


def improvement(processed, unprocessed):
    """Attach per-source SIR/SDR deltas (processed minus unprocessed) and
    return ``(sir_delta_mean, sdr_delta_mean)``."""
    if tuple(processed.perm) != tuple(unprocessed.perm):
        warnings.warn(
            f"permutations differ: {processed.perm} vs {unprocessed.perm}", PermutationMismatch
        )
    processed.sir_delta = processed.sir - unprocessed.sir
    processed.sdr_delta = processed.sdr - unprocessed.sdr
    return float(np.mean(processed.sir_delta)), float(np.mean(processed.sdr_delta))


def evaluate_scenario(estimates, images, mixture):
    """Score estimates against each source's image at its reference mic.

    The unprocessed baseline scores microphone ``k`` against source ``k``.
    """
    K = images.shape[0]
    refs = images[np.arange(K), np.arange(K)]
    processed = bss_eval(estimates, refs)
    baseline = bss_eval(mixture[:K], refs, permute=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PermutationMismatch)
        improvement(processed, baseline)
    return processed


def report_rows(report, seed, algo, rt60_ms, failed=False):
    K = len(report.sir) if report is not None else 0
    rows = []
    for k in range(K):
        rows.append({
            "seed": seed,
            "algo": algo,
            "k": k,
            "sir_db": f"{report.sir[k]:.6f}",
            "sdr_db": f"{report.sdr[k]:.6f}",
            "si_sdr_db": f"{report.si_sdr[k]:.6f}",
            "sir_delta_db": f"{report.sir_delta[k]:.6f}" if report.sir_delta is not None else "",
            "sdr_delta_db": f"{report.sdr_delta[k]:.6f}" if report.sdr_delta is not None else "",
            "rt60_ms": rt60_ms,
            "n_sources": K,
            "failed": int(failed),
        })
    return rows


def failed_rows(seed, algo, rt60_ms, n_sources):
    return [
        {c: "" for c in CSV_COLUMNS} | {
            "seed": seed, "algo": algo, "k": k, "rt60_ms": rt60_ms,
            "n_sources": n_sources, "failed": 1,
        }
        for k in range(n_sources)
    ]


def write_csv(path, rows, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))
