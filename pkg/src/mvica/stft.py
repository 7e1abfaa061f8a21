"""Short-time Fourier analysis/synthesis and WAV file helpers.

Spectrogram data is laid out as ``(channel, frequency, frame)``. Analysis and
synthesis both use a square-root periodic Hann window; at 50 % overlap the
product of the two windows sums to one, so overlap-add reconstructs the
input exactly (up to rounding) away from the outermost half frame.
"""

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import BadGeometry, EmptySignal

DEFAULT_FS = 16000
DEFAULT_FRAME = 4096


def sqrt_hann(n):
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n))


@dataclass
class Spectrogram:
    """Multichannel one-sided STFT.

    Attributes
    ----------
    data : ndarray, shape (K, frame_size // 2 + 1, n_frames), complex
    frame_size, hop : int
    sample_rate : int
    n_samples : int
        Length of the analyzed waveform, used to trim the synthesis output.
    """

    data: np.ndarray
    frame_size: int
    hop: int
    sample_rate: int = DEFAULT_FS
    n_samples: int = 0
    window: str = "sqrt-hann"

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_freq(self):
        return self.data.shape[1]

    @property
    def n_frames(self):
        return self.data.shape[2]

    def with_data(self, data):
        """Same geometry, new coefficients (e.g. a demixed output)."""
        return Spectrogram(
            np.asarray(data), self.frame_size, self.hop, self.sample_rate, self.n_samples, self.window
        )


def _check_geometry(frame_size, hop):
    if frame_size < 2 or frame_size & (frame_size - 1):
        raise BadGeometry(f"frame_size must be a power of two, got {frame_size}")
    if hop < 1 or frame_size % hop:
        raise BadGeometry(f"hop {hop} must divide frame_size {frame_size}")


def analyze(w, frame_size=DEFAULT_FRAME, hop=None, sample_rate=DEFAULT_FS):
    """STFT of a (K, n_samples) or (n_samples,) waveform.

    ``frame_size // 2`` zeros are padded on the left and the right side is
    padded up to a whole number of frames plus another half frame.
    """
    if hop is None:
        hop = frame_size // 2
    _check_geometry(frame_size, hop)
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[None, :]
    n = w.shape[-1]
    if n == 0:
        raise EmptySignal("cannot analyze an empty signal")

    pad = frame_size // 2
    n_frames = int(np.ceil((n + 2 * pad - frame_size) / hop)) + 1
    total = (n_frames - 1) * hop + frame_size
    buf = np.zeros((w.shape[0], total))
    buf[:, pad : pad + n] = w

    frames = np.lib.stride_tricks.sliding_window_view(buf, frame_size, axis=-1)[:, ::hop]
    spec = np.fft.rfft(frames * sqrt_hann(frame_size), axis=-1)
    return Spectrogram(
        np.ascontiguousarray(spec.transpose(0, 2, 1)), frame_size, hop, sample_rate, n
    )


def synthesize(S):
    """Inverse of :func:`analyze` by weighted overlap-add.

    Returns an array of shape (K, S.n_samples).
    """
    _check_geometry(S.frame_size, S.hop)
    data = np.asarray(S.data)
    if data.shape[1] != S.frame_size // 2 + 1:
        raise BadGeometry(
            f"{data.shape[1]} bins do not match frame_size {S.frame_size}"
        )
    data = data.copy()
    # DC and Nyquist of a real signal carry no imaginary part
    data[:, 0, :] = data[:, 0, :].real
    data[:, -1, :] = data[:, -1, :].real

    K, _, T = data.shape
    N, H = S.frame_size, S.hop
    win = sqrt_hann(N)
    frames = np.fft.irfft(data.transpose(0, 2, 1), n=N, axis=-1) * win

    total = (T - 1) * H + N
    out = np.zeros((K, total))
    norm = np.zeros(total)
    for t in range(T):
        out[:, t * H : t * H + N] += frames[:, t]
        norm[t * H : t * H + N] += win**2

    pad = N // 2
    n = S.n_samples if S.n_samples else total - 2 * pad
    seg = slice(pad, pad + n)
    nz = norm[seg]
    if np.any(nz < 1e-12):
        raise BadGeometry("window/hop pair leaves gaps in the overlap-add")
    return out[:, seg] / nz


def read_wav(path):
    """Read a WAV file as float64 with shape (channels, samples).

    16-bit PCM is scaled to [-1, 1); float files are returned unchanged.
    """
    fs, x = wavfile.read(path)
    if x.dtype == np.int16:
        x = x.astype(float) / 32768.0
    elif x.dtype == np.int32:
        x = x.astype(float) / 2147483648.0
    else:
        x = x.astype(float)
    if x.ndim == 1:
        x = x[:, None]
    return np.ascontiguousarray(x.T), int(fs)


def write_wav(path, x, fs=DEFAULT_FS, fmt="float32"):
    """Write a (channels, samples) array; ``fmt`` is ``"float32"`` or ``"pcm16"``."""
    x = np.atleast_2d(np.asarray(x, dtype=float)).T
    if fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif fmt == "float32":
        data = x.astype("<f4")
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(path, int(fs), data)
