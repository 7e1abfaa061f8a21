"""Shoebox room simulation with the image source method.

Impulse responses are stored as ``rirs[m, k, :]`` (microphone ``m``, source
``k``). Source images keep the same layout: ``images[k, m, :]`` is source
``k`` as heard by microphone ``m``.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, lfilter

from .errors import GeometryError, LengthMismatch, RirTooLong
from .stft import DEFAULT_FS, read_wav, write_wav

SPEED_OF_SOUND = 343.0
FD_TAPS = 8
EXPORT_PEAK = 0.9
REFLECTION_HPF_HZ = 50.0


def _sphere_directions(n=2048):
    # Fibonacci lattice, deterministic and near-uniform
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5**0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def calibrated_absorption(dims, rt60, c=SPEED_OF_SOUND):
    """Wall absorption that makes an image-method RIR decay 60 dB in ``rt60``.

    Along direction ``u`` an image at distance ``c t`` has undergone about
    ``c t sum_i |u_i| / L_i`` reflections, so its energy decays as
    ``exp(-g c t sum_i |u_i| / L_i)`` with ``g = -ln(1 - alpha)``. The
    Schroeder curve of the direction-averaged decay is solved for
    ``-60 dB`` at ``rt60``. Sabine/Eyring formulas assume a diffuse field
    and overestimate the decay rate of the image method in a shoebox.
    """
    from scipy.optimize import brentq

    u = _sphere_directions()
    rate = c * (np.abs(u) / np.asarray(dims, dtype=float)).sum(axis=1)

    def edc_db(g):
        gam = g * rate
        lead = gam.min()
        tail = np.exp(-(gam - lead) * rt60) / gam
        return 10 * np.log10(np.mean(tail) / np.mean(1.0 / gam)) - 10 * lead * rt60 / np.log(10)

    g = brentq(lambda g: edc_db(g) + 60.0, 1e-6, 100.0, xtol=1e-12)
    return float(1.0 - np.exp(-g))


@dataclass
class RoomSpec:
    """Rectangular room with omnidirectional sources and microphones.

    ``absorption`` overrides the wall absorption otherwise derived from
    ``rt60``; ``max_order`` bounds the image index along each axis.
    """

    dims: tuple
    rt60: float
    src_positions: np.ndarray
    mic_positions: np.ndarray
    max_order: int = None
    fs: int = DEFAULT_FS
    c: float = SPEED_OF_SOUND
    absorption: float = None

    def __post_init__(self):
        self.dims = tuple(float(d) for d in self.dims)
        self.src_positions = np.atleast_2d(np.asarray(self.src_positions, dtype=float))
        self.mic_positions = np.atleast_2d(np.asarray(self.mic_positions, dtype=float))

    @property
    def n_sources(self):
        return self.src_positions.shape[0]

    @property
    def n_mics(self):
        return self.mic_positions.shape[0]

    def validate(self):
        L = np.asarray(self.dims)
        if L.shape != (3,) or np.any(L <= 0):
            raise GeometryError(f"room dimensions must be three positive lengths, got {self.dims}")
        if not 0.05 <= self.rt60 <= 1.0:
            raise GeometryError(f"rt60 {self.rt60} s outside [0.05, 1.0]")
        if self.n_sources != self.n_mics:
            raise GeometryError(
                f"determined case needs as many mics as sources ({self.n_mics} vs {self.n_sources})"
            )
        for name, pos in (("source", self.src_positions), ("microphone", self.mic_positions)):
            if pos.shape[1] != 3:
                raise GeometryError(f"{name} positions must be 3-D points")
            if np.any(pos <= 0) or np.any(pos >= L):
                raise GeometryError(f"a {name} lies outside the room")
        d = np.linalg.norm(self.src_positions[:, None] - self.mic_positions[None], axis=-1)
        if np.any(d < 1e-3):
            raise GeometryError("a source coincides with a microphone")

    def wall_reflection(self):
        """Uniform pressure reflection coefficient of the walls."""
        if self.absorption is not None:
            alpha = self.absorption
        else:
            alpha = calibrated_absorption(self.dims, self.rt60, self.c)
        return float(np.sqrt(max(0.0, 1.0 - alpha)))

    def image_order(self):
        if self.max_order is not None:
            return int(self.max_order)
        return int(np.ceil(self.c * self.rt60 / min(self.dims))) + 1

    def default_length(self):
        return int(np.ceil(1.5 * self.rt60 * self.fs))


@dataclass
class Scenario:
    room: RoomSpec
    rirs: np.ndarray
    dry: np.ndarray
    images: np.ndarray
    mixture: np.ndarray
    seed: int = 0
    fs: int = DEFAULT_FS
    meta: dict = field(default_factory=dict)

    @property
    def n_sources(self):
        return self.dry.shape[0]


def _frac_delay_taps(tau):
    # 8-tap Hann-windowed sinc centred on each (fractional) delay
    base = np.floor(tau).astype(int) - FD_TAPS // 2 + 1
    n = base[:, None] + np.arange(FD_TAPS)[None, :]
    x = n - tau[:, None]
    h = np.sinc(x) * (0.5 + 0.5 * np.cos(np.pi * x / (FD_TAPS / 2)))
    return n, h


def _axis_images(src, mic, L, order, beta):
    n = np.arange(-order, order + 1)
    # image coordinate (1 - 2p) * src + 2 n L, reflections |n - p| + |n|
    diff = np.concatenate([src + 2 * n * L - mic, -src + 2 * n * L - mic])
    refl = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
    return diff, beta ** refl.astype(float)


def _single_rir(src, mic, room, length, beta, order):
    fs, c = room.fs, room.c
    ax = [_axis_images(src[i], mic[i], room.dims[i], order, beta) for i in range(3)]
    (dx, gx), (dy, gy), (dz, gz) = ax
    dyz2 = dy[:, None] ** 2 + dz[None, :] ** 2
    gyz = gy[:, None] * gz[None, :]
    max_dist = c * (length + FD_TAPS) / fs

    h = np.zeros(length + FD_TAPS)
    for x, g in zip(dx, gx):
        d2 = x * x + dyz2
        keep = d2 < max_dist**2
        if not np.any(keep):
            continue
        d = np.sqrt(d2[keep])
        amp = g * gyz[keep] / (4.0 * np.pi * d)
        h += _place(d / c * fs, amp, h.size, length)

    if order > 0:
        # Reflections all arrive with positive sign and pile up coherently at
        # low frequencies, which stretches the measured decay. High-pass the
        # reflected field only; the direct path stays an exact free-field tap.
        d0 = np.linalg.norm(np.asarray(src) - np.asarray(mic))
        direct = _place(np.array([d0 / c * fs]), np.array([1.0 / (4.0 * np.pi * d0)]), h.size, length)
        b, a = butter(2, REFLECTION_HPF_HZ / (fs / 2), "high")
        h = direct + lfilter(b, a, h - direct)
    return h[:length]


def _place(tau, amp, size, length):
    idx, taps = _frac_delay_taps(tau)
    ok = (idx >= 0) & (idx < length)
    return np.bincount(idx[ok], weights=(taps * amp[:, None])[ok], minlength=size)


def simulate_rir(room, length=None):
    """Image-source impulse responses, shape (n_mics, n_sources, length).

    The direct path of each pair carries the free-field gain ``1/(4 pi d)``;
    no normalization is applied.
    """
    room.validate()
    if length is None:
        length = room.default_length()
    beta = room.wall_reflection()
    order = room.image_order()
    rirs = np.zeros((room.n_mics, room.n_sources, int(length)))
    for m in range(room.n_mics):
        for k in range(room.n_sources):
            rirs[m, k] = _single_rir(
                room.src_positions[k], room.mic_positions[m], room, int(length), beta, order
            )
    return rirs


def convolve_mix(dry, rirs, room=None, seed=0, fs=DEFAULT_FS):
    """Convolve dry sources with their impulse responses and sum.

    Parameters
    ----------
    dry : ndarray, shape (K, n)
    rirs : ndarray, shape (M, K, L)

    Returns
    -------
    Scenario
        ``images`` has shape (K, M, n) (convolution tails are cut to the dry
        length) and ``mixture = images.sum(axis=0)``.
    """
    dry = np.atleast_2d(np.asarray(dry, dtype=float))
    rirs = np.asarray(rirs, dtype=float)
    if rirs.ndim != 3 or rirs.shape[1] != dry.shape[0]:
        raise LengthMismatch(
            f"rirs of shape {rirs.shape} do not match {dry.shape[0]} dry sources"
        )
    K, n = dry.shape
    M = rirs.shape[0]
    images = np.zeros((K, M, n))
    for k in range(K):
        if not np.any(dry[k]):
            continue
        for m in range(M):
            if np.any(rirs[m, k]):
                images[k, m] = fftconvolve(dry[k], rirs[m, k])[:n]
    mixture = images.sum(axis=0)
    return Scenario(room=room, rirs=rirs, dry=dry, images=images, mixture=mixture, seed=seed, fs=fs)


def narrowband_mixing_matrix(rirs, frame_size):
    """Per-bin mixing matrices ``A(f)`` from zero-padded RIR DFTs.

    Returns an array of shape (frame_size // 2 + 1, M, K); column ``k`` of
    ``A[f]`` is the transfer-function vector of source ``k``.
    """
    rirs = np.asarray(rirs)
    if rirs.shape[-1] > frame_size:
        raise RirTooLong(
            f"RIR length {rirs.shape[-1]} exceeds frame size {frame_size}; truncate first"
        )
    A = np.fft.rfft(rirs, n=frame_size, axis=-1)
    return np.ascontiguousarray(A.transpose(2, 0, 1))


# --- synthetic sources -----------------------------------------------------


def synthetic_speech(n, fs, rng):
    """Speech-like test signal: syllable bursts of voiced/unvoiced excitation.

    Each burst gets its own pitch, two resonances and a level; bursts are
    separated by pauses so the frame variance fluctuates strongly, which is
    what independence-based separation relies on.
    """
    out = np.zeros(n)
    pos = 0
    while pos < n:
        seg = int(rng.uniform(0.08, 0.35) * fs)
        end = min(n, pos + seg)
        m = end - pos
        if rng.random() < 0.75:
            if rng.random() < 0.7:
                f0 = rng.uniform(90.0, 250.0)
                phase = np.cumsum(np.full(m, f0 / fs) * (1 + 0.05 * np.sin(np.linspace(0, 3, m))))
                exc = (np.diff(np.floor(phase), prepend=0.0) > 0).astype(float)
                exc += 0.05 * rng.standard_normal(m)
            else:
                exc = rng.standard_normal(m)
            y = exc
            for fc in rng.uniform([250.0, 900.0], [900.0, 3200.0]):
                r = 0.97
                th = 2 * np.pi * fc / fs
                y = lfilter([1.0 - r], [1.0, -2 * r * np.cos(th), r * r], y)
            env = np.hanning(m + 2)[1:-1] if m > 2 else np.ones(m)
            y = y * env
            y /= np.sqrt(np.mean(y**2)) + 1e-12
            out[pos:end] = y * np.exp(rng.normal(0.0, 0.5))
        pos = end
    out += 1e-3 * rng.standard_normal(n)
    return out / np.sqrt(np.mean(out**2))


def random_room(n_sources, rt60, rng, dims=(4.0, 4.0, 3.0), spacing=0.02,
                radius=(1.0, 1.5), min_separation_deg=30.0, fs=DEFAULT_FS):
    """Linear array near the room centre, sources on a random circle arc.

    Source azimuths are uniform on the circle, redrawn until all pairs are at
    least ``min_separation_deg`` apart; each source gets its own radius.
    """
    L = np.asarray(dims, dtype=float)
    center = np.array([L[0] / 2, L[1] / 2, 1.4]) + rng.uniform(-0.1, 0.1, 3) * [1, 1, 0]
    offsets = (np.arange(n_sources) - (n_sources - 1) / 2) * spacing
    mics = center + offsets[:, None] * np.array([1.0, 0.0, 0.0])

    for _ in range(1000):
        az = rng.uniform(0.0, 2 * np.pi, n_sources)
        gaps = np.abs((az[:, None] - az[None, :] + np.pi) % (2 * np.pi) - np.pi)
        np.fill_diagonal(gaps, np.inf)
        if np.degrees(gaps.min()) >= min_separation_deg:
            break
    r = rng.uniform(radius[0], radius[1], n_sources)
    srcs = center + np.stack([r * np.cos(az), r * np.sin(az), np.zeros(n_sources)], axis=1)
    return RoomSpec(dims=tuple(L), rt60=float(rt60), src_positions=srcs, mic_positions=mics, fs=fs)


def make_scenario(seed, n_sources=2, rt60=0.3, duration=8.0, fs=DEFAULT_FS, rir_length=None):
    """Fully seeded desk-scale scenario: random room, ISM RIRs, synthetic speech."""
    rng = np.random.default_rng(seed)
    room = random_room(n_sources, rt60, rng, fs=fs)
    n = int(duration * fs)
    dry = np.stack([synthetic_speech(n, fs, rng) for _ in range(n_sources)])
    rirs = simulate_rir(room, length=rir_length)
    scn = convolve_mix(dry, rirs, room=room, seed=seed, fs=fs)
    return scn


# --- export / import -------------------------------------------------------


def _fmt(v):
    a = np.asarray(v, dtype=float).ravel()
    return " ".join(repr(float(x)) for x in a)


def export_scenario(scn, directory):
    """Write a scenario directory.

    Layout: ``dry_k.wav``, ``image_k.wav`` (M channels), ``mixture.wav``,
    ``rirs.wav`` (M*K channels, channel ``m*K + k``) and ``meta.txt``.
    Audio is peak-normalized to 0.9 with one common gain so that the images
    still sum to the mixture; the gain is recorded in the meta file. RIRs are
    written unscaled. All WAVs are 32-bit float.
    """
    os.makedirs(directory, exist_ok=True)
    peak = np.max(np.abs(scn.mixture))
    gain = EXPORT_PEAK / peak if peak > 0 else 1.0
    K, M = scn.images.shape[:2]
    for k in range(K):
        write_wav(os.path.join(directory, f"dry_{k}.wav"), scn.dry[k] * gain, scn.fs)
        write_wav(os.path.join(directory, f"image_{k}.wav"), scn.images[k] * gain, scn.fs)
    write_wav(os.path.join(directory, "mixture.wav"), scn.mixture * gain, scn.fs)
    write_wav(os.path.join(directory, "rirs.wav"), scn.rirs.reshape(M * K, -1), scn.fs)

    room = scn.room
    lines = [
        f"fs = {scn.fs}",
        f"seed = {scn.seed}",
        f"n_sources = {K}",
        f"gain = {float(gain)!r}",
    ]
    if room is not None:
        lines += [
            f"dims = {_fmt(room.dims)}",
            f"rt60 = {room.rt60!r}",
            f"rt60_ms = {int(round(room.rt60 * 1000))}",
            f"src_positions = {_fmt(room.src_positions)}",
            f"mic_positions = {_fmt(room.mic_positions)}",
            f"max_order = {room.image_order()}",
        ]
    for key, value in scn.meta.items():
        lines.append(f"{key} = {value}")
    with open(os.path.join(directory, "meta.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_meta(path):
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def load_scenario(directory):
    """Read a directory written by :func:`export_scenario`.

    Signals are returned at the exported (normalized) level.
    """
    meta = read_meta(os.path.join(directory, "meta.txt"))
    K = int(meta["n_sources"])
    fs = int(meta["fs"])
    dry = np.stack([read_wav(os.path.join(directory, f"dry_{k}.wav"))[0][0] for k in range(K)])
    images = np.stack([read_wav(os.path.join(directory, f"image_{k}.wav"))[0] for k in range(K)])
    mixture, _ = read_wav(os.path.join(directory, "mixture.wav"))
    rirs, _ = read_wav(os.path.join(directory, "rirs.wav"))
    M = images.shape[1]
    room = None
    if "dims" in meta:
        room = RoomSpec(
            dims=[float(v) for v in meta["dims"].split()],
            rt60=float(meta["rt60"]),
            src_positions=np.array(meta["src_positions"].split(), dtype=float).reshape(K, 3),
            mic_positions=np.array(meta["mic_positions"].split(), dtype=float).reshape(M, 3),
            max_order=int(meta["max_order"]),
            fs=fs,
        )
    return Scenario(
        room=room,
        rirs=rirs.reshape(M, K, -1),
        dry=dry,
        images=images,
        mixture=mixture,
        seed=int(meta.get("seed", 0)),
        fs=fs,
        meta=meta,
    )
