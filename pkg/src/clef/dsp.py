"""Signal preprocessing and multitaper spectrogram computation.

The front end of the whole pipeline: zero-phase IIR band-pass plus notch
cascade, DPSS (Slepian) tapers from the symmetric tridiagonal operator, and
an eigenvalue-weighted multitaper spectrogram normalized into [-1, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.linalg import eigh_tridiagonal

from .config import DspConfig
from .errors import DataError


@dataclass
class FilterSpec:
    band_lo_hz: float = 0.1
    band_hi_hz: float = 75.0
    order: int = 4
    notch_base_hz: float = 60.0
    notch_q: float = 30.0
    nyquist_margin_hz: float = 2.0
    zero_phase: bool = True

    @classmethod
    def from_config(cls, cfg: DspConfig) -> "FilterSpec":
        return cls(band_lo_hz=cfg.band_lo_hz, band_hi_hz=cfg.band_hi_hz,
                   order=cfg.bandpass_order, notch_base_hz=cfg.notch_base_hz,
                   notch_q=cfg.notch_q,
                   nyquist_margin_hz=cfg.notch_nyquist_margin_hz)

    def notch_frequencies(self, sample_rate: float) -> list[float]:
        """Line-noise harmonics strictly below Nyquist.

        Notches within ``nyquist_margin_hz`` of Nyquist are excluded: a notch
        at the folding frequency itself is degenerate.
        """
        nyq = sample_rate / 2.0
        out = []
        f = self.notch_base_hz
        while f < nyq - self.nyquist_margin_hz:
            out.append(f)
            f += self.notch_base_hz
        return out


@dataclass
class TaperSet:
    tapers: np.ndarray          # (K, L), rows orthonormal
    concentrations: np.ndarray  # (K,), sorted descending, each > threshold
    nw: float

    @property
    def k(self) -> int:
        return self.tapers.shape[0]

    @property
    def length(self) -> int:
        return self.tapers.shape[1]


@dataclass
class Spectrogram:
    values: np.ndarray           # (C, H, W) in [-1, 1]
    freq_res_hz: float
    frame_stride_s: float
    channel_available: np.ndarray  # (C,) bool
    db_lo: float = -40.0
    db_hi: float = 40.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


def _filter_cascade(spec: FilterSpec, sample_rate: float) -> np.ndarray:
    """Band-pass then notch sections, as a single sos cascade."""
    sos = signal.butter(spec.order, [spec.band_lo_hz, spec.band_hi_hz],
                        btype="bandpass", fs=sample_rate, output="sos")
    for f0 in spec.notch_frequencies(sample_rate):
        b, a = signal.iirnotch(f0, spec.notch_q, fs=sample_rate)
        sos = np.vstack([sos, signal.tf2sos(b, a)])
    return sos


def preprocess(session, spec: FilterSpec):
    """Zero-phase (forward-backward) filtering of every available channel.

    Returns a new session of identical shape; unavailable channels are passed
    through untouched.
    """
    samples = np.asarray(session.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise DataError(f"session {session.session_id}: non-finite samples")
    sos = _filter_cascade(spec, session.sample_rate)
    # the low-edge highpass has a multi-second time constant; pad generously
    padlen = min(samples.shape[1] - 1,
                 int(3.0 * session.sample_rate / max(spec.band_lo_hz, 1e-3)))
    out = samples.copy()
    for c in range(samples.shape[0]):
        if session.channel_available[c]:
            out[c] = signal.sosfiltfilt(sos, samples[c], padlen=padlen)
    return session.replace_samples(out.astype(np.float32))


def compute_dpss(length: int, nw: float, k_max: int,
                 retain_threshold: float = 0.9) -> TaperSet:
    """Discrete prolate spheroidal sequences.

    Tapers are eigenvectors of the standard symmetric tridiagonal Slepian
    operator, re-orthonormalized; concentrations are computed directly
    against the ideal band-limiting (sinc) kernel.  Exactly the tapers with
    concentration > ``retain_threshold`` are kept, capped at ``k_max``.
    """
    if length < 8:
        raise DataError(f"taper length {length} < 8")
    if not 0.0 < nw < length / 2.0:
        raise DataError(f"time-halfbandwidth {nw} outside (0, {length / 2})")
    w = nw / length
    n = np.arange(length)
    diag = ((length - 1 - 2.0 * n) / 2.0) ** 2 * np.cos(2.0 * np.pi * w)
    off = n[1:] * (length - n[1:]) / 2.0
    # top k_max eigenvectors of the tridiagonal commuting operator
    _, vecs = eigh_tridiagonal(
        diag, off, select="i", select_range=(length - k_max, length - 1))
    tapers = vecs[:, ::-1].T                     # (k_max, L), best first
    # re-orthonormalize (QR polish) and fix sign conventions
    q, r = np.linalg.qr(tapers.T)
    tapers = (q * np.sign(np.diag(r))).T
    for k in range(tapers.shape[0]):
        v = tapers[k]
        if k % 2 == 0:                           # symmetric: positive mean
            if v.sum() < 0:
                tapers[k] = -v
        else:                                    # antisymmetric: positive start
            if v[: length // 2].sum() < 0:
                tapers[k] = -v
    # concentration against the ideal [-W, W] band-limiting kernel
    concentrations = np.empty(tapers.shape[0])
    diff = n[:, None] - n[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        kernel = np.sin(2.0 * np.pi * w * diff) / (np.pi * diff)
    kernel[np.arange(length), np.arange(length)] = 2.0 * w
    for k, v in enumerate(tapers):
        concentrations[k] = v @ kernel @ v
    order = np.argsort(concentrations)[::-1]
    tapers, concentrations = tapers[order], concentrations[order]
    keep = concentrations > retain_threshold
    tapers, concentrations = tapers[keep][:k_max], concentrations[keep][:k_max]
    return TaperSet(tapers=np.ascontiguousarray(tapers),
                    concentrations=concentrations, nw=nw)


def multitaper_spectrogram(session, tapers: TaperSet, cfg: DspConfig) -> Spectrogram:
    """Eigenvalue-weighted multitaper power, in dB, clamped into [-1, 1].

    Per frame and channel: P(f) = sum_k lam_k |FFT(x v_k)(f)|^2
    / (sum_k lam_k * f_s), then 10 log10(P + eps) mapped linearly from
    [db_lo, db_hi] onto [-1, 1] with a hard clamp.
    """
    samples = np.asarray(session.samples, dtype=np.float64)
    n_ch, t = samples.shape
    if t < cfg.window:
        raise DataError(
            f"session {session.session_id}: {t} samples < one window ({cfg.window})")
    if tapers.length != cfg.window:
        raise DataError(f"taper length {tapers.length} != window {cfg.window}")
    n_frames = cfg.n_frames(t)
    n_bins = cfg.n_freq_bins
    lam = tapers.concentrations
    norm = lam.sum() * cfg.sample_rate
    values = np.full((n_ch, n_bins, n_frames), -1.0, dtype=np.float32)
    span = (cfg.db_hi - cfg.db_lo) / 2.0
    mid = (cfg.db_hi + cfg.db_lo) / 2.0
    # edge-pad the tail so every frame start i*stride has a full window
    pad = (n_frames - 1) * cfg.stride + cfg.window - t
    if pad > 0:
        samples = np.pad(samples, ((0, 0), (0, pad)), mode="edge")
    for c in range(n_ch):
        if not session.channel_available[c]:
            continue  # emits the clamp floor; mask plane is authoritative
        frames = np.lib.stride_tricks.sliding_window_view(
            samples[c], cfg.window)[:: cfg.stride][:n_frames]  # (W, window)
        power = np.zeros((n_frames, n_bins))
        for k in range(tapers.k):  # fixed summation order: deterministic
            spec = np.fft.rfft(frames * tapers.tapers[k], n=cfg.window, axis=1)
            power += lam[k] * np.abs(spec[:, :n_bins]) ** 2
        power /= norm
        db = 10.0 * np.log10(power + cfg.power_floor)
        values[c] = np.clip((db - mid) / span, -1.0, 1.0).T.astype(np.float32)
    return Spectrogram(values=values, freq_res_hz=cfg.freq_res_hz,
                       frame_stride_s=cfg.stride / cfg.sample_rate,
                       channel_available=np.asarray(session.channel_available, bool),
                       db_lo=cfg.db_lo, db_hi=cfg.db_hi)


def session_spectrogram(session, cfg: DspConfig,
                        tapers: TaperSet | None = None) -> Spectrogram:
    """Preprocess + multitaper in one call (the standard path)."""
    if tapers is None:
        tapers = compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    filtered = preprocess(session, FilterSpec.from_config(cfg))
    return multitaper_spectrogram(filtered, tapers, cfg)


# ---------------------------------------------------------------------------
# spectrogram cache file format

_SPC_MAGIC = b"CLEFSPC1"
_SPC_HEADER = struct.Struct("<8sIIIffffI20x")  # 64 bytes


def write_spectrogram(path, spec: Spectrogram) -> None:
    c, h, w = spec.values.shape
    mask = 0
    for i, ok in enumerate(spec.channel_available):
        if ok:
            mask |= 1 << i
    header = _SPC_HEADER.pack(_SPC_MAGIC, c, h, w, spec.freq_res_hz,
                              spec.frame_stride_s, spec.db_lo, spec.db_hi, mask)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(spec.values, dtype="<f4").tobytes())


def read_spectrogram(path) -> Spectrogram:
    with open(path, "rb") as fh:
        raw = fh.read(_SPC_HEADER.size)
        if len(raw) < _SPC_HEADER.size:
            raise DataError(f"{path}: truncated spectrogram header")
        magic, c, h, w, fres, stride_s, db_lo, db_hi, mask = _SPC_HEADER.unpack(raw)
        if magic != _SPC_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        values = np.frombuffer(fh.read(c * h * w * 4), dtype="<f4")
        if values.size != c * h * w:
            raise DataError(f"{path}: truncated spectrogram payload")
    avail = np.array([(mask >> i) & 1 == 1 for i in range(c)])
    return Spectrogram(values=values.reshape(c, h, w).copy(), freq_res_hz=fres,
                       frame_stride_s=stride_s, channel_available=avail,
                       db_lo=db_lo, db_hi=db_hi)
