"""Filtering, DPSS taper, and multitaper spectrogram tests.

scipy.signal.windows.dpss serves as the independent oracle for the taper
construction; the white-noise PSD level and known-sinusoid bin checks pin
the spectrogram normalization.
"""

import numpy as np
import pytest
from scipy.signal import windows

from clef import dsp
from clef.config import DspConfig
from clef.cohortgen import RawSession
from clef.errors import DataError


def _session(samples, fs=200.0, avail=None):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float32))
    if avail is None:
        avail = np.ones(samples.shape[0], dtype=bool)
    return RawSession(session_id="t", patient_id="p", samples=samples,
                      channel_available=np.asarray(avail, bool),
                      duration_s=samples.shape[1] / fs, sample_rate=fs)


# ---------------------------------------------------------------------------
# DPSS tapers


def test_dpss_retains_three_tapers():
    ts = dsp.compute_dpss(800, 2.0, 4, 0.9)
    assert ts.k == 3
    assert np.all(ts.concentrations > 0.9)
    assert np.all(np.diff(ts.concentrations) <= 0)


def test_dpss_orthonormal():
    ts = dsp.compute_dpss(800, 2.0, 4, 0.9)
    gram = ts.tapers @ ts.tapers.T
    assert np.abs(gram - np.eye(ts.k)).max() < 1e-8


def test_dpss_first_taper_positive_and_symmetric():
    ts = dsp.compute_dpss(800, 2.0, 4, 0.9)
    v0 = ts.tapers[0]
    assert np.all(v0 > 0)
    assert np.abs(v0 - v0[::-1]).max() < 1e-10


def test_dpss_matches_scipy_oracle():
    ts = dsp.compute_dpss(800, 2.0, 4, 0.9)
    ref, ratios = windows.dpss(800, 2.0, Kmax=ts.k, norm=2, return_ratios=True)
    for k in range(ts.k):
        v, r = ts.tapers[k], ref[k]
        if np.dot(v, r) < 0:
            r = -r
        assert np.abs(v - r).max() < 1e-6
        assert abs(ts.concentrations[k] - ratios[k]) < 1e-6


def test_dpss_various_lengths():
    for length in (256, 500, 1024):
        ts = dsp.compute_dpss(length, 2.5, 4, 0.9)
        gram = ts.tapers @ ts.tapers.T
        assert np.abs(gram - np.eye(ts.k)).max() < 1e-8


def test_dpss_rejects_bad_args():
    with pytest.raises(DataError):
        dsp.compute_dpss(4, 2.0, 4)
    with pytest.raises(DataError):
        dsp.compute_dpss(800, 0.0, 4)


# ---------------------------------------------------------------------------
# preprocessing


# the 0.1 Hz highpass has a multi-second transient; use long signals and
# judge the interior only
_TRIM_S = 20.0
_LEN_S = 60.0


def test_preprocess_removes_dc():
    fs = 200.0
    x = np.full(int(_LEN_S * fs), 5.0)
    out = dsp.preprocess(_session(x, fs), dsp.FilterSpec())
    trim = int(_TRIM_S * fs)
    assert np.abs(out.samples[0, trim:-trim]).max() < 1e-3


def test_preprocess_preserves_10hz_zero_phase():
    fs = 200.0
    t = np.arange(int(_LEN_S * fs)) / fs
    x = np.sin(2 * np.pi * 10.0 * t)
    out = dsp.preprocess(_session(x, fs), dsp.FilterSpec())
    trim = int(_TRIM_S * fs)
    y = out.samples[0, trim:-trim].astype(np.float64)
    ref = x[trim:-trim]
    # amplitude within 5% and no phase shift (forward-backward filtering)
    assert abs(np.abs(y).max() / np.abs(ref).max() - 1.0) < 0.05
    corr = np.dot(y, ref) / (np.linalg.norm(y) * np.linalg.norm(ref))
    assert corr > 0.999


def test_preprocess_attenuates_line_noise():
    fs = 200.0
    t = np.arange(int(_LEN_S * fs)) / fs
    x = np.sin(2 * np.pi * 60.0 * t)
    out = dsp.preprocess(_session(x, fs), dsp.FilterSpec())
    trim = int(_TRIM_S * fs)
    y = out.samples[0, trim:-trim].astype(np.float64)
    atten_db = 20 * np.log10(np.sqrt(np.mean(x[trim:-trim] ** 2))
                             / max(np.sqrt(np.mean(y ** 2)), 1e-12))
    assert atten_db >= 20.0


def test_preprocess_skips_unavailable_channels():
    fs = 200.0
    x = np.tile(np.full(int(10 * fs), 3.0, dtype=np.float32), (2, 1))
    sess = _session(x, fs, avail=[True, False])
    out = dsp.preprocess(sess, dsp.FilterSpec())
    assert np.array_equal(out.samples[1], x[1])
    assert not np.array_equal(out.samples[0], x[0])


def test_preprocess_rejects_nonfinite():
    x = np.zeros(4000, dtype=np.float32)
    x[100] = np.nan
    with pytest.raises(DataError):
        dsp.preprocess(_session(x), dsp.FilterSpec())


def test_notch_frequencies_respect_nyquist():
    spec = dsp.FilterSpec()
    assert spec.notch_frequencies(200.0) == [60.0]
    assert spec.notch_frequencies(500.0) == [60.0, 120.0, 180.0, 240.0]
    # 240 Hz sits exactly at a 480 Hz Nyquist: excluded by the margin
    assert spec.notch_frequencies(480.0) == [60.0, 120.0, 180.0]


# ---------------------------------------------------------------------------
# multitaper spectrogram


def _cfg(**kw) -> DspConfig:
    cfg = DspConfig()
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


def test_spectrogram_shape_paper_geometry():
    cfg = _cfg()
    n = int(1280.0 * cfg.sample_rate)
    assert cfg.n_frames(n) == 2048
    assert cfg.n_freq_bins == 128


def test_frame_count_sweep():
    cfg = _cfg()
    for n in (800, 925, 1050, 10_000, 256_000):
        assert cfg.n_frames(n) == n // cfg.stride
    assert cfg.n_frames(799) == 0


def test_sinusoid_lands_in_expected_bin():
    # 8 Hz at 0.25 Hz resolution falls in bin 32
    cfg = _cfg()
    fs = cfg.sample_rate
    t = np.arange(int(40 * fs)) / fs
    x = np.sin(2 * np.pi * 8.0 * t)
    ts = dsp.compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    spec = dsp.multitaper_spectrogram(_session(x, fs), ts, cfg)
    # exclude the trailing frames whose windows extend into the edge padding
    tail = -(-(cfg.window - cfg.stride) // cfg.stride) + 1
    interior = spec.values[0, :, 2:-tail]
    assert np.all(np.argmax(interior, axis=0) == 32)


def test_zero_signal_maps_to_floor():
    cfg = _cfg()
    x = np.zeros(int(10 * cfg.sample_rate), dtype=np.float32)
    ts = dsp.compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    spec = dsp.multitaper_spectrogram(_session(x, cfg.sample_rate), ts, cfg)
    assert np.all(spec.values == -1.0)


def test_white_noise_psd_level():
    # mean linear-power PSD of N(0, sigma^2) noise is sigma^2 / f_s
    cfg = _cfg()
    fs = cfg.sample_rate
    sigma = 3.0
    rng = np.random.default_rng(7)
    x = rng.normal(0.0, sigma, size=int(300 * fs))
    ts = dsp.compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    spec = dsp.multitaper_spectrogram(_session(x, fs), ts, cfg)
    span = (cfg.db_hi - cfg.db_lo) / 2.0
    mid = (cfg.db_hi + cfg.db_lo) / 2.0
    db = spec.values[0].astype(np.float64) * span + mid
    linear = 10.0 ** (db / 10.0)
    # skip the band-edge bins where rfft one-sidedness halves the power
    mean_psd = linear[1:-1].mean()
    expected = sigma ** 2 / fs
    assert abs(mean_psd / expected - 1.0) < 0.10


def test_values_bounded():
    cfg = _cfg()
    rng = np.random.default_rng(0)
    x = rng.normal(0.0, 500.0, size=(2, int(10 * cfg.sample_rate)))
    ts = dsp.compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    spec = dsp.multitaper_spectrogram(_session(x, cfg.sample_rate), ts, cfg)
    assert spec.values.min() >= -1.0 and spec.values.max() <= 1.0


def test_unavailable_channel_emits_floor():
    cfg = _cfg()
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, int(10 * cfg.sample_rate)))
    ts = dsp.compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    spec = dsp.multitaper_spectrogram(
        _session(x, cfg.sample_rate, avail=[False, True]), ts, cfg)
    assert np.all(spec.values[0] == -1.0)
    assert not np.all(spec.values[1] == -1.0)


def test_spectrogram_deterministic():
    cfg = _cfg()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, int(10 * cfg.sample_rate)))
    ts = dsp.compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    a = dsp.multitaper_spectrogram(_session(x, cfg.sample_rate), ts, cfg)
    b = dsp.multitaper_spectrogram(_session(x, cfg.sample_rate), ts, cfg)
    assert np.array_equal(a.values, b.values)


def test_short_session_rejected():
    cfg = _cfg()
    with pytest.raises(DataError):
        dsp.multitaper_spectrogram(
            _session(np.zeros(100)), dsp.compute_dpss(cfg.window, cfg.nw, 4), cfg)


def test_spectrogram_cache_roundtrip(tmp_path):
    cfg = _cfg()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, int(10 * cfg.sample_rate)))
    ts = dsp.compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.eigen_threshold)
    spec = dsp.multitaper_spectrogram(
        _session(x, cfg.sample_rate, avail=[True, False, True]), ts, cfg)
    path = tmp_path / "s.spc"
    dsp.write_spectrogram(path, spec)
    back = dsp.read_spectrogram(path)
    assert np.array_equal(back.values, spec.values)
    assert np.array_equal(back.channel_available, spec.channel_available)
    assert back.freq_res_hz == spec.freq_res_hz
    assert back.db_lo == spec.db_lo and back.db_hi == spec.db_hi


def test_cache_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.spc"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 100)
    with pytest.raises(DataError):
        dsp.read_spectrogram(path)
