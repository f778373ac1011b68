"""Cohort generator tests: determinism, planted band power, EHR/report
consistency, and the waveform file format."""

import numpy as np
import pytest

from clef import cohortgen, dsp
from clef.config import CohortConfig, DspConfig
from clef.errors import DataError


def _small_cfg(n=24, duration=40.0):
    return CohortConfig(n_patients=n, duration_s=duration)


def test_records_deterministic():
    cfg = _small_cfg()
    a, _ = cohortgen.generate_records(cfg, seed=5)
    b, _ = cohortgen.generate_records(cfg, seed=5)
    for ra, rb in zip(a, b):
        assert ra == rb
    c, _ = cohortgen.generate_records(cfg, seed=6)
    assert any(ra != rc for ra, rc in zip(a, c))


def test_sessions_deterministic_and_streaming_equivalent():
    cfg = _small_cfg(n=6)
    records, sessions, phenos = cohortgen.generate_cohort(cfg, seed=3)
    streamed = list(cohortgen.iter_sessions(cfg, 3, records, phenos))
    for s, t in zip(sessions, streamed):
        assert np.array_equal(s.samples, t.samples)
        assert np.array_equal(s.channel_available, t.channel_available)
        assert s.session_day == t.session_day


def test_session_geometry():
    cfg = _small_cfg(n=4)
    _, sessions, _ = cohortgen.generate_cohort(cfg, seed=1)
    for s in sessions:
        assert s.samples.shape == (cfg.n_channels, int(cfg.duration_s * cfg.sample_rate))
        assert s.samples.dtype == np.float32
        assert s.channel_available.any()
        assert np.all(np.isfinite(s.samples))


def _band_power_db(x, fs, lo, hi):
    spec = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size, 1.0 / fs)
    band = (freqs >= lo) & (freqs < hi)
    return 10.0 * np.log10(spec[band].mean())


def test_planted_band_effects_measurable():
    """A visible phenotype shifts band power by its planted dB within 1.5 dB;
    a sub-threshold phenotype stays below the 3 dB visibility line."""
    cfg = _small_cfg(n=1, duration=120.0)
    phenos = cohortgen.default_phenotypes(cfg.channel_names)
    by_name = {p.name: p for p in phenos}
    rng0 = np.random.default_rng(11)
    rng1 = np.random.default_rng(11)
    base = cohortgen.synthesize_signal(cfg, [], rng0)
    for name in ("delta_surge", "theta_shift"):
        p = by_name[name]
        rng = np.random.default_rng(11)
        shifted = cohortgen.synthesize_signal(cfg, [p], rng)
        eff = p.spectral_effects[0]
        ch = cfg.channel_names.index(eff.channels[0])
        delta = (_band_power_db(shifted[ch], cfg.sample_rate, eff.band_lo_hz, eff.band_hi_hz)
                 - _band_power_db(base[ch], cfg.sample_rate, eff.band_lo_hz, eff.band_hi_hz))
        assert abs(delta - eff.power_delta_db) < 1.5
    assert by_name["delta_surge"].max_abs_delta_db >= 6.0
    assert by_name["theta_shift"].max_abs_delta_db < 3.0
    rng1 = None


def test_visible_effect_survives_spectrogram():
    # the 7 dB delta plant must be readable off the standard spectrogram
    cfg = _small_cfg(n=1, duration=60.0)
    phenos = cohortgen.default_phenotypes(cfg.channel_names)
    delta = next(p for p in phenos if p.name == "delta_surge")
    dcfg = DspConfig(stride=1000, band_top_hz=16.0)
    rng = np.random.default_rng(9)
    base = cohortgen.synthesize_signal(cfg, [], rng)
    rng = np.random.default_rng(9)
    shifted = cohortgen.synthesize_signal(cfg, [delta], rng)

    def band_mean(x):
        sess = cohortgen.RawSession("s", "p", x, np.ones(cfg.n_channels, bool),
                                    cfg.duration_s)
        spec = dsp.session_spectrogram(sess, dcfg)
        bins = slice(int(1.0 / dcfg.freq_res_hz), int(4.0 / dcfg.freq_res_hz))
        return spec.values[:, bins, :].mean()

    span = (dcfg.db_hi - dcfg.db_lo) / 2.0
    gain_db = (band_mean(shifted) - band_mean(base)) * span
    assert gain_db > 4.0


def test_phenotype_prevalence_plausible():
    cfg = _small_cfg(n=300, duration=40.0)
    records, phenos = cohortgen.generate_records(cfg, seed=2)
    for p in phenos:
        rate = np.mean([p.name in r.phenotypes for r in records])
        # binomial 99.9% band around 0.2 with n=300
        assert abs(rate - p.prevalence) < 0.08


def test_report_fraction_and_content():
    cfg = _small_cfg(n=300)
    records, phenos = cohortgen.generate_records(cfg, seed=4)
    frac = np.mean([r.report is not None for r in records])
    assert abs(frac - cfg.report_fraction) < 0.09
    for r in records:
        if r.report is None:
            continue
        for p in phenos:
            if p.name in r.phenotypes:
                assert any(ph in r.report for ph in p.report_phrases)
            else:
                # absent phenotypes appear only under negation, if at all
                for ph in p.report_phrases:
                    if ph in r.report:
                        assert f"no {ph}" in r.report
        if not r.phenotypes:
            assert "normal study" in r.report


def test_ehr_codes_consistent_with_phenotypes():
    cfg = _small_cfg(n=100)
    records, phenos = cohortgen.generate_records(cfg, seed=7)
    for r in records:
        for p in phenos:
            if p.name in r.phenotypes:
                assert set(p.dx_codes) <= r.diagnoses
                assert set(p.med_codes) <= r.medications
        # every diagnosis has at least one event behind it
        event_codes = {e.code for e in r.diagnosis_events}
        assert r.diagnoses <= event_codes


def test_vocabularies_fit_config():
    cfg = _small_cfg()
    phenos = cohortgen.default_phenotypes(cfg.channel_names)
    dx, med = cohortgen.vocabularies(cfg, phenos)
    assert len(dx) == len(set(dx)) and len(med) == len(set(med))
    assert len(dx) <= 24 and len(med) <= 24


def test_phenotype_validation():
    cfg = _small_cfg()
    bad = cohortgen.PhenotypeSpec(
        name="bad", spectral_effects=(
            cohortgen.SpectralEffect(10.0, 500.0, ("Fp1",), 3.0),),
        dx_codes=("dx_x",), med_codes=("med_x",),
        report_phrases=("x",), prevalence=0.1)
    with pytest.raises(DataError):
        cohortgen.generate_records(cfg, seed=0, phenotypes=[bad])
    with pytest.raises(DataError):
        cohortgen.generate_records(CohortConfig(n_patients=0), seed=0)


def test_waveform_roundtrip(tmp_path):
    cfg = _small_cfg(n=2)
    _, sessions, _ = cohortgen.generate_cohort(cfg, seed=8)
    s = sessions[0]
    s.channel_available[3] = False
    path = tmp_path / "w.raw"
    cohortgen.write_session(path, s)
    back = cohortgen.read_session(path, session_id=s.session_id,
                                  patient_id=s.patient_id)
    assert np.array_equal(back.samples, s.samples)
    assert np.array_equal(back.channel_available, s.channel_available)
    assert back.sample_rate == s.sample_rate


def test_waveform_rejects_corruption(tmp_path):
    path = tmp_path / "bad.raw"
    path.write_bytes(b"XXXXXXXX" + b"\0" * 100)
    with pytest.raises(DataError):
        cohortgen.read_session(path)
    path.write_bytes(b"")
    with pytest.raises(DataError):
        cohortgen.read_session(path)
