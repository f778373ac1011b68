"""Configuration profiles.

Every hyperparameter used anywhere in the pipeline has exactly one home
here.  A profile is a named bundle of per-stage configs; ``desk`` is small
enough to train end-to-end on a laptop CPU, the ``paper-*`` profiles carry
the full-scale constants.

Profiles can be overridden from a JSON file or from environment variables
prefixed ``CLEF_`` (``CLEF_DSP__STRIDE=250`` sets ``profile.dsp.stride``).
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


# Standard 10-20 montage (19 channels) and the desk subset.
CHANNELS_1020 = [
    "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2",
    "F7", "F8", "T3", "T4", "T5", "T6", "Fz", "Cz", "Pz",
]
CHANNELS_DESK = ["Fp1", "Fp2", "F3", "F4", "C3", "C4", "O1", "O2"]

# AASM-recommended PSG montage.
PSG_CHANNELS = ["F4", "C4", "O2"]

SEX_CATEGORIES = ["F", "M", "Unknown"]
RACE_CATEGORIES = [
    "American Indian or Alaska Native", "Asian", "Black or African American",
    "Multiracial", "Native Hawaiian or Other Pacific Islander", "Other Race",
    "White", "Unavailable",
]
SETTING_CATEGORIES = ["ICU", "EMU", "Routine"]
N_AGE_BINS = 11  # ten decade-wide bins plus one N/A slot


@dataclass
class DspConfig:
    sample_rate: float = 200.0
    band_lo_hz: float = 0.1
    band_hi_hz: float = 75.0
    bandpass_order: int = 4
    notch_base_hz: float = 60.0
    notch_q: float = 30.0
    notch_nyquist_margin_hz: float = 2.0
    window: int = 800            # 4 s at 200 Hz
    stride: int = 125            # 0.625 s
    nw: float = 2.0
    k_max: int = 4
    eigen_threshold: float = 0.9
    freq_res_hz: float = 0.25
    band_top_hz: float = 32.0    # spectrogram covers [0, band_top)
    db_lo: float = -40.0
    db_hi: float = 40.0
    power_floor: float = 1e-12

    @property
    def n_freq_bins(self) -> int:
        return int(round(self.band_top_hz / self.freq_res_hz))

    def n_frames(self, n_samples: int) -> int:
        """Frames start at multiples of ``stride``; the tail of the signal is
        edge-padded so the frame count is exactly ``n_samples // stride``."""
        if n_samples < self.window:
            return 0
        return n_samples // self.stride


@dataclass
class CohortConfig:
    n_patients: int = 400
    n_channels: int = 8
    channel_names: list[str] = field(default_factory=lambda: list(CHANNELS_DESK))
    duration_s: float = 320.0
    sample_rate: float = 200.0
    report_fraction: float = 0.593
    noise_slope: float = -2.0     # 1/f^2 background
    alpha_freq_hz: float = 10.0
    alpha_amplitude_uv: float = 10.0
    noise_rms_uv: float = 20.0
    n_distractor_dx: int = 8
    n_distractor_med: int = 8
    distractor_rate: float = 0.15
    session_day_range: int = 3650


@dataclass
class TokenizerConfig:
    codebook_size: int = 64
    latent_dim: int = 32
    base_channels: int = 16
    level_channels: list[int] = field(default_factory=lambda: [16, 24, 32, 32, 32])
    # (freq, time) stride per level; total 16x in frequency, 8x in time.
    level_strides: list[tuple[int, int]] = field(
        default_factory=lambda: [(2, 2), (2, 2), (2, 2), (2, 1), (1, 1)])
    disc_channels: list[int] = field(default_factory=lambda: [16, 32, 32])
    lambda_code: float = 0.8
    lambda_commit: float = 0.2
    gamma_diff: float = 4.0
    adv_weight_clamp: float = 1e4
    codebook_data_init: bool = True  # seed entries from first-batch latents
    p_psg: float = 0.3
    p_drop: float = 0.1
    ramp_steps: int = 200
    # short revival interval: at desk step counts the codebook must recover
    # dead entries within the training run, not after it
    dead_code_steps: int = 50
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    batch_size: int = 16
    steps: int = 200
    adv_start_step: int = 10_000_000  # GAN off by default at desk scale


@dataclass
class MimConfig:
    depth: int = 2
    d_model: int = 64
    n_heads: int = 4
    dec_depth: int = 2
    mlp_ratio: int = 4
    dropout: float = 0.0
    patch_h: int = 16
    patch_w: int = 8
    mask_mu: float = 0.55
    mask_sigma: float = 0.15
    mask_lo: float = 0.25
    mask_hi: float = 1.0
    r_drop: float = 0.25
    label_smoothing: float = 0.1
    pool_includes_proxy: bool = False
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    warmup_steps: int = 20
    steps: int = 300
    batch_size: int = 16
    ema_decay: float = 0.999


@dataclass
class EhrVocabConfig:
    n_dx: int = 24
    n_med: int = 24
    dx_slots: int = 8
    med_slots: int = 8


@dataclass
class AlignConfig:
    d_model: int = 64           # shared embedding dim, equals MIM d_model
    proj_dim: int = 64          # pi-head output dim d'
    text_dim: int = 768
    text_max_len: int = 64
    refiner_depth: int = 2
    n_heads: int = 4
    tau: float = 0.07
    r_drop: float = 0.25
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    warmup_steps: int = 20
    steps: int = 500
    batch_size: int = 64
    ema_decay: float = 0.9999
    ehr: EhrVocabConfig = field(default_factory=EhrVocabConfig)


@dataclass
class BenchConfig:
    controls_per_case: int = 10
    min_positives: int = 2
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    probe_hidden: int = 1536
    probe_epochs: int = 5
    probe_lr: float = 1e-4
    probe_weight_decay: float = 0.01
    probe_batch_size: int = 64
    n_seeds: int = 4
    chronicity_window_days: int = 7
    med_completion_window_days: int = 1


@dataclass
class Profile:
    name: str = "desk"
    dsp: DspConfig = field(default_factory=DspConfig)
    cohort: CohortConfig = field(default_factory=CohortConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    mim: MimConfig = field(default_factory=MimConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    @property
    def n_channels(self) -> int:
        return self.cohort.n_channels

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Token grid (H', W') implied by DSP output and tokenizer strides."""
        h = self.dsp.n_freq_bins
        w = self.dsp.n_frames(int(self.cohort.duration_s * self.dsp.sample_rate))
        for sf, st in self.tokenizer.level_strides:
            h //= sf
            w //= st
        return h, w

    @property
    def context_samples(self) -> int:
        """Samples per model context window (one full session at desk scale)."""
        return int(self.cohort.duration_s * self.dsp.sample_rate)

    def content_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _desk() -> Profile:
    # 320 s sessions at a 5 s frame stride give a 64x64 spectrogram over
    # [0, 16) Hz, hence a 4x8 token grid (32 tokens per session).
    p = Profile(name="desk")
    p.dsp.stride = 1000
    p.dsp.band_top_hz = 16.0
    # tiny cohorts need longer probe schedules: a few hundred rows give only
    # ~10 optimizer steps per epoch at the default settings, which undertrains
    p.bench.probe_epochs = 40
    p.bench.probe_lr = 1e-3
    p.bench.probe_batch_size = 32
    return p


def _paper(name: str, depth: int, d_model: int, n_heads: int) -> Profile:
    p = Profile(name=name)
    p.cohort = CohortConfig(
        n_patients=108_341, n_channels=19,
        channel_names=list(CHANNELS_1020), duration_s=1280.0)
    p.dsp = DspConfig()  # stride 125, [0, 32) Hz, H=128, W=2048
    p.tokenizer = TokenizerConfig(
        codebook_size=4096, latent_dim=64,
        level_channels=[64, 128, 128, 256, 256],
        disc_channels=[64, 128, 256],
        lambda_code=0.8, lambda_commit=0.2, gamma_diff=4.0,
        p_psg=0.3, p_drop=0.1, ramp_steps=100_000,
        lr=1.44e-4, beta1=0.0, beta2=0.99,
        batch_size=32, steps=200_000, adv_start_step=0)
    p.mim = MimConfig(
        depth=depth, d_model=d_model, n_heads=n_heads, dec_depth=4,
        dropout=0.1, lr=5e-4, batch_size=128, ema_decay=0.999)
    p.align = AlignConfig(
        d_model=d_model, proj_dim=d_model, text_max_len=256,
        refiner_depth=4, n_heads=8, lr=5e-4, batch_size=128,
        ema_decay=0.9999,
        ehr=EhrVocabConfig(n_dx=178, n_med=205, dx_slots=30, med_slots=50))
    p.bench = BenchConfig(min_positives=15)
    return p


_BUILDERS = {
    "desk": _desk,
    "paper-small": lambda: _paper("paper-small", 4, 512, 8),
    "paper-base": lambda: _paper("paper-base", 12, 512, 8),
    "paper-large": lambda: _paper("paper-large", 20, 768, 12),
}

PROFILE_NAMES = tuple(_BUILDERS)


def get_profile(name: str = "desk") -> Profile:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ConfigError(
            f"unknown profile {name!r}; expected one of {sorted(_BUILDERS)}")
    profile = builder()
    _apply_env_overrides(profile)
    return profile


def _coerce(current, raw):
    if isinstance(current, bool):
        if isinstance(raw, bool):
            return raw
        return str(raw).lower() in ("1", "true", "yes")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        if isinstance(raw, str):
            raw = json.loads(raw)
        if not isinstance(raw, list):
            raise ConfigError(f"expected list, got {type(raw).__name__}")
        return raw
    return raw


def _set_path(profile: Profile, path: list[str], raw) -> None:
    obj = profile
    for key in path[:-1]:
        if not dataclasses.is_dataclass(obj) or key not in {
                f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config section {'.'.join(path)!r}")
        obj = getattr(obj, key)
    leaf = path[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {
            f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {'.'.join(path)!r}")
    current = getattr(obj, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{'.'.join(path)!r} is a section, not a value")
    setattr(obj, leaf, _coerce(current, raw))


def apply_overrides(profile: Profile, overrides: dict) -> Profile:
    """Apply a possibly-nested dict of overrides; unknown keys raise."""
    def walk(prefix: list[str], node) -> None:
        if isinstance(node, dict):
            for k, v in node.items():
                walk(prefix + [k], v)
        else:
            _set_path(profile, prefix, node)
    walk([], overrides)
    return profile


def load_profile(name: str, config_path: str | None = None) -> Profile:
    profile = get_profile(name)
    if config_path:
        with open(config_path) as fh:
            overrides = json.load(fh)
        apply_overrides(profile, overrides)
        _apply_env_overrides(profile)
    return profile


_ENV_PREFIX = "CLEF_"


def _apply_env_overrides(profile: Profile) -> None:
    for key, value in os.environ.items():
        if not key.startswith(_ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(_ENV_PREFIX):].split("__")]
        _set_path(profile, path, value)
