"""Stage II cross-modal alignment.

Report text runs through a pluggable frozen embedding provider (reference
implementation: seeded character-trigram hashing), a linear projection, a
learnable-position self-attention refiner, and masked mean pooling.  EHR
facts run through a permutation-invariant set encoder over demographic,
diagnosis, and medication codebooks.  Both are aligned to the pooled EEG
embedding u with a symmetric InfoNCE loss; sessions without a report are
excluded from the report loss as positives and negatives alike.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import grad, mim
from .config import (AlignConfig, EhrVocabConfig, N_AGE_BINS, RACE_CATEGORIES,
                     SEX_CATEGORIES)
from .errors import DataError, NumericError


# ---------------------------------------------------------------------------
# text provider


class TextEmbeddingProvider:
    """text -> (features (L, dim), mask (L,)) with L <= max_len, deterministic."""

    dim = 768

    def embed(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class HashedNgramProvider(TextEmbeddingProvider):
    """Character-trigram hashing per word, through a fixed seeded projection.

    Dependency-free stand-in for a frozen pretrained text encoder: the same
    text always maps to the same features, and texts differing in any word
    differ somewhere in feature space with overwhelming probability.
    """

    def __init__(self, max_len: int = 64, seed: int = 1234):
        self.max_len = max_len
        rng = np.random.default_rng(seed)
        self.projection = rng.normal(
            0.0, 1.0 / np.sqrt(self.dim), size=(self.dim, self.dim)
        ).astype(np.float32)
        self._word_cache: dict[str, np.ndarray] = {}

    def _word_feature(self, word: str) -> np.ndarray:
        cached = self._word_cache.get(word)
        if cached is not None:
            return cached
        buckets = np.zeros(self.dim, dtype=np.float32)
        padded = f"^{word}$"
        for i in range(len(padded) - 2):
            gram = padded[i:i + 3].encode()
            digest = hashlib.blake2b(gram, digest_size=8).digest()
            value = int.from_bytes(digest, "little")
            buckets[value % self.dim] += 1.0 if (value >> 32) & 1 else -1.0
        norm = np.linalg.norm(buckets)
        if norm > 0:
            buckets /= norm
        feature = buckets @ self.projection
        self._word_cache[word] = feature
        return feature

    def embed(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        words = [w.strip(".,;:()").lower() for w in text.split()]
        words = [w for w in words if w][: self.max_len]
        mask = np.zeros(self.max_len, dtype=bool)
        feats = np.zeros((self.max_len, self.dim), dtype=np.float32)
        for i, w in enumerate(words):
            feats[i] = self._word_feature(w)
            mask[i] = True
        if not mask.any():
            mask[0] = True  # empty text: a single zero token
        return feats, mask


# ---------------------------------------------------------------------------
# EHR inputs


@dataclass(frozen=True)
class EhrInput:
    age_bin: int
    sex_id: int
    race_id: int
    dx_ids: tuple[int, ...]
    med_ids: tuple[int, ...]

    def canonical(self, vocab: EhrVocabConfig) -> "EhrInput":
        """Sorted, deduplicated, truncated to the lowest ids: set semantics
        become exact bit-level invariance."""
        dx = tuple(sorted(set(self.dx_ids))[: vocab.dx_slots])
        med = tuple(sorted(set(self.med_ids))[: vocab.med_slots])
        return replace(self, dx_ids=dx, med_ids=med)

    def validate(self, vocab: EhrVocabConfig) -> None:
        if not 0 <= self.age_bin < N_AGE_BINS:
            raise DataError(f"age bin {self.age_bin} outside [0, {N_AGE_BINS})")
        if not 0 <= self.sex_id < len(SEX_CATEGORIES):
            raise DataError(f"sex id {self.sex_id} invalid")
        if not 0 <= self.race_id < len(RACE_CATEGORIES):
            raise DataError(f"race id {self.race_id} invalid")
        if any(i < 0 or i >= vocab.n_dx for i in self.dx_ids):
            raise DataError("diagnosis id outside vocabulary")
        if any(i < 0 or i >= vocab.n_med for i in self.med_ids):
            raise DataError("medication id outside vocabulary")


def ehr_input_from_record(record, dx_vocab: list[str], med_vocab: list[str]) -> EhrInput:
    dx_index = {c: i for i, c in enumerate(dx_vocab)}
    med_index = {c: i for i, c in enumerate(med_vocab)}
    age_bin = min(record.age_years // 10, 9) if record.age_years >= 0 else 10
    return EhrInput(
        age_bin=age_bin,
        sex_id=SEX_CATEGORIES.index(record.sex),
        race_id=RACE_CATEGORIES.index(record.race),
        dx_ids=tuple(dx_index[c] for c in sorted(record.diagnoses) if c in dx_index),
        med_ids=tuple(med_index[c] for c in sorted(record.medications) if c in med_index))


# ---------------------------------------------------------------------------
# encoders


class ReportEncoder(grad.Module):
    def __init__(self, cfg: AlignConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.w_in = grad.param((TextEmbeddingProvider.dim, d), rng)
        self.b_in = grad.param((d,), rng, zeros=True)
        self.pos = grad.param((cfg.text_max_len, d), rng, scale=0.02)
        self.blocks = [mim._Block(d, cfg.n_heads, 4, rng)
                       for _ in range(cfg.refiner_depth)]
        self.ln_g, self.ln_b = mim._ln_params(d)

    def __call__(self, feats: np.ndarray, mask: np.ndarray) -> grad.Tensor:
        """feats: (B, L, 768), mask: (B, L) -> (B, d)."""
        x = grad.matmul(grad.Tensor(feats.astype(grad.DTYPE)), self.w_in) + self.b_in
        x = x + grad.reshape(self.pos, (1,) + self.pos.shape)
        bias = mim._attention_bias(mask)
        for block in self.blocks:
            x = block(x, bias)
        x = grad.layernorm(x, self.ln_g, self.ln_b)
        return grad.mean_pool_masked(x, grad.Tensor(mask.astype(grad.DTYPE)))


class EhrEncoder(grad.Module):
    def __init__(self, cfg: AlignConfig, rng: np.random.Generator):
        d = cfg.d_model
        v = cfg.ehr
        self.vocab = v
        self.e_age = grad.param((N_AGE_BINS, d), rng, scale=0.02)
        self.e_sex = grad.param((len(SEX_CATEGORIES), d), rng, scale=0.02)
        self.e_race = grad.param((len(RACE_CATEGORIES), d), rng, scale=0.02)
        self.e_dx = grad.param((v.n_dx, d), rng, scale=0.02)
        self.e_med = grad.param((v.n_med, d), rng, scale=0.02)
        self.blocks = [mim._Block(d, cfg.n_heads, 4, rng)
                       for _ in range(cfg.refiner_depth)]
        self.ln_g, self.ln_b = mim._ln_params(d)

    def assemble(self, inputs: list[EhrInput]) -> tuple[np.ndarray, ...]:
        """Slot layout: [age, sex, race] + dx slots + med slots."""
        v = self.vocab
        b = len(inputs)
        n_slots = 3 + v.dx_slots + v.med_slots
        age = np.empty(b, dtype=np.int64)
        sex = np.empty(b, dtype=np.int64)
        race = np.empty(b, dtype=np.int64)
        dx = np.zeros((b, v.dx_slots), dtype=np.int64)
        med = np.zeros((b, v.med_slots), dtype=np.int64)
        mask = np.zeros((b, n_slots), dtype=bool)
        mask[:, :3] = True
        for i, raw in enumerate(inputs):
            inp = raw.canonical(v)
            inp.validate(v)
            age[i], sex[i], race[i] = inp.age_bin, inp.sex_id, inp.race_id
            dx[i, :len(inp.dx_ids)] = inp.dx_ids
            mask[i, 3:3 + len(inp.dx_ids)] = True
            med[i, :len(inp.med_ids)] = inp.med_ids
            mask[i, 3 + v.dx_slots:3 + v.dx_slots + len(inp.med_ids)] = True
        return age, sex, race, dx, med, mask

    def __call__(self, inputs: list[EhrInput]) -> grad.Tensor:
        age, sex, race, dx, med, mask = self.assemble(inputs)
        demo = grad.concat([
            grad.reshape(grad.embedding_lookup(self.e_age, age), (len(inputs), 1, -1)),
            grad.reshape(grad.embedding_lookup(self.e_sex, sex), (len(inputs), 1, -1)),
            grad.reshape(grad.embedding_lookup(self.e_race, race), (len(inputs), 1, -1)),
        ], axis=1)
        x = grad.concat([demo,
                         grad.embedding_lookup(self.e_dx, dx),
                         grad.embedding_lookup(self.e_med, med)], axis=1)
        # padded slots carry index-0 embeddings but are attention-masked and
        # excluded from pooling, so their content never reaches the output
        bias = mim._attention_bias(mask)
        for block in self.blocks:
            x = block(x, bias)
        x = grad.layernorm(x, self.ln_g, self.ln_b)
        return grad.mean_pool_masked(x, grad.Tensor(mask.astype(grad.DTYPE)))


# ---------------------------------------------------------------------------
# contrastive loss


def _l2_normalize(x: grad.Tensor) -> grad.Tensor:
    sq = grad.sum_(grad.mul(x, x), axis=-1, keepdims=True)
    return grad.mul(x, grad.power(sq + 1e-12, -0.5))


@dataclass
class ClipLoss:
    value: grad.Tensor
    all_absent: bool
    n_present: int


def clip_loss(a: grad.Tensor, b: grad.Tensor, tau: float = 0.07,
              present: np.ndarray | None = None) -> ClipLoss:
    """Symmetric InfoNCE; absent rows leave both negative pools entirely."""
    n = a.shape[0]
    if present is None:
        present = np.ones(n, dtype=bool)
    idx = np.flatnonzero(present)
    if idx.size == 0:
        return ClipLoss(value=grad.Tensor(np.zeros((), dtype=grad.DTYPE)),
                        all_absent=True, n_present=0)
    a_n = _l2_normalize(grad.getitem(a, idx))
    b_n = _l2_normalize(grad.getitem(b, idx))
    logits = grad.mul(grad.matmul(a_n, grad.transpose(b_n, (1, 0))), 1.0 / tau)
    targets = np.arange(idx.size)
    ab = grad.cross_entropy_with_label_smoothing(logits, targets, 0.0)
    ba = grad.cross_entropy_with_label_smoothing(
        grad.transpose(logits, (1, 0)), targets, 0.0)
    return ClipLoss(value=grad.mul(ab + ba, 0.5), all_absent=False,
                    n_present=int(idx.size))


# ---------------------------------------------------------------------------
# Stage II model


class AlignModel(grad.Module):
    def __init__(self, cfg: AlignConfig, rng: np.random.Generator):
        if cfg.proj_dim != cfg.d_model:
            # v_rep / v_ehr live in d_model space; the pi heads must land there
            raise DataError(
                f"proj_dim {cfg.proj_dim} != d_model {cfg.d_model} unsupported")
        self.report_encoder = ReportEncoder(cfg, rng)
        self.ehr_encoder = EhrEncoder(cfg, rng)
        self.pi_rep = grad.param((cfg.d_model, cfg.proj_dim), rng)
        self.pi_ehr = grad.param((cfg.d_model, cfg.proj_dim), rng)
        self.cfg = cfg


def report_embed(texts: list[str], provider: TextEmbeddingProvider,
                 encoder: ReportEncoder, max_len: int) -> grad.Tensor:
    feats = np.zeros((len(texts), max_len, TextEmbeddingProvider.dim),
                     dtype=np.float32)
    mask = np.zeros((len(texts), max_len), dtype=bool)
    for i, text in enumerate(texts):
        f, m = provider.embed(text)
        feats[i, :f.shape[0]] = f[:max_len]
        mask[i, :m.shape[0]] = m[:max_len]
    return encoder(feats, mask)


@dataclass
class AlignBatch:
    ids: np.ndarray             # (B, N) token grids
    patches: np.ndarray         # (B, N, P)
    valid: np.ndarray           # (B, N)
    texts: list[str]            # "" where absent
    report_present: np.ndarray  # (B,)
    ehr: list[EhrInput]


@dataclass
class Stage2Losses:
    total: float
    report: float
    ehr: float
    report_absent_batch: bool


def stage2_step(align_model: AlignModel, mim_model: mim.MimModel,
                provider: TextEmbeddingProvider, batch: AlignBatch,
                rng: np.random.Generator | None = None,
                r_drop: float = 0.25) -> tuple[grad.Tensor, Stage2Losses]:
    """L_Align = L_Report + L_EHR on one batch; returns the loss graph root."""
    cfg = align_model.cfg
    valid = batch.valid
    if rng is not None and r_drop > 0.0:
        # token dropping: each valid position excluded with prob r_drop,
        # guaranteed at least one surviving position per row
        keep = rng.random(valid.shape) >= r_drop
        for i in range(valid.shape[0]):
            if not (valid[i] & keep[i]).any():
                keep[i, np.flatnonzero(valid[i])[0]] = True
        valid = valid & keep
    u = mim.mim_forward(mim_model, batch.ids, batch.patches,
                        plan=None, valid=valid).u
    present = batch.report_present.astype(bool)
    texts = [t if p else "" for t, p in zip(batch.texts, present)]
    v_rep = report_embed(texts, provider, align_model.report_encoder,
                         cfg.text_max_len)
    v_ehr = align_model.ehr_encoder(batch.ehr)
    rep_loss = clip_loss(grad.matmul(u, align_model.pi_rep), v_rep,
                         cfg.tau, present)
    ehr_loss = clip_loss(grad.matmul(u, align_model.pi_ehr), v_ehr,
                         cfg.tau, None)
    total = rep_loss.value + ehr_loss.value
    if not np.isfinite(total.data):
        raise NumericError("non-finite Stage II loss")
    return total, Stage2Losses(total=float(total.data),
                               report=float(rep_loss.value.data),
                               ehr=float(ehr_loss.value.data),
                               report_absent_batch=rep_loss.all_absent)


# ---------------------------------------------------------------------------
# Stage II training


@dataclass
class Stage2Result:
    align_model: AlignModel
    mim_model: mim.MimModel
    ema: grad.Ema
    losses: list[Stage2Losses]


def audit_stage1_provenance(mim_model: mim.MimModel, stage1_ema: grad.Ema) -> None:
    """Stage II must start from Stage I EMA weights: assert coverage."""
    keep = set(mim_model.encoder_parameter_names())
    missing = keep - set(stage1_ema.shadow)
    if missing:
        raise DataError(
            f"stage2 init: stage1 EMA missing encoder parameters {sorted(missing)[:5]}")


def init_from_stage1(mim_model: mim.MimModel, stage1_ema: grad.Ema) -> None:
    audit_stage1_provenance(mim_model, stage1_ema)
    params = mim_model.named_parameters()
    for name in mim_model.encoder_parameter_names():
        params[name].data = stage1_ema.shadow[name].astype(grad.DTYPE).copy()


def stage2_train(mim_model: mim.MimModel, stage1_ema: grad.Ema,
                 provider: TextEmbeddingProvider, batches, cfg: AlignConfig,
                 seed: int, steps: int | None = None) -> Stage2Result:
    """``batches`` is a callable (step, rng) -> AlignBatch."""
    init_from_stage1(mim_model, stage1_ema)
    rng = np.random.default_rng(seed)
    align_model = AlignModel(cfg, rng)
    trained = dict(align_model.named_parameters())
    mim_params = mim_model.named_parameters()
    for name in mim_model.encoder_parameter_names():
        trained[f"eeg.{name}"] = mim_params[name]
    opt = grad.AdamW(trained.values(), lr=cfg.lr, beta1=cfg.beta1,
                     beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    ema = grad.Ema(trained, cfg.ema_decay)
    total_steps = steps if steps is not None else cfg.steps
    history = []
    for step in range(total_steps):
        batch = batches(step, rng)
        loss, losses = stage2_step(align_model, mim_model, provider, batch,
                                   rng, cfg.r_drop)
        opt.zero_grad()
        loss.backward()
        opt.step(lr=grad.cosine_lr(step, total_steps, cfg.lr, cfg.warmup_steps))
        ema.update(trained)
        history.append(losses)
    return Stage2Result(align_model=align_model, mim_model=mim_model,
                        ema=ema, losses=history)


def retrieval_top1(align_model: AlignModel, mim_model: mim.MimModel,
                   batch: AlignBatch) -> float:
    """EEG -> EHR retrieval accuracy over the batch as candidate pool."""
    u = mim.mim_forward(mim_model, batch.ids, batch.patches,
                        plan=None, valid=batch.valid).u
    q = _l2_normalize(grad.matmul(u, align_model.pi_ehr)).data
    v = _l2_normalize(align_model.ehr_encoder(batch.ehr)).data
    ranks = np.argmax(q @ v.T, axis=1)
    return float(np.mean(ranks == np.arange(len(batch.ehr))))


# ---------------------------------------------------------------------------
# concept holdout


def scrub_text(text: str, phrases: list[str]) -> str:
    """Remove every sentence containing a held-out phrase (case-insensitive)."""
    sentences = [s.strip() for s in text.split(".") if s.strip()]
    lowered = [p.lower() for p in phrases]
    kept = [s for s in sentences
            if not any(p in s.lower() for p in lowered)]
    return (". ".join(kept) + ".") if kept else ""


def concept_holdout_filter(records, holdout_codes: set[str],
                           holdout_phrases: list[str]):
    """Alignment-side scrub: held-out codes leave the EHR view, held-out
    phrases leave the report text.  Probing labels are built from the
    original records elsewhere and stay untouched."""
    out = []
    for rec in records:
        filtered = replace(
            rec,
            diagnoses=frozenset(rec.diagnoses - holdout_codes),
            medications=frozenset(rec.medications - holdout_codes),
            diagnosis_events=[e for e in rec.diagnosis_events
                              if e.code not in holdout_codes],
            medication_events=[e for e in rec.medication_events
                               if e.code not in holdout_codes],
            report=None if rec.report is None
            else scrub_text(rec.report, holdout_phrases))
        out.append(filtered)
    return out
