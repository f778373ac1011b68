"""Unified command-line front end.

Each command validates its configuration, runs one pipeline stage, writes a
run manifest next to its outputs, and streams progress metrics as delimited
text.  All randomness flows from one root seed, split per stage through a
counter-based scheme.  Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import align, bench, cohortgen, dsp, grad, mim, summarize, vqtok
from .config import (ConfigError, PROFILE_NAMES, PSG_CHANNELS, Profile,
                     load_profile)
from .errors import DataError, NumericError

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_STAGE_COUNTERS = {"cohort": 0, "tokenizer": 1, "tokenize": 2, "mim": 3,
                   "align": 4, "select": 5, "probe": 6}


def stage_seed(root_seed: int, stage: str) -> int:
    counter = _STAGE_COUNTERS[stage]
    return int(np.random.SeedSequence([root_seed, counter]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# manifests


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _hash_input(path: Path) -> str:
    if path.is_dir():
        h = hashlib.sha256()
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(sub.relative_to(path)).encode())
            h.update(_sha256_file(sub).encode())
        return h.hexdigest()[:16]
    return _sha256_file(path)


@dataclass
class RunManifest:
    command: str
    profile: str
    profile_hash: str
    root_seed: int
    stage_seeds: dict[str, int]
    input_hashes: dict[str, str] = field(default_factory=dict)
    output_ids: dict[str, str] = field(default_factory=dict)


def write_manifest(out: Path, manifest: RunManifest) -> Path:
    """Outputs are hashed at write time so a manifest fully identifies a run."""
    for rel in list(manifest.output_ids):
        target = out / rel if out.is_dir() else out.parent / rel
        if target.exists():
            manifest.output_ids[rel] = _hash_input(target)
    path = out / "manifest.json" if out.is_dir() else \
        out.parent / (out.name + ".manifest.json")
    with open(path, "w") as fh:
        json.dump(dataclasses.asdict(manifest), fh, indent=1, sort_keys=True)
    return path


def _manifest(ctx, command: str, stage: str,
              inputs: dict[str, Path]) -> RunManifest:
    profile: Profile = ctx.obj["profile"]
    root = ctx.obj["seed"]
    for name, path in inputs.items():
        if not Path(path).exists():
            raise DataError(f"missing input {name}: {path}")
    return RunManifest(
        command=command, profile=profile.name,
        profile_hash=profile.content_hash(), root_seed=root,
        stage_seeds={stage: stage_seed(root, stage)},
        input_hashes={n: _hash_input(Path(p)) for n, p in inputs.items()})


# ---------------------------------------------------------------------------
# shared loaders


def _load_spectrograms(spec_dir: Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    paths = sorted(spec_dir.glob("*.spc"))
    if not paths:
        raise DataError(f"no .spc files in {spec_dir}")
    values, avail = [], []
    for p in paths:
        spec = dsp.read_spectrogram(p)
        values.append(spec.values)
        avail.append(spec.channel_available)
    return ([p.stem for p in paths], np.stack(values).astype(np.float32),
            np.stack(avail))


def _load_tokens(tok_dir: Path) -> tuple[list[str], np.ndarray, int, str]:
    index_path = tok_dir / "tokens.json"
    if not index_path.exists():
        raise DataError(f"missing token index {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    ids = []
    for sid in index["sessions"]:
        indices, k, file_sid = vqtok.read_tokens(tok_dir / f"{sid}.tok")
        if file_sid != sid:
            raise DataError(f"{sid}.tok: session id mismatch ({file_sid})")
        ids.append(indices.reshape(-1))
    return index["sessions"], np.stack(ids), int(index["codebook_size"]), \
        index["codebook_sha"]


def _codebook_sha(entries: np.ndarray) -> str:
    return hashlib.sha256(
        np.ascontiguousarray(entries, dtype="<f4").tobytes()).hexdigest()[:16]


def _build_mim_model(profile: Profile, codebook_size: int,
                     seed: int) -> mim.MimModel:
    return mim.MimModel(codebook_size, profile.n_channels,
                        profile.grid_shape, profile.mim,
                        np.random.default_rng(seed))


def _patches_for(profile: Profile, values: np.ndarray) -> np.ndarray:
    cfg = profile.mim
    return np.stack([mim.extract_patches(v, cfg.patch_h, cfg.patch_w)
                     for v in values])


def _encoder_weights_from_checkpoint(ckpt: dict) -> dict[str, np.ndarray]:
    # prefer the EMA shadow when present
    return ckpt["ema"] if ckpt["ema"] is not None else ckpt["params"]


# ---------------------------------------------------------------------------
# command group


@click.group()
@click.option("--profile", "profile_name", default="desk",
              type=click.Choice(PROFILE_NAMES), show_default=True)
@click.option("--config", "config_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON override file applied on top of the profile.")
@click.option("--seed", default=0, show_default=True,
              help="Root seed; every stage derives its own seed from it.")
@click.pass_context
def cli(ctx, profile_name, config_path, seed):
    ctx.ensure_object(dict)
    ctx.obj["profile"] = load_profile(profile_name, config_path)
    ctx.obj["seed"] = int(seed)


@cli.command("gen-cohort")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def gen_cohort(ctx, out):
    """Synthesize patient records, reports, and raw EEG sessions."""
    profile: Profile = ctx.obj["profile"]
    manifest = _manifest(ctx, "gen-cohort", "cohort", {})
    seed = manifest.stage_seeds["cohort"]
    out = Path(out)
    (out / "sessions").mkdir(parents=True, exist_ok=True)
    records, phenotypes = cohortgen.generate_records(profile.cohort, seed)
    cohortgen.write_records(out / "records.json", records)
    days, sids = {}, {}
    for i, session in enumerate(cohortgen.iter_sessions(
            profile.cohort, seed, records, phenotypes)):
        cohortgen.write_session(out / "sessions" / f"{session.session_id}.raw",
                                session)
        days[session.patient_id] = session.session_day
        sids[session.patient_id] = session.session_id
        if (i + 1) % 50 == 0 or i + 1 == len(records):
            click.echo(f"sessions\t{i + 1}/{len(records)}")
    with open(out / "days.json", "w") as fh:
        json.dump({"session_days": days, "session_ids": sids}, fh, indent=1,
                  sort_keys=True)
    manifest.output_ids = {"records.json": "", "sessions": "", "days.json": ""}
    write_manifest(out, manifest)


@cli.command("dsp")
@click.option("--cohort", "cohort_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def dsp_cmd(ctx, cohort_dir, out):
    """Filter raw sessions and cache multitaper spectrograms."""
    profile: Profile = ctx.obj["profile"]
    cohort_dir = Path(cohort_dir)
    manifest = _manifest(ctx, "dsp", "cohort",
                         {"sessions": cohort_dir / "sessions"})
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tapers = dsp.compute_dpss(profile.dsp.window, profile.dsp.nw,
                              profile.dsp.k_max, profile.dsp.eigen_threshold)
    paths = sorted((cohort_dir / "sessions").glob("*.raw"))
    if not paths:
        raise DataError(f"no .raw sessions in {cohort_dir / 'sessions'}")
    for i, path in enumerate(paths):
        session = cohortgen.read_session(path)
        spec = dsp.session_spectrogram(session, profile.dsp, tapers)
        dsp.write_spectrogram(out / f"{path.stem}.spc", spec)
        if (i + 1) % 50 == 0 or i + 1 == len(paths):
            click.echo(f"spectrograms\t{i + 1}/{len(paths)}")
    manifest.output_ids = {".": ""}
    write_manifest(out, manifest)


@cli.command("train-tokenizer")
@click.option("--spectrograms", "spec_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", default=None, type=int,
              help="Override the profile's training step count.")
@click.pass_context
def train_tokenizer_cmd(ctx, spec_dir, out, steps):
    """Train the VQ tokenizer on cached spectrograms."""
    profile: Profile = ctx.obj["profile"]
    manifest = _manifest(ctx, "train-tokenizer", "tokenizer",
                         {"spectrograms": Path(spec_dir)})
    seed = manifest.stage_seeds["tokenizer"]
    _, values, avail = _load_spectrograms(Path(spec_dir))
    psg = tuple(i for i, name in enumerate(profile.cohort.channel_names)
                if name in set(PSG_CHANNELS))
    trainer, history = vqtok.train_tokenizer(values, avail, profile.tokenizer,
                                             psg, seed, steps=steps)
    total = len(history)
    for i, h in enumerate(history):
        if (i + 1) % max(1, total // 20) == 0 or i == 0:
            click.echo(f"step\t{i + 1}\trecon\t{h.rec:.5f}\tvq\t{h.vq:.5f}")
    params = trainer.tokenizer.named_parameters()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grad.save_checkpoint(out, params, meta={
        "kind": "tokenizer",
        "profile_hash": profile.content_hash(),
        "codebook_sha": _codebook_sha(trainer.tokenizer.codebook.entries.data),
        "n_channels": trainer.tokenizer.n_channels})
    manifest.output_ids = {out.name: ""}
    write_manifest(out, manifest)


def _load_tokenizer(profile: Profile, ckpt_path: Path) -> tuple[vqtok.Tokenizer, str]:
    ckpt = grad.load_checkpoint(ckpt_path)
    if ckpt["meta"].get("kind") != "tokenizer":
        raise DataError(f"{ckpt_path}: not a tokenizer checkpoint")
    tokenizer = vqtok.Tokenizer(profile.n_channels, profile.tokenizer,
                                np.random.default_rng(0))
    grad.assign_parameters(tokenizer.named_parameters(), ckpt["params"])
    sha = _codebook_sha(tokenizer.codebook.entries.data)
    if sha != ckpt["meta"].get("codebook_sha"):
        raise DataError(f"{ckpt_path}: codebook hash mismatch "
                        f"({sha} != {ckpt['meta'].get('codebook_sha')})")
    return tokenizer, sha


@cli.command("tokenize")
@click.option("--spectrograms", "spec_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_context
def tokenize_cmd(ctx, spec_dir, ckpt_path, out):
    """Convert spectrograms to token caches using a tokenizer checkpoint."""
    profile: Profile = ctx.obj["profile"]
    manifest = _manifest(ctx, "tokenize", "tokenize",
                         {"spectrograms": Path(spec_dir),
                          "ckpt": Path(ckpt_path)})
    tokenizer, sha = _load_tokenizer(profile, Path(ckpt_path))
    out = Path(out)
    index_path = out / "tokens.json"
    if index_path.exists():
        with open(index_path) as fh:
            existing = json.load(fh)
        if existing.get("codebook_sha") != sha:
            raise DataError(
                f"{out}: existing token cache was produced by codebook "
                f"{existing.get('codebook_sha')}, checkpoint has {sha}")
    out.mkdir(parents=True, exist_ok=True)
    sids, values, avail = _load_spectrograms(Path(spec_dir))
    indices = vqtok.tokenize_sessions(tokenizer, values, avail)
    for sid, grid in zip(sids, indices):
        vqtok.write_tokens(out / f"{sid}.tok", grid,
                           profile.tokenizer.codebook_size, sid)
    with open(index_path, "w") as fh:
        json.dump({"codebook_sha": sha,
                   "codebook_size": profile.tokenizer.codebook_size,
                   "sessions": sids}, fh, indent=1, sort_keys=True)
    click.echo(f"tokenized\t{len(sids)}")
    manifest.output_ids = {".": ""}
    write_manifest(out, manifest)


@cli.command("train-mim")
@click.option("--tokens", "tok_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--spectrograms", "spec_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", default=None, type=int)
@click.pass_context
def train_mim_cmd(ctx, tok_dir, spec_dir, out, steps):
    """Stage I: masked token modeling over the session token grids."""
    profile: Profile = ctx.obj["profile"]
    manifest = _manifest(ctx, "train-mim", "mim",
                         {"tokens": Path(tok_dir),
                          "spectrograms": Path(spec_dir)})
    seed = manifest.stage_seeds["mim"]
    tok_sids, ids, codebook_size, _sha = _load_tokens(Path(tok_dir))
    spec_sids, values, _avail = _load_spectrograms(Path(spec_dir))
    if tok_sids != spec_sids:
        raise DataError("token cache and spectrogram cache list different "
                        "sessions")
    patches = _patches_for(profile, values)
    result = mim.stage1_train(ids, patches, codebook_size, profile.n_channels,
                              profile.grid_shape, profile.mim, seed,
                              steps=steps)
    total = len(result.losses)
    for i in range(0, total, max(1, total // 20)):
        click.echo(f"step\t{i + 1}\tloss\t{result.losses[i]:.5f}"
                   f"\tacc\t{result.masked_acc[i]:.4f}")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grad.save_checkpoint(out, result.model.named_parameters(),
                         ema=result.ema,
                         meta={"kind": "mim",
                               "codebook_size": codebook_size,
                               "profile_hash": profile.content_hash()})
    manifest.output_ids = {out.name: ""}
    write_manifest(out, manifest)


@cli.command("train-align")
@click.option("--cohort", "cohort_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--tokens", "tok_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--spectrograms", "spec_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--init", "init_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Stage I checkpoint (required: stages train sequentially).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--steps", default=None, type=int)
@click.pass_context
def train_align_cmd(ctx, cohort_dir, tok_dir, spec_dir, init_path, out, steps):
    """Stage II: contrastive report/EHR alignment on top of Stage I."""
    if init_path is None:
        raise ConfigError("train-align requires --init with a Stage I "
                          "checkpoint; the stages train sequentially")
    profile: Profile = ctx.obj["profile"]
    cohort_dir = Path(cohort_dir)
    manifest = _manifest(ctx, "train-align", "align",
                         {"records": cohort_dir / "records.json",
                          "tokens": Path(tok_dir),
                          "spectrograms": Path(spec_dir),
                          "init": Path(init_path)})
    seed = manifest.stage_seeds["align"]
    records = cohortgen.read_records(cohort_dir / "records.json")
    tok_sids, ids, codebook_size, _sha = _load_tokens(Path(tok_dir))
    _spec_sids, values, _avail = _load_spectrograms(Path(spec_dir))
    if len(records) != len(tok_sids):
        raise DataError(f"{len(records)} records vs {len(tok_sids)} token "
                        "caches")
    patches = _patches_for(profile, values)
    ckpt = grad.load_checkpoint(Path(init_path))
    if ckpt["meta"].get("kind") != "mim":
        raise DataError(f"{init_path}: not a Stage I checkpoint")
    model = _build_mim_model(profile, codebook_size, seed)
    stage1_ema = grad.Ema(model.named_parameters(),
                          ckpt["ema_decay"] or profile.mim.ema_decay)
    stage1_ema.shadow = {k: v.copy() for k, v in
                        _encoder_weights_from_checkpoint(ckpt).items()}
    phenotypes = cohortgen.default_phenotypes(profile.cohort.channel_names)
    dx_vocab, med_vocab = cohortgen.vocabularies(profile.cohort, phenotypes)
    ehr_inputs = [align.ehr_input_from_record(r, dx_vocab, med_vocab)
                  for r in records]
    valid_all = np.ones(ids.shape, dtype=bool)
    b = profile.align.batch_size

    def batches(step, rng):
        pick = rng.integers(0, ids.shape[0], size=b)
        return align.AlignBatch(
            ids=ids[pick], patches=patches[pick], valid=valid_all[pick],
            texts=[records[i].report or "" for i in pick],
            report_present=np.array([records[i].report is not None
                                     for i in pick]),
            ehr=[ehr_inputs[i] for i in pick])

    provider = align.HashedNgramProvider()
    result = align.stage2_train(model, stage1_ema, provider, batches,
                                profile.align, seed, steps=steps)
    total = len(result.losses)
    for i in range(0, total, max(1, total // 20)):
        h = result.losses[i]
        click.echo(f"step\t{i + 1}\ttotal\t{h.total:.5f}"
                   f"\treport\t{h.report:.5f}\tehr\t{h.ehr:.5f}")
    trained = dict(result.align_model.named_parameters())
    mim_params = result.mim_model.named_parameters()
    for name in result.mim_model.encoder_parameter_names():
        trained[f"eeg.{name}"] = mim_params[name]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grad.save_checkpoint(out, trained, ema=result.ema,
                         meta={"kind": "align",
                               "codebook_size": codebook_size,
                               "profile_hash": profile.content_hash()})
    manifest.output_ids = {out.name: ""}
    write_manifest(out, manifest)


@cli.command("select-prompt")
@click.option("--cohort", "cohort_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--questions", "questions_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--llm", "llm_address", default=None,
              help="host:port of a line-delimited JSON LLM server; "
                   "defaults to the deterministic mock.")
@click.option("--max-reports", default=20, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def select_prompt_cmd(ctx, cohort_dir, questions_path, llm_address,
                      max_reports, out):
    """Score summarization candidates by QA consistency and pick one."""
    profile: Profile = ctx.obj["profile"]
    cohort_dir = Path(cohort_dir)
    inputs = {"records": cohort_dir / "records.json"}
    if questions_path:
        inputs["questions"] = Path(questions_path)
    manifest = _manifest(ctx, "select-prompt", "select", inputs)
    records = cohortgen.read_records(cohort_dir / "records.json")
    reports = [r.report for r in records if r.report][:max_reports]
    if not reports:
        raise DataError("cohort contains no reports to summarize")
    phenotypes = cohortgen.default_phenotypes(profile.cohort.channel_names)
    questions = summarize.read_questions(questions_path) if questions_path \
        else summarize.default_questions(phenotypes)
    client = summarize.SocketLlmClient(llm_address) if llm_address \
        else summarize.MockLlmClient()
    candidates = [summarize.Candidate(pid, prompt, n)
                  for pid, prompt in (("verbatim", "repeat the report"),
                                      ("findings", "summarize the findings"))
                  for n in (128, 256, 512)]
    scores = [summarize.qa_consistency(reports, questions, c, client)
              for c in candidates]
    for s in scores:
        click.echo(f"candidate\t{s.candidate.prompt_id}"
                   f"\t{s.candidate.max_tokens}\t{s.score:.4f}")
    picked = summarize.select_candidate(scores)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump({"selected": dataclasses.asdict(picked),
                   "scores": [{"prompt_id": s.candidate.prompt_id,
                               "max_tokens": s.candidate.max_tokens,
                               "score": s.score, "failures": s.failures}
                              for s in scores]}, fh, indent=1, sort_keys=True)
    manifest.output_ids = {out.name: ""}
    write_manifest(out, manifest)


@cli.command("probe")
@click.option("--cohort", "cohort_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--tokens", "tok_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--spectrograms", "spec_dir", required=True,
              type=click.Path(exists=True, file_okay=False))
@click.option("--ckpt", "ckpt_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Stage I or Stage II checkpoint supplying the encoder.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def probe_cmd(ctx, cohort_dir, tok_dir, spec_dir, ckpt_path, out):
    """Frozen-embedding case-control probing over the planted task set."""
    profile: Profile = ctx.obj["profile"]
    cohort_dir = Path(cohort_dir)
    manifest = _manifest(ctx, "probe", "probe",
                         {"records": cohort_dir / "records.json",
                          "days": cohort_dir / "days.json",
                          "tokens": Path(tok_dir),
                          "spectrograms": Path(spec_dir),
                          "ckpt": Path(ckpt_path)})
    seed = manifest.stage_seeds["probe"]
    records = cohortgen.read_records(cohort_dir / "records.json")
    with open(cohort_dir / "days.json") as fh:
        day_index = json.load(fh)
    tok_sids, ids, codebook_size, _sha = _load_tokens(Path(tok_dir))
    _spec_sids, values, _avail = _load_spectrograms(Path(spec_dir))
    patches = _patches_for(profile, values)
    ckpt = grad.load_checkpoint(Path(ckpt_path))
    model = _build_mim_model(profile, codebook_size, 0)
    weights = _encoder_weights_from_checkpoint(ckpt)
    if ckpt["meta"].get("kind") == "align":
        weights = {k[len("eeg."):]: v for k, v in weights.items()
                   if k.startswith("eeg.")}
    grad.assign_parameters(model.named_parameters(), weights, strict=False)
    embeddings = {}
    for start in range(0, ids.shape[0], 32):
        u = mim.session_embedding(model, ids[start:start + 32],
                                  patches[start:start + 32])
        for j, vec in enumerate(u):
            embeddings[records[start + j].patient_id] = vec
    tasks = bench.default_tasks(
        cohortgen.default_phenotypes(profile.cohort.channel_names),
        profile.bench)
    results = bench.benchmark_run(tasks, records,
                                  day_index["session_days"],
                                  day_index["session_ids"],
                                  embeddings, profile.bench, seed)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        json.dump([dataclasses.asdict(r) for r in results], fh, indent=1,
                  sort_keys=True)
    for r in results:
        status = r.skipped or f"auroc\t{r.auroc_mean:.4f}\t{r.auroc_sd:.4f}"
        click.echo(f"task\t{r.task_id}\t{status}")
    manifest.output_ids = {out.name: ""}
    write_manifest(out, manifest)


@cli.command("report")
@click.option("--results", "results_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
def report_cmd(results_path):
    """Per-axis aggregate table (mean +/- sd) for a finished probe run."""
    with open(results_path) as fh:
        raw = json.load(fh)
    results = [bench.TaskResult(**r) for r in raw]
    click.echo("task\taxis\tn_rows\tauroc_mean\tauroc_sd\tbacc_mean\tbacc_sd")
    for r in results:
        if r.skipped:
            click.echo(f"{r.task_id}\t{r.axis}\t{r.n_rows}\tskipped: "
                       f"{r.skipped}")
        else:
            click.echo(f"{r.task_id}\t{r.axis}\t{r.n_rows}"
                       f"\t{r.auroc_mean:.4f}\t{r.auroc_sd:.4f}"
                       f"\t{r.bacc_mean:.4f}\t{r.bacc_sd:.4f}")
    click.echo("axis\tauroc_mean\tauroc_sd\tn_tasks")
    for axis, (mean, sd, n) in bench.aggregate_by_axis(results).items():
        click.echo(f"{axis}\t{mean:.4f}\t{sd:.4f}\t{n}")


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.Abort:
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        click.echo(f"numeric error: {exc}", err=True)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
