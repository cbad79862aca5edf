"""Training, dubbing and evaluation runs driven by a JSON config."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

from .backbone import (
    BackboneConfig,
    DubbingModel,
    Vocabulary,
    infer_features,
    make_optimizer,
    make_training_item,
    train_step,
)
from .checkpoint import load_checkpoint, load_state_checked, save_checkpoint
from .conditioning import (
    clean_noise_embeddings,
    get_denoiser,
    make_cross_lingual_plan,
    split_noise_streams,
    PHRASE_BREAK,
)
from .corpus import (
    FrameSpec,
    compute_features,
    load_manifest,
    parse_alignment,
    prepare_utterance,
    read_wav,
    UtteranceRecord,
)
from .encoder import EncoderConfig
from .errors import ConfigurationError, ModeError, PhraseDubError, SchemaError
from .evaluation import TranscriptPair, get_extractor, get_transcriber, metrics_report
from .losses import LossWeights
from .segmentation import Mode, segment_phrases, spans_for_mode

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
TRAIN_LOG_NAME = "train_log.jsonl"


@dataclass
class RunConfig:
    manifest: str = ""
    output_dir: str = "run"
    seed: int = 0
    mode: str = "PVAE"
    steps: int = 500
    batch_size: int = 10
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    min_silence_s: float = 0.05
    max_silence_s: float = 2.0
    denoiser: str = "identity"
    frame: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    backbone: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise SchemaError(f"unknown config keys: {unknown}")
        cfg = cls(**raw)
        if base_dir is not None:
            for name in ("manifest", "output_dir"):
                value = getattr(cfg, name)
                if value and not Path(value).is_absolute():
                    setattr(cfg, name, str(base_dir / value))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc.msg})") from exc
        return cls.from_dict(raw, path.parent)

    def validate(self) -> None:
        Mode.parse(self.mode)
        self.frame_spec()
        self.encoder_config()
        self.loss_weights()
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")

    def frame_spec(self) -> FrameSpec:
        return _build(FrameSpec, self.frame, "frame")

    def encoder_config(self) -> EncoderConfig:
        params = {"input_bins": self.frame_spec().num_bins, **self.encoder}
        return _build(EncoderConfig.desk_scale, params, "encoder")

    def backbone_config(self, vocab: Vocabulary) -> BackboneConfig:
        params = {
            **self.backbone,
            "num_bins": self.frame_spec().num_bins,
            "phoneme_vocab_size": len(vocab.phonemes),
            "speaker_count": len(vocab.speakers),
            "locale_count": len(vocab.locales),
        }
        return _build(BackboneConfig, params, "backbone")

    def loss_weights(self) -> LossWeights:
        return _build(LossWeights, self.loss, "loss")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(factory, params: dict, section: str):
    try:
        return factory(**params)
    except TypeError as exc:
        raise SchemaError(f"config section '{section}': {exc}") from exc


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    history: list[dict]


def load_training_items(config: RunConfig, records: Sequence[UtteranceRecord], vocab: Vocabulary):
    spec = config.frame_spec()
    denoiser = get_denoiser(config.denoiser)
    items = []
    for record in records:
        prepared = prepare_utterance(record, spec, config.max_silence_s)
        items.append(make_training_item(prepared, vocab, spec, denoiser, config.min_silence_s))
    return items


def run_train(config: RunConfig) -> TrainResult:
    """Train from scratch; writes the checkpoint and a per-step JSON-lines loss log."""
    mode = Mode.parse(config.mode)
    if mode is Mode.GVAE_PP:
        raise ModeError("GVAE-PP shares GVAE training and exists only at inference; train with mode GVAE")
    if not config.manifest:
        raise ConfigurationError("config needs a 'manifest' path")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    records = load_manifest(config.manifest)
    if not records:
        raise ConfigurationError(f"{config.manifest}: manifest is empty")
    vocab = Vocabulary.build([r.phonemes for r in records], [r.speaker_id for r in records], [r.locale for r in records])
    items = load_training_items(config, records, vocab)

    torch.manual_seed(config.seed)
    model = DubbingModel(config.encoder_config(), config.backbone_config(vocab))
    optimizer = make_optimizer(model, config.learning_rate, config.weight_decay)
    generator = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    weights = config.loss_weights()

    history = []
    log_path = out / TRAIN_LOG_NAME
    order: list[int] = []
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for step in range(1, config.steps + 1):
            if len(order) < config.batch_size:
                order += list(order_rng.permutation(len(items)))
            batch_idx, order = order[: config.batch_size], order[config.batch_size :]
            loss = train_step([items[i] for i in batch_idx], model, optimizer, weights, mode, generator, step)
            row = {"step": step, **loss.as_floats()}
            history.append(row)
            log_fh.write(json.dumps(row) + "\n")
            if step == 1 or step % 50 == 0:
                log.info("step %d %s", step, row)

    ckpt = out / CHECKPOINT_NAME
    save_model(ckpt, model, config, vocab, mode)
    return TrainResult(ckpt, log_path, history)


def save_model(path: Path, model: DubbingModel, config: RunConfig, vocab: Vocabulary, mode: Mode) -> None:
    save_checkpoint(
        path,
        model.state_dict(),
        {
            "encoder": model.encoder_config.to_dict(),
            "backbone": model.backbone_config.to_dict(),
            "run": config.to_dict(),
        },
        {"mode": mode.value, "seed": config.seed, "vocab": vocab.to_dict()},
    )


@dataclass
class LoadedModel:
    model: DubbingModel
    config: RunConfig
    vocab: Vocabulary
    mode: Mode


def load_model(path: str | Path) -> LoadedModel:
    payload = load_checkpoint(path)
    configs, meta = payload["configs"], payload["meta"]
    model = DubbingModel(EncoderConfig(**configs["encoder"]), BackboneConfig(**configs["backbone"]))
    load_state_checked(model, payload["state"])
    model.eval()
    return LoadedModel(model, RunConfig(**configs["run"]), Vocabulary(**meta["vocab"]), Mode.parse(meta["mode"]))


# --------------------------------------------------------------------------- dubbing

ALLOWED_INFERENCE = {Mode.PVAE: {Mode.PVAE}, Mode.GVAE: {Mode.GVAE, Mode.GVAE_PP}}


@dataclass
class DubRequest:
    request_id: str
    utterance_id: str
    target_text: str
    target_locale: str
    target_speaker_id: str
    clean_audio_path: str
    clean_alignment_path: Optional[str] = None
    durations: Optional[list[int]] = None
    line: int = 0

    REQUIRED = ("utterance_id", "target_text", "target_locale", "target_speaker_id", "clean_audio_path")

    @classmethod
    def from_json(cls, raw: dict, line: int, base: Path) -> "DubRequest":
        for name in cls.REQUIRED:
            if name not in raw:
                raise SchemaError(f"request line {line}: missing required field '{name}'")
        resolve = lambda p: None if p is None else str(base / p)  # noqa: E731
        return cls(
            request_id=str(raw.get("request_id", raw["utterance_id"])),
            utterance_id=str(raw["utterance_id"]),
            target_text=str(raw["target_text"]),
            target_locale=str(raw["target_locale"]),
            target_speaker_id=str(raw["target_speaker_id"]),
            clean_audio_path=resolve(raw["clean_audio_path"]),
            clean_alignment_path=resolve(raw.get("clean_alignment_path")),
            durations=raw.get("durations"),
            line=line,
        )


@dataclass
class DubResult:
    outputs: list[dict]
    errors: list[dict]

    @property
    def exit_code(self) -> int:
        return 1 if self.errors else 0


def load_requests(path: str | Path) -> list[tuple[int, Any]]:
    """Parse a request file; malformed lines become per-entry exceptions, not aborts."""
    path = Path(path)
    entries: list[tuple[int, Any]] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append((line_no, DubRequest.from_json(json.loads(line), line_no, path.parent)))
            except (json.JSONDecodeError, SchemaError) as exc:
                entries.append((line_no, exc))
    return entries


def _dub_one(
    loaded: LoadedModel, request: DubRequest, records: dict[str, UtteranceRecord], mode: Mode,
    default_duration: int,
) -> np.ndarray:
    cfg = loaded.config
    spec = cfg.frame_spec()
    denoiser = get_denoiser(cfg.denoiser)
    if request.utterance_id not in records:
        raise SchemaError(f"source utterance '{request.utterance_id}' not in manifest")
    if not Path(request.clean_audio_path).is_file():
        raise SchemaError(f"clean reference audio missing: {request.clean_audio_path}")

    prepared = prepare_utterance(records[request.utterance_id], spec, cfg.max_silence_s)
    streams = split_noise_streams(prepared.audio, denoiser, spec.sample_rate_hz)
    denoised = torch.from_numpy(compute_features(streams.denoised, spec).frames)
    phrases = segment_phrases(prepared.tokens, spec, cfg.min_silence_s)

    if mode is Mode.GVAE:
        source_spans = spans_for_mode(phrases, Mode.GVAE)
        target_text = " ".join(t for t in request.target_text.split() if t != PHRASE_BREAK)
    else:
        source_spans = phrases
        target_text = request.target_text
    plan = make_cross_lingual_plan(source_spans, target_text, request.target_locale, request.target_speaker_id)

    clean_audio, rate = read_wav(request.clean_audio_path)
    if rate != spec.sample_rate_hz:
        raise SchemaError(f"clean reference at {rate} Hz, expected {spec.sample_rate_hz} Hz")
    clean_tokens = parse_alignment(request.clean_alignment_path) if request.clean_alignment_path else None
    noise = clean_noise_embeddings(
        clean_audio, clean_tokens, plan.K, loaded.model.noise_encoder, spec, denoiser, cfg.min_silence_s
    )

    durations = request.durations or [default_duration] * plan.num_phonemes
    if len(durations) != plan.num_phonemes:
        raise SchemaError(f"{len(durations)} durations for {plan.num_phonemes} target phonemes")
    out = infer_features(
        loaded.model,
        denoised,
        plan,
        noise,
        loaded.vocab.speaker_index(request.target_speaker_id),
        loaded.vocab.locale_index(request.target_locale),
        loaded.vocab.phoneme_ids(plan.target_phonemes),
        durations,
        chunked=mode is Mode.GVAE_PP,
    )
    return torch.expm1(out.predicted_features).clamp_min(0.0).numpy().astype(np.float32)


def run_dub(
    checkpoint: str | Path,
    requests_path: str | Path,
    out_dir: str | Path,
    manifest: Optional[str | Path] = None,
    mode: Optional[str] = None,
    allow_mode_mismatch: bool = False,
    default_duration: int = 8,
) -> DubResult:
    """Dub every request; failures are reported per entry and do not stop the batch.

    Writes ``features/<request_id>.npy``, ``outputs.jsonl`` and ``dub_report.json``.
    """
    loaded = load_model(checkpoint)
    mode_ = Mode.parse(mode) if mode else loaded.mode
    if mode_ not in ALLOWED_INFERENCE[loaded.mode] and not allow_mode_mismatch:
        raise ModeError(
            f"checkpoint trained as {loaded.mode.value} cannot run {mode_.value} inference "
            "(pass allow_mode_mismatch to override)"
        )
    manifest = manifest or loaded.config.manifest
    records = {r.utterance_id: r for r in load_manifest(manifest)}
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)

    outputs, errors = [], []
    seen: set[str] = set()
    for line, entry in load_requests(requests_path):
        if isinstance(entry, Exception):
            errors.append({"line": line, "request_id": None, "error": str(entry)})
            continue
        try:
            if entry.request_id in seen:
                raise SchemaError(f"duplicate request_id '{entry.request_id}'")
            seen.add(entry.request_id)
            feats = _dub_one(loaded, entry, records, mode_, default_duration)
        except PhraseDubError as exc:
            log.warning("request %s (line %d) failed: %s", entry.request_id, line, exc)
            errors.append({"line": line, "request_id": entry.request_id, "error_type": type(exc).__name__,
                           "error": str(exc)})
            continue
        rel = Path("features") / f"{entry.request_id}.npy"
        np.save(out / rel, feats)
        outputs.append({
            "request_id": entry.request_id,
            "utterance_id": entry.utterance_id,
            "features_path": str(rel),
            "num_frames": int(feats.shape[0]),
            "num_phonemes": sum(1 for t in entry.target_text.split() if t != PHRASE_BREAK),
            "target_locale": entry.target_locale,
            "target_speaker_id": entry.target_speaker_id,
            "mode": mode_.value,
        })
    with open(out / "outputs.jsonl", "w", encoding="utf-8") as fh:
        for row in outputs:
            fh.write(json.dumps(row) + "\n")
    report = {"succeeded": len(outputs), "failed": len(errors), "errors": errors}
    (out / "dub_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return DubResult(outputs, errors)


# --------------------------------------------------------------------------- evaluation


def _read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_eval(
    out_dir: str | Path,
    references_path: str | Path,
    transcripts_path: Optional[str | Path] = None,
    transcriber: Optional[str] = None,
    extractor: Optional[str] = None,
    metrics: Sequence[str] = ("wer", "cfdsd"),
) -> dict:
    """Score dubbed outputs against references; writes ``metrics.json`` in ``out_dir``.

    References are JSON lines with ``utterance_id`` (the request id), ``text``
    and either ``features_path`` (.npy magnitudes) or ``audio_path`` (WAV).
    Hypothesis transcripts come from ``transcripts_path`` when given, else
    from the ``transcriber`` plug-in.
    """
    out = Path(out_dir)
    ref_base = Path(references_path).parent
    outputs = {row["request_id"]: row for row in _read_jsonl(out / "outputs.jsonl")}
    references = {str(row["utterance_id"]): row for row in _read_jsonl(references_path)}
    generated = {uid: np.load(out / row["features_path"]) for uid, row in outputs.items()}
    lengths = {
        uid: int(references.get(uid, {}).get("phoneme_count", row["num_phonemes"])) for uid, row in outputs.items()
    }

    wer_pairs = None
    if "wer" in metrics:
        if transcripts_path is not None:
            hyps = {str(r["utterance_id"]): str(r["text"]).split() for r in _read_jsonl(transcripts_path)}
        elif transcriber is not None:
            asr = get_transcriber(transcriber)
            hyps = {uid: list(asr(feats)) for uid, feats in generated.items()}
        else:
            raise ConfigurationError("WER needs hypothesis transcripts or a transcriber plug-in")
        missing = sorted(uid for uid in outputs if uid not in references or uid not in hyps)
        if missing:
            raise SchemaError(f"no reference text or hypothesis for: {missing}")
        wer_pairs = [
            TranscriptPair(uid, tuple(str(references[uid]["text"]).split()), tuple(hyps[uid])) for uid in sorted(outputs)
        ]

    gen_emb = ref_emb = None
    if "cfdsd" in metrics:
        if extractor is None:
            raise ConfigurationError("cFDSD needs an embedding extractor plug-in")
        extract = get_extractor(extractor)
        gen_emb = {uid: extract(f) for uid, f in generated.items()}
        ref_emb = {uid: extract(_reference_features(row, ref_base)) for uid, row in references.items()}

    report = metrics_report(wer_pairs, lengths, gen_emb, ref_emb)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return report


def _reference_features(row: dict, base: Path) -> np.ndarray:
    if "features_path" in row:
        return np.load(base / row["features_path"])
    if "audio_path" in row:
        audio, rate = read_wav(base / row["audio_path"])
        return compute_features(audio, FrameSpec(sample_rate_hz=rate)).frames
    raise SchemaError(f"reference {row.get('utterance_id')}: needs features_path or audio_path")


# --------------------------------------------------------------------------- inspection


def inspect_phrases(manifest: str | Path, spec: Optional[FrameSpec] = None, min_silence_s: float = 0.05,
                    max_silence_s: float = 2.0) -> list[str]:
    """One line per phrase span of every manifest utterance."""
    from .corpus import cap_long_silences

    spec = spec or FrameSpec()
    lines = []
    for record in load_manifest(manifest):
        tokens, _ = cap_long_silences(parse_alignment(record.alignment_path), max_silence_s)
        phrases = segment_phrases(tokens, spec, min_silence_s)
        for span in phrases.spans:
            lines.append(
                f"{record.utterance_id}\t{span.index}\tphonemes=[{span.phoneme_range[0]},{span.phoneme_range[1]})"
                f"\tframes=[{span.frame_range[0]},{span.frame_range[1]})\tL={span.phoneme_count}"
                f"\tsilence={span.boundary_silence_s:.3f}"
            )
    return lines
