"""Minimal conditional synthesizer and the end-to-end training step.

This is a stand-in for a full VITS-style model: a phoneme encoder with
additive speaker/locale embeddings, and a convolutional decoder over the
duration-expanded sequence that predicts log-compressed spectrogram frames.
Its only job is to give the reference encoders a reconstruction gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .conditioning import (
    ConditioningMatrix,
    ConditioningPlan,
    build_conditioning,
    split_noise_streams,
    training_plan,
)
from .corpus import FrameSpec, PreparedUtterance, compute_features
from .encoder import EncoderConfig, ReferenceEncoder, encode_chunked, encode_posteriors, sample_embedding
from .errors import ConfigurationError, DivergenceError, InputError, SchemaError, ShapeError
from .losses import LossBreakdown, LossWeights, mean_breakdown, total_loss
from .segmentation import Mode, PhraseSet, phoneme_durations, segment_phrases, spans_for_mode


@dataclass(frozen=True)
class BackboneConfig:
    phoneme_vocab_size: int = 64
    speaker_count: int = 1
    locale_count: int = 1
    num_bins: int = 513
    text_channels: int = 64
    text_layers: int = 2
    text_kernel: int = 3
    speaker_embedding_dim: int = 16
    locale_embedding_dim: int = 8
    decoder_channels: int = 128
    decoder_layers: int = 3
    decoder_kernel: int = 3  # 1 makes the decoder strictly frame-local

    def __post_init__(self):
        values = asdict(self)
        bad = [k for k, v in values.items() if k != "text_layers" and v < 1]
        if bad or self.text_layers < 0:
            raise ConfigurationError(f"backbone sizes must be >= 1: {bad or ['text_layers']}")
        if self.text_kernel % 2 != 1 or self.decoder_kernel % 2 != 1:
            raise ConfigurationError("text and decoder kernels must be odd")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Vocabulary:
    phonemes: list[str]
    speakers: list[str]
    locales: list[str]

    @classmethod
    def build(cls, phoneme_seqs: Sequence[Sequence[str]], speakers: Sequence[str], locales: Sequence[str]) -> "Vocabulary":
        return cls(
            sorted({p for seq in phoneme_seqs for p in seq}),
            sorted(set(speakers)),
            sorted(set(locales)),
        )

    def _lookup(self, table: list[str], value: str, kind: str) -> int:
        try:
            return table.index(value)
        except ValueError:
            raise SchemaError(f"unknown {kind} {value!r}") from None

    def phoneme_ids(self, phonemes: Sequence[str]) -> torch.Tensor:
        index = {p: i for i, p in enumerate(self.phonemes)}
        missing = sorted({p for p in phonemes if p not in index})
        if missing:
            raise SchemaError(f"phonemes not in the training vocabulary: {missing}")
        return torch.tensor([index[p] for p in phonemes], dtype=torch.long)

    def speaker_index(self, speaker: str) -> int:
        return self._lookup(self.speakers, speaker, "speaker")

    def locale_index(self, locale: str) -> int:
        return self._lookup(self.locales, locale, "locale")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthOutput:
    predicted_features: torch.Tensor  # (T', num_bins), log1p magnitudes
    per_phoneme_durations: torch.Tensor  # (N,)


class TextEncoder(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.phoneme_embedding = nn.Embedding(config.phoneme_vocab_size, config.text_channels)
        self.convs = nn.ModuleList(
            nn.Conv1d(config.text_channels, config.text_channels, config.text_kernel, padding=config.text_kernel // 2)
            for _ in range(config.text_layers)
        )
        self.speaker_embedding = nn.Embedding(config.speaker_count, config.speaker_embedding_dim)
        self.locale_embedding = nn.Embedding(config.locale_count, config.locale_embedding_dim)
        self.speaker_proj = nn.Linear(config.speaker_embedding_dim, config.text_channels, bias=False)
        self.locale_proj = nn.Linear(config.locale_embedding_dim, config.text_channels, bias=False)

    def forward(self, phoneme_ids: torch.Tensor, speaker_id: int, locale_id: int) -> torch.Tensor:
        x = self.phoneme_embedding(phoneme_ids).t().unsqueeze(0)
        for conv in self.convs:
            x = x + torch.relu(conv(x))
        x = x.squeeze(0).t()
        identity = self.speaker_proj(self.speaker_embedding.weight[speaker_id]) + self.locale_proj(
            self.locale_embedding.weight[locale_id]
        )
        return x + identity


class Decoder(nn.Module):
    def __init__(self, config: BackboneConfig, conditioning_dim: int):
        super().__init__()
        c = config.decoder_channels
        self.inp = nn.Conv1d(config.text_channels + conditioning_dim, c, 1)
        self.convs = nn.ModuleList(
            nn.Conv1d(c, c, config.decoder_kernel, padding=config.decoder_kernel // 2)
            for _ in range(config.decoder_layers)
        )
        self.out = nn.Conv1d(c, config.num_bins, 1)

    def forward(self, expanded: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.inp(expanded.t().unsqueeze(0)))
        for conv in self.convs:
            x = x + torch.relu(conv(x))
        return self.out(x).squeeze(0).t()


class DubbingModel(nn.Module):
    """Prosody and noise reference encoders plus the conditional synthesizer."""

    def __init__(self, encoder_config: EncoderConfig, backbone_config: BackboneConfig):
        super().__init__()
        if encoder_config.input_bins != backbone_config.num_bins:
            raise ConfigurationError(
                f"encoder reads {encoder_config.input_bins} bins, decoder writes {backbone_config.num_bins}"
            )
        self.encoder_config = encoder_config
        self.backbone_config = backbone_config
        self.prosody_encoder = ReferenceEncoder(encoder_config)
        self.noise_encoder = ReferenceEncoder(encoder_config)
        self.text_encoder = TextEncoder(backbone_config)
        self.decoder = Decoder(backbone_config, 2 * encoder_config.latent_dim)


def encode_text(phoneme_ids: torch.Tensor, speaker_id: int, locale_id: int, model: DubbingModel) -> torch.Tensor:
    """One text vector per phoneme, with speaker and locale embeddings added to every row."""
    cfg = model.backbone_config
    if phoneme_ids.numel() == 0:
        raise InputError("cannot encode an empty phoneme sequence")
    if int(phoneme_ids.min()) < 0 or int(phoneme_ids.max()) >= cfg.phoneme_vocab_size:
        raise InputError(f"phoneme id outside [0, {cfg.phoneme_vocab_size})")
    if not 0 <= speaker_id < cfg.speaker_count:
        raise InputError(f"speaker id {speaker_id} outside [0, {cfg.speaker_count})")
    if not 0 <= locale_id < cfg.locale_count:
        raise InputError(f"locale id {locale_id} outside [0, {cfg.locale_count})")
    return model.text_encoder(phoneme_ids, speaker_id, locale_id)


def synthesize(
    text_encoding: torch.Tensor,
    conditioning: ConditioningMatrix | torch.Tensor,
    durations: Sequence[int] | torch.Tensor,
    model: DubbingModel,
) -> SynthOutput:
    rows = conditioning.rows if isinstance(conditioning, ConditioningMatrix) else conditioning
    durations = torch.as_tensor(durations, dtype=torch.long)
    n = text_encoding.shape[0]
    if rows.shape[0] != n:
        raise ShapeError(f"{rows.shape[0]} conditioning rows for {n} phonemes")
    if durations.shape != (n,):
        raise ShapeError(f"{tuple(durations.shape)} durations for {n} phonemes")
    if int(durations.min()) < 1:
        raise ShapeError("every phoneme needs a duration of at least one frame")
    joined = torch.cat([text_encoding, rows.to(text_encoding.dtype)], dim=-1)
    expanded = torch.repeat_interleave(joined, durations, dim=0)
    return SynthOutput(model.decoder(expanded), durations)


# --------------------------------------------------------------------------- training data


@dataclass
class TrainingItem:
    utterance_id: str
    features: torch.Tensor  # (T, bins) magnitudes of the original audio
    denoised_features: torch.Tensor
    noise_features: torch.Tensor
    spans: PhraseSet  # phrase level; modes derive their own layout
    phoneme_ids: torch.Tensor
    speaker_index: int
    locale_index: int
    durations: torch.Tensor

    def to(self, dtype: torch.dtype) -> "TrainingItem":
        return TrainingItem(
            self.utterance_id, self.features.to(dtype), self.denoised_features.to(dtype),
            self.noise_features.to(dtype), self.spans, self.phoneme_ids, self.speaker_index,
            self.locale_index, self.durations,
        )


def make_training_item(
    prepared: PreparedUtterance,
    vocab: Vocabulary,
    spec: FrameSpec,
    denoiser=None,
    min_silence_s: float = 0.05,
) -> TrainingItem:
    record = prepared.record
    speech = [t.token for t in prepared.tokens if not t.is_silence]
    if tuple(speech) != tuple(record.phonemes):
        raise SchemaError(
            f"{record.utterance_id}: alignment phonemes {speech} differ from manifest phonemes {list(record.phonemes)}"
        )
    kwargs = {} if denoiser is None else {"denoiser": denoiser}
    streams = split_noise_streams(prepared.audio, sample_rate=spec.sample_rate_hz, **kwargs)
    as_t = lambda a: torch.from_numpy(compute_features(a, spec).frames)  # noqa: E731
    return TrainingItem(
        record.utterance_id,
        as_t(prepared.audio),
        as_t(streams.denoised),
        as_t(streams.noise),
        segment_phrases(prepared.tokens, spec, min_silence_s),
        vocab.phoneme_ids(record.phonemes),
        vocab.speaker_index(record.speaker_id),
        vocab.locale_index(record.locale),
        torch.tensor(phoneme_durations(prepared.tokens, spec), dtype=torch.long),
    )


def validate_item(item: TrainingItem) -> None:
    t = item.features.shape[0]
    for name in ("denoised_features", "noise_features"):
        if getattr(item, name).shape != item.features.shape:
            raise ShapeError(f"{item.utterance_id}: {name} shape differs from features")
    if item.spans.total_frames != t:
        raise ShapeError(f"{item.utterance_id}: spans cover {item.spans.total_frames} frames, features have {t}")
    if int(item.durations.sum()) != t:
        raise ShapeError(f"{item.utterance_id}: durations sum to {int(item.durations.sum())}, features have {t}")
    n = item.phoneme_ids.shape[0]
    if item.spans.total_phonemes != n or item.durations.shape[0] != n:
        raise ShapeError(f"{item.utterance_id}: phoneme, span and duration counts disagree")


# --------------------------------------------------------------------------- objective


def reconstruction_loss(predicted: torch.Tensor, target_magnitudes: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance in log1p-magnitude space."""
    return (predicted - torch.log1p(target_magnitudes)).abs().mean()


def utterance_loss(
    model: DubbingModel,
    item: TrainingItem,
    weights: LossWeights,
    mode: Mode | str,
    prosody_noise: Optional[torch.Tensor] = None,
    noise_noise: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Loss for one utterance. ``None`` noise draws mean posterior-mean conditioning."""
    spans = spans_for_mode(item.spans, mode)
    prosody_post = encode_posteriors(item.denoised_features, spans, model.prosody_encoder)
    noise_post = encode_posteriors(item.noise_features, spans, model.noise_encoder)

    def draw(posteriors, eps):
        if eps is None:
            return [sample_embedding(p, "inference") for p in posteriors]
        return [sample_embedding(p, "train", e) for p, e in zip(posteriors, eps)]

    plan = training_plan(spans, [str(i) for i in item.phoneme_ids.tolist()])
    cond = build_conditioning(draw(prosody_post, prosody_noise), draw(noise_post, noise_noise), plan)
    text = encode_text(item.phoneme_ids, item.speaker_index, item.locale_index, model)
    out = synthesize(text, cond, item.durations, model)
    recon = reconstruction_loss(out.predicted_features, item.features)
    return total_loss(recon, prosody_post, noise_post, spans.lengths, weights)


def make_optimizer(model: nn.Module, learning_rate: float = 2e-4, weight_decay: float = 0.01) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=weight_decay)


def train_step(
    batch: Sequence[TrainingItem],
    model: DubbingModel,
    optimizer: torch.optim.Optimizer,
    weights: LossWeights,
    mode: Mode | str = Mode.PVAE,
    generator: Optional[torch.Generator] = None,
    step: int = 0,
) -> LossBreakdown:
    """One gradient step on the batch mean loss; updates ``model`` and ``optimizer`` in place.

    Embeddings are reparameterized samples drawn from ``generator``. The batch
    is validated before any parameter changes.
    """
    mode = Mode.parse(mode)
    if mode is Mode.GVAE_PP:
        raise ConfigurationError("GVAE-PP is an inference-time variant; train with GVAE")
    if not batch:
        raise InputError("empty batch")
    for item in batch:
        validate_item(item)
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    dtype = next(model.parameters()).dtype
    latent = model.encoder_config.latent_dim

    model.train()
    optimizer.zero_grad(set_to_none=True)
    per_item = []
    for item in batch:
        k = spans_for_mode(item.spans, mode).K
        eps_p = torch.randn((k, latent), generator=generator, dtype=dtype)
        eps_n = torch.randn((k, latent), generator=generator, dtype=dtype)
        per_item.append(utterance_loss(model, item.to(dtype), weights, mode, eps_p, eps_n))
    loss = mean_breakdown(per_item)
    if not loss.is_finite():
        raise DivergenceError(f"non-finite loss at step {step}: {loss.as_floats()}")
    loss.total.backward()
    optimizer.step()
    return LossBreakdown(*(t.detach() for t in (loss.reconstruction, loss.prosody_kld, loss.noise_kld, loss.total)))


# --------------------------------------------------------------------------- inference


def infer_features(
    model: DubbingModel,
    denoised_features: torch.Tensor,
    plan: ConditioningPlan,
    noise_embeddings,
    speaker_index: int,
    locale_index: int,
    phoneme_ids: torch.Tensor,
    durations: Sequence[int],
    chunked: bool = False,
) -> SynthOutput:
    """Predict target features from source-phrase prosody and given clean-noise embeddings.

    ``chunked`` encodes each source phrase on its own (the per-phrase variant of
    a globally trained encoder).
    """
    model.eval()
    encode = encode_chunked if chunked else encode_posteriors
    with torch.no_grad():
        posteriors = encode(denoised_features, plan.source_spans, model.prosody_encoder)
        prosody = [sample_embedding(p, "inference") for p in posteriors]
        cond = build_conditioning(prosody, noise_embeddings, plan)
        text = encode_text(phoneme_ids, speaker_index, locale_index, model)
        return synthesize(text, cond, durations, model)
