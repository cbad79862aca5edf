"""Phrase-level variational reference encoder.

A stack of stride-1 convolutions and one bi-directional LSTM produce one
embedding per spectrogram frame. Each phrase is reduced to its middle frame
and a linear head maps that frame to a diagonal Gaussian posterior.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .corpus import FeatureMatrix
from .errors import ConfigurationError, ShapeError
from .segmentation import PhraseSet, PhraseSpan


@dataclass(frozen=True)
class EncoderConfig:
    input_bins: int = 513
    conv_layers: int = 5
    conv_channels: int = 512
    kernel: int = 3
    stride: int = 1
    recurrent_channels: int = 512  # per direction
    latent_dim: int = 32
    log_variance_min: float = -12.0
    log_variance_max: float = 6.0
    pooling: str = "middle"  # or "mean"

    def __post_init__(self):
        sizes = (self.input_bins, self.conv_layers, self.conv_channels, self.kernel,
                 self.recurrent_channels, self.latent_dim)
        if min(sizes) < 1:
            raise ConfigurationError(f"encoder sizes must be >= 1: {self}")
        if self.stride != 1:
            raise ConfigurationError("reference encoder convolutions must keep stride 1")
        if self.kernel % 2 != 1:
            raise ConfigurationError("kernel must be odd for length-preserving symmetric padding")
        if self.pooling not in ("middle", "mean"):
            raise ConfigurationError(f"unknown pooling {self.pooling!r}")
        if not self.log_variance_min < self.log_variance_max:
            raise ConfigurationError("log-variance clamp interval is empty")

    @classmethod
    def desk_scale(cls, **overrides) -> "EncoderConfig":
        params = dict(conv_channels=64, recurrent_channels=64, latent_dim=8)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaussianPosterior:
    mean: torch.Tensor  # (latent_dim,)
    log_variance: torch.Tensor  # (latent_dim,)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class ProsodyEmbedding:
    values: torch.Tensor  # (latent_dim,)
    source: str  # "sampled" or "mean"


FeaturesLike = Union[FeatureMatrix, np.ndarray, torch.Tensor]


def middle_frame(span: PhraseSpan) -> int:
    start, end = span.frame_range
    return start + (end - start) // 2


def downsample(frames: torch.Tensor, spans: PhraseSet, pooling: str = "middle") -> torch.Tensor:
    """Reduce (T, C) frame embeddings to (K, C), one row per phrase."""
    if pooling == "middle":
        idx = torch.tensor([middle_frame(s) for s in spans.spans], dtype=torch.long)
        return frames.index_select(0, idx)
    return torch.stack([frames[s.frame_range[0] : s.frame_range[1]].mean(dim=0) for s in spans.spans])


class ReferenceEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.convs = nn.ModuleList(
            nn.Conv1d(
                config.input_bins if i == 0 else config.conv_channels,
                config.conv_channels,
                config.kernel,
                stride=1,
                padding=config.kernel // 2,
            )
            for i in range(config.conv_layers)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(config.conv_channels) for _ in range(config.conv_layers))
        self.rnn = nn.LSTM(config.conv_channels, config.recurrent_channels, batch_first=True, bidirectional=True)
        self.head = nn.Linear(2 * config.recurrent_channels, 2 * config.latent_dim)

    def frame_embeddings(self, frames: torch.Tensor) -> torch.Tensor:
        """(T, bins) magnitudes -> (T, 2 * recurrent_channels)."""
        x = torch.log1p(frames).t().unsqueeze(0)  # (1, bins, T)
        for conv, norm in zip(self.convs, self.norms):
            x = torch.relu(conv(x))
            x = norm(x.transpose(1, 2)).transpose(1, 2)
        out, _ = self.rnn(x.transpose(1, 2))
        return out.squeeze(0)

    def forward(self, frames: torch.Tensor, spans: PhraseSet) -> tuple[torch.Tensor, torch.Tensor]:
        """Posterior parameters ``(mean, log_variance)``, each (K, latent_dim)."""
        if frames.shape[0] != spans.total_frames:
            raise ShapeError(f"features have {frames.shape[0]} frames, spans cover {spans.total_frames}")
        if frames.shape[1] != self.config.input_bins:
            raise ShapeError(f"features have {frames.shape[1]} bins, encoder expects {self.config.input_bins}")
        pooled = downsample(self.frame_embeddings(frames), spans, self.config.pooling)
        mean, log_variance = self.head(pooled).chunk(2, dim=-1)
        log_variance = log_variance.clamp(self.config.log_variance_min, self.config.log_variance_max)
        return mean, log_variance


def as_tensor(features: FeaturesLike, like: Optional[nn.Module] = None) -> torch.Tensor:
    if isinstance(features, FeatureMatrix):
        features = features.frames
    dtype = torch.float32
    if like is not None:
        dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(features) if not torch.is_tensor(features) else features, dtype=dtype)


def _split(mean: torch.Tensor, log_variance: torch.Tensor) -> list[GaussianPosterior]:
    return [GaussianPosterior(m, v) for m, v in zip(mean, log_variance)]


def encode_posteriors(features: FeaturesLike, spans: PhraseSet, encoder: ReferenceEncoder) -> list[GaussianPosterior]:
    """One posterior per phrase, encoding the whole utterance in one pass."""
    mean, log_variance = encoder(as_tensor(features, encoder), spans)
    return _split(mean, log_variance)


def chunk_spans(spans: PhraseSet) -> list[tuple[PhraseSpan, PhraseSet]]:
    """Each span paired with a one-span layout of its own frame slice."""
    out = []
    for span in spans.spans:
        local = PhraseSpan(0, (0, span.phoneme_count), (0, span.num_frames), span.boundary_silence_s)
        out.append((span, PhraseSet((local,), span.num_frames)))
    return out


def encode_chunked(features: FeaturesLike, spans: PhraseSet, encoder: ReferenceEncoder) -> list[GaussianPosterior]:
    """Encode each phrase's frames separately as if it were a whole utterance."""
    frames = as_tensor(features, encoder)
    if frames.shape[0] != spans.total_frames:
        raise ShapeError(f"features have {frames.shape[0]} frames, spans cover {spans.total_frames}")
    posteriors = []
    for span, local in chunk_spans(spans):
        mean, log_variance = encoder(frames[span.frame_range[0] : span.frame_range[1]], local)
        posteriors.extend(_split(mean, log_variance))
    return posteriors


def sample_embedding(
    posterior: GaussianPosterior,
    mode: str = "inference",
    noise: Optional[Union[torch.Tensor, torch.Generator]] = None,
) -> ProsodyEmbedding:
    """Reparameterized sample in ``train`` mode, the posterior mean otherwise."""
    if mode == "inference":
        return ProsodyEmbedding(posterior.mean, "mean")
    if mode != "train":
        raise ConfigurationError(f"unknown sampling mode {mode!r}")
    if noise is None:
        raise ConfigurationError("train-mode sampling needs a noise tensor or generator")
    if isinstance(noise, torch.Generator):
        noise = torch.randn(posterior.mean.shape, generator=noise, dtype=posterior.mean.dtype)
    values = posterior.mean + torch.exp(0.5 * posterior.log_variance) * noise
    return ProsodyEmbedding(values, "sampled")


def stack_embeddings(embeddings: Sequence[ProsodyEmbedding]) -> torch.Tensor:
    return torch.stack([e.values for e in embeddings])


def save_encoder(path, encoder: ReferenceEncoder, meta: Optional[dict] = None) -> None:
    from .checkpoint import save_checkpoint

    save_checkpoint(path, encoder.state_dict(), {"encoder": encoder.config.to_dict()}, meta)


def load_encoder(path) -> ReferenceEncoder:
    """Rebuild an encoder from its checkpoint, verifying every parameter shape."""
    from .checkpoint import load_checkpoint, load_state_checked

    payload = load_checkpoint(path)
    encoder = ReferenceEncoder(EncoderConfig(**payload["configs"]["encoder"]))
    load_state_checked(encoder, payload["state"])
    return encoder
