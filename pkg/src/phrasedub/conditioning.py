"""Dual-stream phrase conditioning and its broadcast to target phonemes."""

from __future__ import annotations

import importlib
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from .corpus import AlignedToken, FrameSpec, compute_features
from .encoder import ProsodyEmbedding, ReferenceEncoder, encode_posteriors, sample_embedding
from .errors import (
    CleanReferenceError,
    CountError,
    PhraseMismatchError,
    PluginError,
    SchemaError,
)
from .segmentation import DEFAULT_MIN_SILENCE_S, PhraseSet, segment_phrases

PHRASE_BREAK = "|"

# A denoiser maps (audio, sample_rate) to the denoised waveform, or to a
# (denoised, noise) pair that must add back up to the input.
Denoiser = Callable[[np.ndarray, int], Union[np.ndarray, tuple[np.ndarray, np.ndarray]]]
Lexicon = Union[Mapping[str, Sequence[str]], Callable[[str], Sequence[str]]]

RECONSTRUCTION_TOL = 1e-6


@dataclass
class NoiseStreams:
    denoised: np.ndarray
    noise: np.ndarray


def identity_denoiser(audio: np.ndarray, sample_rate: int) -> np.ndarray:
    return audio


class MovingAverageDenoiser:
    """Treats everything a short moving average removes as noise.

    Crude, but it yields a non-trivial noise stream for toy training.
    """

    def __init__(self, width: int = 9):
        self.width = width

    def __call__(self, audio: np.ndarray, sample_rate: int) -> np.ndarray:
        kernel = np.ones(self.width) / self.width
        return np.convolve(audio, kernel, mode="same")


DENOISERS: dict[str, Callable[[], Denoiser]] = {
    "identity": lambda: identity_denoiser,
    "moving-average": MovingAverageDenoiser,
}


def get_denoiser(name: str) -> Denoiser:
    """Look up a registered denoiser or import one given as ``module:attribute``."""
    if name in DENOISERS:
        return DENOISERS[name]()
    if ":" in name:
        module, attr = name.split(":", 1)
        try:
            obj = getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise PluginError(f"cannot import denoiser {name!r}: {exc}") from exc
        return obj
    raise PluginError(f"unknown denoiser {name!r}; registered: {sorted(DENOISERS)}")


def split_noise_streams(audio: np.ndarray, denoiser: Denoiser = identity_denoiser,
                        sample_rate: int = 24000) -> NoiseStreams:
    audio = np.asarray(audio, dtype=np.float64)
    out = denoiser(audio, sample_rate)
    if isinstance(out, tuple):
        denoised, noise = (np.asarray(x, dtype=np.float64) for x in out)
    else:
        denoised = np.asarray(out, dtype=np.float64)
        noise = audio - denoised if denoised.shape == audio.shape else denoised
    if denoised.shape != audio.shape or noise.shape != audio.shape:
        raise PluginError(
            f"denoiser returned streams of shape {denoised.shape}/{noise.shape} for input {audio.shape}"
        )
    err = np.max(np.abs(denoised + noise - audio)) if audio.size else 0.0
    if err > RECONSTRUCTION_TOL:
        raise PluginError(f"denoised + noise misses the input by {err:.3g}")
    return NoiseStreams(denoised, noise)


# --------------------------------------------------------------------------- plans


@dataclass(frozen=True)
class ConditioningPlan:
    source_spans: PhraseSet
    target_phrase_phoneme_counts: tuple[int, ...]
    target_phonemes: tuple[str, ...] = ()
    target_locale: str = ""
    target_speaker_id: str = ""

    def __post_init__(self):
        counts = self.target_phrase_phoneme_counts
        if len(counts) != self.source_spans.K:
            raise PhraseMismatchError(self.source_spans.K, len(counts))
        if any(c < 1 for c in counts):
            raise CountError(f"every target phrase needs at least one phoneme, got {counts}")
        if self.target_phonemes and len(self.target_phonemes) != sum(counts):
            raise CountError(f"{len(self.target_phonemes)} target phonemes but counts sum to {sum(counts)}")

    @property
    def K(self) -> int:
        return len(self.target_phrase_phoneme_counts)

    @property
    def num_phonemes(self) -> int:
        return sum(self.target_phrase_phoneme_counts)


@dataclass
class ConditioningMatrix:
    rows: torch.Tensor  # (N_phonemes, prosody_dim + noise_dim)
    phrase_index: np.ndarray  # (N_phonemes,) source phrase feeding each row


def _embedding_matrix(embeddings) -> torch.Tensor:
    if torch.is_tensor(embeddings):
        return embeddings
    return torch.stack([e.values if isinstance(e, ProsodyEmbedding) else torch.as_tensor(e) for e in embeddings])


def build_conditioning(prosody, noise, plan: ConditioningPlan) -> ConditioningMatrix:
    """Concatenate phrase k's prosody and noise embeddings onto every phoneme of target phrase k."""
    prosody = _embedding_matrix(prosody)
    noise = _embedding_matrix(noise)
    if prosody.shape[0] != plan.K or noise.shape[0] != plan.K:
        raise CountError(
            f"plan has {plan.K} phrases but got {prosody.shape[0]} prosody and {noise.shape[0]} noise embeddings"
        )
    counts = torch.as_tensor(plan.target_phrase_phoneme_counts, dtype=torch.long)
    phrase_rows = torch.cat([prosody, noise], dim=-1)
    rows = torch.repeat_interleave(phrase_rows, counts, dim=0)
    index = np.repeat(np.arange(plan.K), plan.target_phrase_phoneme_counts)
    return ConditioningMatrix(rows, index)


def phonemize(word: str, lexicon: Optional[Lexicon]) -> list[str]:
    if lexicon is None:
        return [word]
    if callable(lexicon):
        return list(lexicon(word))
    if word not in lexicon:
        raise SchemaError(f"word {word!r} missing from lexicon")
    return list(lexicon[word])


def split_phrases(target_text: Union[str, Sequence[str]], lexicon: Optional[Lexicon] = None) -> list[list[str]]:
    """Phoneme lists per phrase of a ``|``-delimited target text."""
    tokens = target_text.split() if isinstance(target_text, str) else list(target_text)
    phrases: list[list[str]] = [[]]
    for tok in tokens:
        if tok == PHRASE_BREAK:
            phrases.append([])
        else:
            phrases[-1].extend(phonemize(tok, lexicon))
    if any(not p for p in phrases):
        raise SchemaError(f"target text has an empty phrase: {' '.join(tokens)!r}")
    return phrases


def make_cross_lingual_plan(
    source_spans: PhraseSet,
    target_text: Union[str, Sequence[str]],
    target_locale: str = "",
    target_speaker_id: str = "",
    lexicon: Optional[Lexicon] = None,
) -> ConditioningPlan:
    """Pair source phrase k with target phrase k; phrase counts must match exactly."""
    phrases = split_phrases(target_text, lexicon)
    if len(phrases) != source_spans.K:
        raise PhraseMismatchError(source_spans.K, len(phrases))
    return ConditioningPlan(
        source_spans,
        tuple(len(p) for p in phrases),
        tuple(ph for p in phrases for ph in p),
        target_locale,
        target_speaker_id,
    )


def training_plan(spans: PhraseSet, phonemes: Sequence[str], locale: str = "", speaker_id: str = "") -> ConditioningPlan:
    """In training the reference is the target itself, so phrase lengths carry over."""
    return ConditioningPlan(spans, tuple(spans.lengths), tuple(phonemes), locale, speaker_id)


# --------------------------------------------------------------------------- clean noise reference


def clean_noise_embeddings(
    clean_audio: np.ndarray,
    clean_alignment: Optional[Sequence[AlignedToken]],
    K: int,
    noise_encoder: ReferenceEncoder,
    spec: FrameSpec,
    denoiser: Denoiser = identity_denoiser,
    min_silence_s: float = DEFAULT_MIN_SILENCE_S,
) -> list[ProsodyEmbedding]:
    """Noise embedding of a one-phrase clean recording, replicated for K phrases.

    Without an alignment the whole recording counts as a single phrase.
    """
    if K < 1:
        raise CountError("K must be >= 1")
    clean_audio = np.asarray(clean_audio, dtype=np.float64)
    if clean_alignment is None:
        clean_alignment = [AlignedToken("<speech>", 0.0, clean_audio.size / spec.sample_rate_hz, False)]
    spans = segment_phrases(clean_alignment, spec, min_silence_s)
    if spans.K != 1:
        raise CleanReferenceError(f"clean reference must hold exactly one phrase, found {spans.K}")
    target = int(round(clean_alignment[-1].end_s * spec.sample_rate_hz))
    clean_audio = np.pad(clean_audio, (0, max(0, target - clean_audio.size)))[:target]
    streams = split_noise_streams(clean_audio, denoiser, spec.sample_rate_hz)
    feats = compute_features(streams.noise, spec)
    with torch.no_grad():
        (posterior,) = encode_posteriors(feats, spans, noise_encoder)
    embedding = sample_embedding(posterior, "inference")
    return [embedding] * K
