"""Objective metrics: corpus word error rate and conditional Fréchet distance."""

from __future__ import annotations

import importlib
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import InputError, NumericError, PairingError, PluginError

# Plug-in signatures. Both consume a (T, bins) magnitude array; an audio-domain
# backbone wraps its own front end.
Transcriber = Callable[[np.ndarray], Sequence[str]]
EmbeddingExtractor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TranscriptPair:
    utterance_id: str
    reference_words: tuple[str, ...]
    hypothesis_words: tuple[str, ...]

    def __post_init__(self):
        if not self.reference_words:
            raise InputError(f"{self.utterance_id}: reference transcript is empty")


@dataclass(frozen=True)
class PairErrors:
    utterance_id: str
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.reference_length


@dataclass
class WerResult:
    wer: float
    pairs: list[PairErrors]


def edit_operations(reference: Sequence[str], hypothesis: Sequence[str]) -> tuple[int, int, int]:
    """(substitutions, insertions, deletions) of a minimum-cost Levenshtein alignment."""
    n, m = len(reference), len(hypothesis)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = ins = d = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            s += reference[i - 1] != hypothesis[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), ins, d


def word_error_rate(pairs: Sequence[TranscriptPair]) -> WerResult:
    """Corpus WER: total edit operations over total reference words."""
    if not pairs:
        raise InputError("no transcript pairs to score")
    details = []
    for pair in pairs:
        s, i, d = edit_operations(pair.reference_words, pair.hypothesis_words)
        details.append(PairErrors(pair.utterance_id, s, i, d, len(pair.reference_words)))
    total_errors = sum(p.errors for p in details)
    total_words = sum(p.reference_length for p in details)
    return WerResult(total_errors / total_words, details)


# --------------------------------------------------------------------------- Fréchet distance


@dataclass
class FeatureSetSummary:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @classmethod
    def fit(cls, vectors: np.ndarray) -> "FeatureSetSummary":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise InputError(f"expected (n, dim) vectors, got shape {vectors.shape}")
        if vectors.shape[0] < 2:
            raise InputError("a covariance summary needs at least 2 vectors")
        cov = np.cov(vectors, rowvar=False).reshape(vectors.shape[1], vectors.shape[1])
        return cls(vectors.mean(axis=0), cov, vectors.shape[0])


def _psd_sqrt(matrix: np.ndarray, name: str, tol: float = 1e-8) -> np.ndarray:
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    scale = max(1.0, float(np.max(np.abs(vals))))
    if vals.min() < -tol * scale:
        raise NumericError(f"{name} covariance is not positive semidefinite (eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: FeatureSetSummary, b: FeatureSetSummary) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise InputError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.covariance, "first")
    _psd_sqrt(b.covariance, "second")  # validation only
    middle = root_a @ b.covariance @ root_a
    vals = np.linalg.eigvalsh(0.5 * (middle + middle.T))
    cross = float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))
    diff = a.mean - b.mean
    dist = float(diff @ diff) + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * cross
    return max(dist, 0.0)


def cfdsd(generated: Mapping[str, np.ndarray], reference: Mapping[str, np.ndarray]) -> float:
    """Fréchet distance between embedding sets paired by utterance id."""
    gen_ids, ref_ids = set(generated), set(reference)
    if gen_ids != ref_ids:
        raise PairingError(
            f"utterance ids differ: only generated {sorted(gen_ids - ref_ids)}, "
            f"only reference {sorted(ref_ids - gen_ids)}"
        )
    ids = sorted(gen_ids)
    gen = np.stack([np.asarray(generated[i], dtype=np.float64).ravel() for i in ids])
    ref = np.stack([np.asarray(reference[i], dtype=np.float64).ravel() for i in ids])
    return frechet_distance(FeatureSetSummary.fit(gen), FeatureSetSummary.fit(ref))


def shortest_fraction(lengths: Mapping[str, int], fraction: float = 0.25) -> list[str]:
    """Ids of the shortest ``fraction`` of utterances (at least one), ties broken by id."""
    ordered = sorted(lengths, key=lambda uid: (lengths[uid], uid))
    return ordered[: max(1, math.ceil(fraction * len(ordered)))]


# --------------------------------------------------------------------------- plug-ins


def band_statistics(features: np.ndarray, bands: int = 16) -> np.ndarray:
    """Deterministic stand-in embedding: per-band mean and std of log magnitudes over time."""
    logmag = np.log1p(np.asarray(features, dtype=np.float64))
    groups = np.array_split(logmag, bands, axis=1)
    per_band = np.stack([g.mean(axis=1) for g in groups], axis=1)  # (T, bands)
    return np.concatenate([per_band.mean(axis=0), per_band.std(axis=0)])


EXTRACTORS: dict[str, EmbeddingExtractor] = {"band-stats": band_statistics}
TRANSCRIBERS: dict[str, Transcriber] = {}


def _resolve(name: str, registry: Mapping[str, Callable], kind: str) -> Callable:
    if name in registry:
        return registry[name]
    if ":" in name:
        module, attr = name.split(":", 1)
        try:
            return getattr(importlib.import_module(module), attr)
        except (ImportError, AttributeError) as exc:
            raise PluginError(f"cannot import {kind} {name!r}: {exc}") from exc
    raise PluginError(f"unknown {kind} {name!r}; registered: {sorted(registry)}")


def get_extractor(name: str) -> EmbeddingExtractor:
    return _resolve(name, EXTRACTORS, "extractor")


def get_transcriber(name: str) -> Transcriber:
    return _resolve(name, TRANSCRIBERS, "transcriber")


def metrics_report(
    wer_pairs: Optional[Sequence[TranscriptPair]],
    lengths: Mapping[str, int],
    generated_embeddings: Optional[Mapping[str, np.ndarray]] = None,
    reference_embeddings: Optional[Mapping[str, np.ndarray]] = None,
) -> dict:
    """Corpus WER, WER on the shortest quarter by phoneme count, cFDSD and per-utterance rows."""
    report: dict = {"num_utterances": len(lengths), "wer": None, "wer_shortest_25": None, "cfdsd": None}
    rows = {uid: {"utterance_id": uid, "phoneme_count": n} for uid, n in sorted(lengths.items())}
    if wer_pairs is not None:
        result = word_error_rate(wer_pairs)
        report["wer"] = result.wer
        short = set(shortest_fraction({p.utterance_id: lengths[p.utterance_id] for p in wer_pairs}))
        report["wer_shortest_25"] = word_error_rate([p for p in wer_pairs if p.utterance_id in short]).wer
        for p in result.pairs:
            rows[p.utterance_id].update(
                substitutions=p.substitutions, insertions=p.insertions, deletions=p.deletions,
                reference_words=p.reference_length, wer=p.wer, shortest_25=p.utterance_id in short,
            )
    if generated_embeddings is not None and reference_embeddings is not None:
        report["cfdsd"] = cfdsd(generated_embeddings, reference_embeddings)
    report["utterances"] = list(rows.values())
    return report
