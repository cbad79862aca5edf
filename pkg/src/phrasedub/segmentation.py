"""Silence-based prosodic phrase segmentation and per-variant span layouts."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from .corpus import AlignedToken, FrameSpec, alignment_num_frames, check_contiguity, time_to_frame
from .errors import ModeError, NoSpeechError, ShapeError

DEFAULT_MIN_SILENCE_S = 0.05
_TIME_TOL = 1e-9


class Mode(str, enum.Enum):
    PVAE = "PVAE"
    GVAE = "GVAE"
    GVAE_PP = "GVAE-PP"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ModeError(f"unknown mode {value!r}; choose PVAE, GVAE or GVAE-PP") from None


@dataclass(frozen=True)
class PhraseSpan:
    index: int
    phoneme_range: tuple[int, int]  # half-open, into the speech phoneme sequence
    frame_range: tuple[int, int]  # half-open
    boundary_silence_s: float = 0.0  # trailing silence absorbed into this phrase

    @property
    def phoneme_count(self) -> int:
        return self.phoneme_range[1] - self.phoneme_range[0]

    @property
    def num_frames(self) -> int:
        return self.frame_range[1] - self.frame_range[0]


@dataclass(frozen=True)
class PhraseSet:
    spans: tuple[PhraseSpan, ...]
    total_frames: int

    @property
    def K(self) -> int:
        return len(self.spans)

    @property
    def lengths(self) -> list[int]:
        return [s.phoneme_count for s in self.spans]

    @property
    def total_phonemes(self) -> int:
        return self.spans[-1].phoneme_range[1] if self.spans else 0

    def validate(self) -> None:
        """Raise ``ShapeError`` unless spans partition frames and phonemes in order."""
        if not self.spans:
            raise ShapeError("phrase set is empty")
        frame_cursor = phone_cursor = 0
        for k, span in enumerate(self.spans):
            if span.index != k:
                raise ShapeError(f"span {k} carries index {span.index}")
            if span.frame_range[0] != frame_cursor or span.num_frames < 1:
                raise ShapeError(f"span {k} frame range {span.frame_range} breaks the partition")
            if span.phoneme_range[0] != phone_cursor or span.phoneme_count < 1:
                raise ShapeError(f"span {k} phoneme range {span.phoneme_range} breaks the partition")
            frame_cursor = span.frame_range[1]
            phone_cursor = span.phoneme_range[1]
        if frame_cursor != self.total_frames:
            raise ShapeError(f"spans end at frame {frame_cursor}, utterance has {self.total_frames}")


def merge_silences(tokens: Sequence[AlignedToken]) -> list[AlignedToken]:
    merged: list[AlignedToken] = []
    for tok in tokens:
        if tok.is_silence and merged and merged[-1].is_silence:
            prev = merged.pop()
            tok = AlignedToken(prev.token, prev.start_s, tok.end_s, True)
        merged.append(tok)
    return merged


def phoneme_frame_starts(tokens: Sequence[AlignedToken], spec: FrameSpec, total_frames: int) -> list[int]:
    """First frame of each speech phoneme; the first phoneme owns frame 0.

    Silence frames fall to the preceding phoneme. Phonemes shorter than a hop
    are nudged so every phoneme keeps at least one frame.
    """
    speech = [t for t in tokens if not t.is_silence]
    n = len(speech)
    if total_frames < n:
        raise ShapeError(f"{n} phonemes cannot each own a frame of a {total_frames}-frame utterance")
    starts = [0] + [time_to_frame(t.start_s, spec) for t in speech[1:]]
    for i in range(1, n):
        starts[i] = max(starts[i], starts[i - 1] + 1)
    for i in range(n - 1, 0, -1):
        starts[i] = min(starts[i], total_frames - (n - i))
    return starts


def phoneme_durations(tokens: Sequence[AlignedToken], spec: FrameSpec) -> list[int]:
    """Frames per speech phoneme, summing to the utterance frame count."""
    total = alignment_num_frames(tokens, spec)
    starts = phoneme_frame_starts(tokens, spec, total)
    bounds = starts + [total]
    return [bounds[i + 1] - bounds[i] for i in range(len(starts))]


def segment_phrases(
    tokens: Sequence[AlignedToken],
    spec: FrameSpec,
    min_silence_s: float = DEFAULT_MIN_SILENCE_S,
) -> PhraseSet:
    """Split an alignment into prosodic phrases at silences of at least ``min_silence_s``.

    Each silence belongs to the phrase before it; a leading silence belongs to
    the first phrase. Phoneme ranges count speech tokens only.
    """
    check_contiguity(tokens)
    merged = merge_silences(tokens)
    if all(t.is_silence for t in merged):
        raise NoSpeechError("alignment contains only silence")

    total = alignment_num_frames(merged, spec)
    starts = phoneme_frame_starts(merged, spec, total)

    # phrase_firsts[k]: speech index opening phrase k; trailing[k]: silence closing it
    phrase_firsts: list[int] = []
    trailing: list[float] = []
    speech_idx = 0
    gap: float | None = None  # silence since the previous speech token
    for tok in merged:
        if tok.is_silence:
            gap = tok.duration
            continue
        if not phrase_firsts or (gap is not None and gap >= min_silence_s - _TIME_TOL):
            if phrase_firsts:
                trailing[-1] = gap
            phrase_firsts.append(speech_idx)
            trailing.append(0.0)
        gap = None
        speech_idx += 1
    trailing[-1] = gap or 0.0

    spans = []
    n_speech = speech_idx
    for k, first in enumerate(phrase_firsts):
        last = phrase_firsts[k + 1] if k + 1 < len(phrase_firsts) else n_speech
        f0 = 0 if k == 0 else starts[first]
        f1 = starts[last] if last < n_speech else total
        spans.append(PhraseSpan(k, (first, last), (f0, f1), trailing[k]))
    phrase_set = PhraseSet(tuple(spans), total)
    phrase_set.validate()
    return phrase_set


def spans_for_mode(phrase_set: PhraseSet, mode: "Mode | str") -> PhraseSet:
    """Span layout seen by the reference encoder in training-capable modes.

    PVAE keeps the phrases; GVAE collapses them to one utterance-wide span.
    """
    mode = Mode.parse(mode)
    if mode is Mode.PVAE:
        return phrase_set
    if mode is Mode.GVAE:
        if phrase_set.K == 1:
            return phrase_set
        last = phrase_set.spans[-1]
        span = PhraseSpan(
            0, (0, phrase_set.total_phonemes), (0, phrase_set.total_frames), last.boundary_silence_s
        )
        return PhraseSet((span,), phrase_set.total_frames)
    raise ModeError("GVAE-PP has no span layout of its own; it encodes phrase spans chunk by chunk")
