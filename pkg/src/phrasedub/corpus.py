"""Corpus ingestion: manifests, forced-alignment files, audio and spectrogram features."""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import (
    ContiguityError,
    DuplicateIdError,
    EmptyAlignmentError,
    InputError,
    SampleRateError,
    SchemaError,
)

SILENCE = "sil"
DEFAULT_SAMPLE_RATE = 24000
_TIME_TOL = 1e-9

REQUIRED_MANIFEST_FIELDS = (
    "utterance_id",
    "audio_path",
    "locale",
    "speaker_id",
    "phonemes",
    "alignment_path",
)


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    audio_path: str
    locale: str
    speaker_id: str
    phonemes: tuple[str, ...]
    alignment_path: str
    dialogue_id: Optional[str] = None

    def to_json(self) -> dict:
        record = {
            "utterance_id": self.utterance_id,
            "audio_path": self.audio_path,
            "locale": self.locale,
            "speaker_id": self.speaker_id,
            "phonemes": " ".join(self.phonemes),
            "alignment_path": self.alignment_path,
        }
        if self.dialogue_id is not None:
            record["dialogue_id"] = self.dialogue_id
        return record


@dataclass(frozen=True)
class AlignedToken:
    token: str
    start_s: float
    end_s: float
    is_silence: bool = False

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


@dataclass(frozen=True)
class FrameSpec:
    """STFT analysis settings. Frames are centered with reflection padding."""

    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    window_samples: int = 1024
    hop_samples: int = 256

    def __post_init__(self):
        if self.hop_samples < 1 or self.window_samples < 1:
            raise InputError("window and hop must be positive")
        if self.hop_samples > self.window_samples:
            raise InputError(
                f"hop_samples ({self.hop_samples}) exceeds window_samples ({self.window_samples})"
            )

    @property
    def num_bins(self) -> int:
        return self.window_samples // 2 + 1

    @property
    def hop_seconds(self) -> float:
        return self.hop_samples / self.sample_rate_hz


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, num_bins), non-negative magnitudes
    frame_spec: FrameSpec = field(default_factory=FrameSpec)

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InputError(f"feature matrix must be T x bins with T >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SilenceEdit:
    """A cut of ``removed_s`` seconds starting at ``original_time_s`` in the uncapped timeline."""

    original_time_s: float
    removed_s: float


# --------------------------------------------------------------------------- manifest


def _parse_phonemes(value, line_no: int) -> tuple[str, ...]:
    if isinstance(value, str):
        phonemes = tuple(value.split())
    elif isinstance(value, list) and all(isinstance(p, str) for p in value):
        phonemes = tuple(value)
    else:
        raise SchemaError(f"line {line_no}: field 'phonemes' must be a space-separated string")
    if not phonemes:
        raise SchemaError(f"line {line_no}: field 'phonemes' is empty")
    return phonemes


def load_manifest(
    path: str | Path, locales: Optional[Iterable[str]] = None
) -> list[UtteranceRecord]:
    """Read a JSON-lines manifest into utterance records.

    Relative ``audio_path``/``alignment_path`` values are resolved against the
    manifest's directory. Blank lines are skipped but still counted for error
    line numbers.
    """
    path = Path(path)
    base = path.parent
    allowed = set(locales) if locales is not None else None
    records: list[UtteranceRecord] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {line_no}: not valid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise SchemaError(f"line {line_no}: record must be a JSON object")
            for name in REQUIRED_MANIFEST_FIELDS:
                if name not in raw:
                    raise SchemaError(f"line {line_no}: missing required field '{name}'")
            uid = str(raw["utterance_id"])
            if uid in seen:
                raise DuplicateIdError(
                    f"line {line_no}: utterance_id '{uid}' already defined on line {seen[uid]}"
                )
            seen[uid] = line_no
            locale = str(raw["locale"])
            if allowed is not None and locale not in allowed:
                raise SchemaError(f"line {line_no}: locale '{locale}' not in configured set")
            dialogue = raw.get("dialogue_id")
            records.append(
                UtteranceRecord(
                    utterance_id=uid,
                    audio_path=str(base / raw["audio_path"]),
                    locale=locale,
                    speaker_id=str(raw["speaker_id"]),
                    phonemes=_parse_phonemes(raw["phonemes"], line_no),
                    alignment_path=str(base / raw["alignment_path"]),
                    dialogue_id=None if dialogue is None else str(dialogue),
                )
            )
    return records


def write_manifest(path: str | Path, records: Sequence[UtteranceRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json()) + "\n")


# --------------------------------------------------------------------------- alignments


def check_contiguity(tokens: Sequence[AlignedToken]) -> None:
    if not tokens:
        raise EmptyAlignmentError("alignment has no tokens")
    if abs(tokens[0].start_s) > _TIME_TOL:
        raise ContiguityError(f"first token starts at {tokens[0].start_s}, expected 0")
    for i, tok in enumerate(tokens):
        if not tok.end_s > tok.start_s:
            raise ContiguityError(f"token {i} ({tok.token}) has non-positive duration")
        if i and abs(tok.start_s - tokens[i - 1].end_s) > _TIME_TOL:
            kind = "gap" if tok.start_s > tokens[i - 1].end_s else "overlap"
            raise ContiguityError(
                f"{kind} between token {i - 1} ending {tokens[i - 1].end_s} "
                f"and token {i} starting {tok.start_s}"
            )


def parse_alignment_text(text: str, silence_tokens: Iterable[str] = (SILENCE,)) -> list[AlignedToken]:
    silence = set(silence_tokens)
    tokens: list[AlignedToken] = []
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\r").split("\t")
        if len(parts) != 3:
            raise SchemaError(f"alignment line {line_no}: expected token<TAB>start<TAB>end")
        name, start, end = parts
        try:
            start_s, end_s = float(start), float(end)
        except ValueError as exc:
            raise SchemaError(f"alignment line {line_no}: bad timestamp") from exc
        if tokens and abs(start_s - tokens[-1].end_s) <= _TIME_TOL:
            start_s = tokens[-1].end_s
        tokens.append(AlignedToken(name, start_s, end_s, name in silence))
    check_contiguity(tokens)
    return tokens


def parse_alignment(path: str | Path) -> list[AlignedToken]:
    """Read a tab-separated ``token<TAB>start_s<TAB>end_s`` alignment file.

    The literal token ``sil`` marks silence. Raises ``EmptyAlignmentError`` for a
    file without rows and ``ContiguityError`` for gaps or overlaps.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_alignment_text(fh.read())


def serialize_alignment(tokens: Sequence[AlignedToken]) -> str:
    # repr() round-trips floats exactly
    return "".join(f"{t.token}\t{t.start_s!r}\t{t.end_s!r}\n" for t in tokens)


def write_alignment(path: str | Path, tokens: Sequence[AlignedToken]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_alignment(tokens))


def ctm_to_alignment(
    ctm_lines: Iterable[str],
    silence_tokens: Iterable[str] = ("sil", "SIL", "sp", "<eps>"),
    end_s: Optional[float] = None,
) -> list[AlignedToken]:
    """Convert phone-level CTM rows (``utt chan start dur phone``) for one utterance.

    Gaps between CTM entries become explicit ``sil`` tokens, as does audio
    after the last entry when ``end_s`` is given.
    """
    silence = set(silence_tokens)
    rows = []
    for line in ctm_lines:
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 5:
            raise SchemaError(f"CTM row has {len(parts)} fields, expected at least 5: {line!r}")
        start, dur, phone = float(parts[2]), float(parts[3]), parts[4]
        rows.append((start, start + dur, phone))
    rows.sort()
    tokens: list[AlignedToken] = []
    cursor = 0.0
    for start, end, phone in rows:
        start = round(start, 6)
        end = round(end, 6)
        if start > cursor + _TIME_TOL:
            tokens.append(AlignedToken(SILENCE, cursor, start, True))
        elif start < cursor - _TIME_TOL:
            raise ContiguityError(f"CTM entries overlap at {start}")
        start = max(start, cursor)
        is_sil = phone in silence
        tokens.append(AlignedToken(SILENCE if is_sil else phone, start, end, is_sil))
        cursor = end
    if end_s is not None and end_s > cursor + _TIME_TOL:
        tokens.append(AlignedToken(SILENCE, cursor, end_s, True))
    check_contiguity(tokens)
    return tokens


def cap_long_silences(
    tokens: Sequence[AlignedToken], max_silence_s: float = 2.0
) -> tuple[list[AlignedToken], list[SilenceEdit]]:
    """Shorten every silence longer than ``max_silence_s`` to exactly that length.

    The excess is cut from the end of each long silence. Returns the shifted
    tokens together with the edits, which ``apply_silence_edits`` replays on the
    waveform so audio and alignment stay in step.
    """
    check_contiguity(tokens)
    out: list[AlignedToken] = []
    edits: list[SilenceEdit] = []
    shift = 0.0
    for tok in tokens:
        start = out[-1].end_s if out else tok.start_s
        if tok.is_silence and tok.duration > max_silence_s:
            removed = tok.duration - max_silence_s
            edits.append(SilenceEdit(tok.start_s + max_silence_s, removed))
            shift += removed
            end = start + max_silence_s
        elif shift:
            end = round(tok.end_s - shift, 9)
        else:
            end = tok.end_s
        out.append(AlignedToken(tok.token, start, end, tok.is_silence))
    return out, edits


def apply_silence_edits(audio: np.ndarray, edits: Sequence[SilenceEdit], sample_rate: int) -> np.ndarray:
    if not edits:
        return audio
    keep = np.ones(len(audio), dtype=bool)
    for edit in edits:
        lo = int(round(edit.original_time_s * sample_rate))
        hi = int(round((edit.original_time_s + edit.removed_s) * sample_rate))
        keep[lo:hi] = False
    return audio[keep]


# --------------------------------------------------------------------------- frames


def time_to_frame(t: float, spec: FrameSpec) -> int:
    """floor(t * rate / hop), computed via the nearest sample index."""
    return int(round(t * spec.sample_rate_hz)) // spec.hop_samples


def num_frames(num_samples: int, spec: FrameSpec) -> int:
    return 1 + num_samples // spec.hop_samples


def alignment_num_frames(tokens: Sequence[AlignedToken], spec: FrameSpec) -> int:
    """Frame count of audio whose length matches the alignment's end time."""
    return num_frames(int(round(tokens[-1].end_s * spec.sample_rate_hz)), spec)


# --------------------------------------------------------------------------- audio


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV as float32 samples in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise InputError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM")
        rate = wf.getframerate()
        data = wf.readframes(wf.getnframes())
    return np.frombuffer(data, dtype="<i2").astype(np.float32) / 32768.0, rate


def write_wav(path: str | Path, audio: np.ndarray, sample_rate: int = DEFAULT_SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(audio, dtype=np.float64) * 32768.0), -32768, 32767)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.astype("<i2").tobytes())


def compute_features(audio: np.ndarray, spec: FrameSpec, sample_rate_hz: Optional[int] = None) -> FeatureMatrix:
    """Linear magnitude spectrogram with a periodic Hann window.

    Produces ``1 + len(audio) // hop`` centered frames of ``window // 2 + 1``
    bins. ``sample_rate_hz`` states the rate of ``audio``; it must match the
    analysis rate.
    """
    if sample_rate_hz is not None and sample_rate_hz != spec.sample_rate_hz:
        raise SampleRateError(f"audio at {sample_rate_hz} Hz, analysis expects {spec.sample_rate_hz} Hz")
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size == 0:
        raise InputError("audio must be a non-empty mono waveform")
    win, hop = spec.window_samples, spec.hop_samples
    pad = win // 2
    mode = "reflect" if audio.size > 1 else "constant"
    padded = np.pad(audio, (pad, win - pad), mode=mode)
    n = num_frames(audio.size, spec)
    idx = np.arange(n)[:, None] * hop + np.arange(win)[None, :]
    window = 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(win) / win)
    mags = np.abs(np.fft.rfft(padded[idx] * window, n=win, axis=1))
    return FeatureMatrix(mags.astype(np.float32), spec)


LoudnessNormalizer = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class PreparedUtterance:
    record: UtteranceRecord
    audio: np.ndarray
    tokens: list[AlignedToken]
    edits: list[SilenceEdit]


def prepare_utterance(
    record: UtteranceRecord,
    spec: FrameSpec,
    max_silence_s: float = 2.0,
    loudness: Optional[LoudnessNormalizer] = None,
) -> PreparedUtterance:
    """Load audio and alignment, capping long silences in both jointly."""
    audio, rate = read_wav(record.audio_path)
    if rate != spec.sample_rate_hz:
        raise SampleRateError(f"{record.audio_path}: {rate} Hz, expected {spec.sample_rate_hz} Hz")
    if loudness is not None:
        audio = loudness(audio, rate)
    tokens, edits = cap_long_silences(parse_alignment(record.alignment_path), max_silence_s)
    audio = apply_silence_edits(audio, edits, rate)
    # analysis frames must line up with the alignment's frame count
    target = int(round(tokens[-1].end_s * rate))
    if audio.size < target:
        audio = np.pad(audio, (0, target - audio.size))
    audio = audio[:target]
    return PreparedUtterance(record, audio, tokens, edits)
