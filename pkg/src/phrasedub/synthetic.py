"""Deterministic toy corpus: harmonic "phonemes" with phrase-level pitch, energy and tempo.

Each phoneme symbol owns a fixed spectral colour; each phrase draws its own
pitch, loudness and speaking rate, which text alone cannot predict. That gives
the reference encoder something to carry.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .corpus import AlignedToken, UtteranceRecord, write_alignment, write_manifest, write_wav

PHONEMES = tuple(f"{c}{v}" for c in "ptkmns" for v in "aeiou")[:24]
LOCALES = ("en-US", "es-ES")


def _phoneme_timbre(symbol: str) -> np.ndarray:
    seed = sum(ord(ch) * 31**i for i, ch in enumerate(symbol)) % (2**32)
    return np.random.default_rng(seed).uniform(0.1, 1.0, size=6)


def synth_phrase_audio(phonemes, durations, pitch_hz, gain, rate, rng):
    chunks = []
    for sym, dur in zip(phonemes, durations):
        n = int(round(dur * rate))
        t = np.arange(n) / rate
        amps = _phoneme_timbre(sym)
        glide = pitch_hz * (1.0 + 0.05 * np.sin(2 * np.pi * t / max(dur, 1e-3)))
        phase = 2 * np.pi * np.cumsum(glide) / rate
        tone = sum(a * np.sin((h + 1) * phase) for h, a in enumerate(amps)) / amps.sum()
        env = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.01) if n else t
        chunks.append(gain * tone * env)
    return chunks


def make_utterance(rng: np.random.Generator, rate: int = 24000, max_phrases: int = 4,
                   phoneme_range: tuple[int, int] = (2, 12), noise_level: float | None = None):
    """Return (audio, tokens) for one random utterance."""
    k = int(rng.integers(1, max_phrases + 1))
    tokens: list[AlignedToken] = []
    audio_parts: list[np.ndarray] = []
    t = 0.0

    def add(symbol, dur, samples, silence):
        nonlocal t
        n = int(round(dur * rate))
        start = t
        t = round(t + n / rate, 9)
        tokens.append(AlignedToken(symbol, start, t, silence))
        audio_parts.append(samples if samples is not None else np.zeros(n))

    if rng.random() < 0.3:
        add("sil", float(rng.uniform(0.05, 0.3)), None, True)
    for phrase in range(k):
        n_ph = int(rng.integers(phoneme_range[0], phoneme_range[1] + 1))
        phonemes = [PHONEMES[i] for i in rng.integers(0, len(PHONEMES), size=n_ph)]
        tempo = float(rng.uniform(0.7, 1.4))
        durs = [round(float(rng.uniform(0.06, 0.14)) * tempo, 3) for _ in phonemes]
        pitch = float(rng.uniform(90.0, 260.0))
        gain = float(rng.uniform(0.15, 0.5))
        chunks = synth_phrase_audio(phonemes, durs, pitch, gain, rate, rng)
        for i, (sym, dur, chunk) in enumerate(zip(phonemes, durs, chunks)):
            add(sym, dur, chunk, False)
            if i + 1 < n_ph and rng.random() < 0.1:
                add("sil", float(rng.uniform(0.01, 0.04)), None, True)  # sub-threshold pause
        if phrase + 1 < k or rng.random() < 0.5:
            add("sil", float(rng.uniform(0.08, 0.5)), None, True)
    audio = np.concatenate(audio_parts)
    level = float(rng.uniform(0.0, 0.03)) if noise_level is None else noise_level
    audio = audio + level * rng.standard_normal(audio.size)
    return np.clip(audio, -0.99, 0.99), tokens


def write_toy_corpus(out_dir: str | Path, n_utterances: int = 10, seed: int = 0, rate: int = 24000,
                     speakers: int = 2, **kwargs) -> Path:
    """Write WAVs, alignments and ``manifest.jsonl`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_utterances):
        audio, tokens = make_utterance(rng, rate, **kwargs)
        uid = f"utt{i:04d}"
        write_wav(out / f"{uid}.wav", audio, rate)
        write_alignment(out / f"{uid}.align", tokens)
        records.append(
            UtteranceRecord(
                uid, f"{uid}.wav", LOCALES[i % len(LOCALES)], f"spk{i % speakers}",
                tuple(t.token for t in tokens if not t.is_silence), f"{uid}.align", f"dlg{i // 4}",
            )
        )
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
