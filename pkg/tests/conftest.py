import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from phrasedub.corpus import write_wav  # noqa: E402
from phrasedub.pipeline import RunConfig, inspect_phrases, run_train  # noqa: E402
from phrasedub.synthetic import write_toy_corpus  # noqa: E402

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0].split()[0][1:])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")


SMALL_ENCODER = {"conv_channels": 16, "recurrent_channels": 16, "latent_dim": 4}
SMALL_BACKBONE = {"text_channels": 16, "decoder_channels": 32, "decoder_layers": 2}


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    return write_toy_corpus(tmp_path_factory.mktemp("toy"), 6, seed=3, max_phrases=3, phoneme_range=(2, 6))


def small_config(manifest, out_dir, **overrides):
    raw = dict(manifest=str(manifest), output_dir=str(out_dir), steps=3, batch_size=3,
               denoiser="moving-average", encoder=SMALL_ENCODER, backbone=SMALL_BACKBONE)
    raw.update(overrides)
    return RunConfig.from_dict(raw)


@pytest.fixture(scope="session")
def pvae_run(toy_manifest, tmp_path_factory):
    return run_train(small_config(toy_manifest, tmp_path_factory.mktemp("pvae")))


@pytest.fixture(scope="session")
def gvae_run(toy_manifest, tmp_path_factory):
    return run_train(small_config(toy_manifest, tmp_path_factory.mktemp("gvae"), mode="GVAE"))


def phrase_counts(manifest):
    counts: dict[str, int] = {}
    for line in inspect_phrases(manifest):
        uid = line.split("\t")[0]
        counts[uid] = counts.get(uid, 0) + 1
    return counts


def target_text(k, per_phrase=2, symbols=("pa", "ki")):
    phrase = " ".join(symbols[i % len(symbols)] for i in range(per_phrase))
    return " | ".join([phrase] * k)


@pytest.fixture(scope="session")
def dub_fixture(toy_manifest, tmp_path_factory):
    """Three requests over the first three toy utterances; the last one has one phrase too many."""
    root = tmp_path_factory.mktemp("requests")
    rng = np.random.default_rng(0)
    write_wav(root / "clean.wav", 0.05 * rng.standard_normal(12000), 24000)
    counts = phrase_counts(toy_manifest)
    uids = sorted(counts)[:3]
    rows = []
    for n, uid in enumerate(uids):
        k = counts[uid] + (1 if n == 2 else 0)
        rows.append({"request_id": f"req{n}", "utterance_id": uid, "target_text": target_text(k),
                     "target_locale": "es-ES", "target_speaker_id": "spk0", "clean_audio_path": "clean.wav"})
    path = root / "requests.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path
