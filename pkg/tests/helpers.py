"""Small builders shared by the model-level tests."""

import torch

from phrasedub.backbone import BackboneConfig, DubbingModel, TrainingItem
from phrasedub.encoder import EncoderConfig
from phrasedub.segmentation import PhraseSet, PhraseSpan


def tiny_model(bins=12, latent=4, channels=8, decoder_kernel=3, seed=0, dtype=torch.float32, speakers=2):
    torch.manual_seed(seed)
    enc = EncoderConfig(input_bins=bins, conv_channels=channels, recurrent_channels=channels, latent_dim=latent)
    bb = BackboneConfig(phoneme_vocab_size=10, speaker_count=speakers, locale_count=2, num_bins=bins,
                        text_channels=8, speaker_embedding_dim=4, locale_embedding_dim=3,
                        decoder_channels=8, decoder_layers=2, decoder_kernel=decoder_kernel)
    return DubbingModel(enc, bb).to(dtype)


def phrase_set(frame_bounds, phoneme_counts):
    spans, p = [], 0
    for k, c in enumerate(phoneme_counts):
        spans.append(PhraseSpan(k, (p, p + c), (frame_bounds[k], frame_bounds[k + 1]), 0.1))
        p += c
    return PhraseSet(tuple(spans), frame_bounds[-1])


def tiny_item(frame_bounds=(0, 5, 12), phoneme_counts=(2, 3), bins=12, seed=0, dtype=torch.float32, uid="u0"):
    gen = torch.Generator().manual_seed(seed)
    t = frame_bounds[-1]
    clean = torch.rand((t, bins), generator=gen, dtype=dtype)
    noise = 0.1 * torch.rand((t, bins), generator=gen, dtype=dtype)
    n = sum(phoneme_counts)
    durations = []
    for k, c in enumerate(phoneme_counts):
        frames = frame_bounds[k + 1] - frame_bounds[k]
        base = [frames // c] * c
        base[-1] += frames - sum(base)
        durations.extend(base)
    return TrainingItem(
        uid, clean + noise, clean, noise, phrase_set(list(frame_bounds), phoneme_counts),
        torch.randint(0, 10, (n,), generator=gen), 0, 0, torch.tensor(durations, dtype=torch.long),
    )
