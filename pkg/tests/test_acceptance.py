"""Acceptance checks. Each test records one PASS/FAIL line, printed in the terminal summary."""

import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from phrasedub.conditioning import ConditioningPlan, build_conditioning, make_cross_lingual_plan
from phrasedub.corpus import FrameSpec, compute_features, load_manifest, prepare_utterance
from phrasedub.encoder import EncoderConfig, GaussianPosterior, ReferenceEncoder, encode_posteriors
from phrasedub.errors import PhraseMismatchError
from phrasedub.evaluation import FeatureSetSummary, edit_operations, frechet_distance
from phrasedub.losses import LossWeights, kld_diag_standard, length_weighted_kld
from phrasedub.backbone import utterance_loss
from phrasedub.pipeline import RunConfig, load_model, load_training_items, run_dub, run_train
from phrasedub.segmentation import Mode, PhraseSet, PhraseSpan, segment_phrases, spans_for_mode
from phrasedub.synthetic import write_toy_corpus

from conftest import ACCEPTANCE_RESULTS
from helpers import tiny_item, tiny_model
from test_evaluation import all_sequences, exhaustive_distance
from test_segmentation import check_invariants, random_alignment


def record(name, passed, detail):
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    assert passed, detail


def test_c1_kld_monte_carlo():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        mean = rng.normal(0.0, 1.0, 8)
        logvar = rng.uniform(-1.0, 1.0, 8)
        closed = float(kld_diag_standard(GaussianPosterior(torch.from_numpy(mean), torch.from_numpy(logvar))))
        eps = rng.standard_normal((1_000_000, 8))
        z = mean + np.exp(0.5 * logvar) * eps
        # log q(z) - log p(z); the 2*pi terms cancel
        log_ratio = 0.5 * (z**2 - eps**2 - logvar).sum(axis=1)
        worst = max(worst, abs(log_ratio.mean() - closed) / closed)
    elapsed = time.perf_counter() - start
    record("C1 KLD vs Monte-Carlo", worst < 1e-2 and elapsed < 30,
           f"max relative error {worst:.2e} over 20 posteriors, {elapsed:.1f}s")


def test_c2_length_weighting_exact():
    unit = GaussianPosterior(torch.tensor([math.sqrt(2.0)], dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    pair = float(length_weighted_kld([unit, unit], [5, 20], 0.08))
    ratio = float(length_weighted_kld([unit], [5], 0.08)) / float(length_weighted_kld([unit], [20], 0.08))
    rng = np.random.default_rng(0)
    posts = [GaussianPosterior(torch.from_numpy(rng.normal(size=4)), torch.from_numpy(rng.normal(size=4)))
             for _ in range(5)]
    plain = float(np.mean([float(kld_diag_standard(p)) for p in posts]))
    beta0 = float(length_weighted_kld(posts, [1, 4, 9, 16, 25], 0.0))
    ok = abs(pair - 0.43611) < 1e-5 and abs(pair - 0.5 * (math.exp(-0.4) + math.exp(-1.6))) < 1e-9
    ok = ok and abs(ratio - math.exp(1.2)) < 1e-9 and abs(ratio - 3.32012) < 1e-5 and abs(beta0 - plain) < 1e-12
    record("C2 length-weighted KLD exactness", ok,
           f"value {pair:.9f}, ratio {ratio:.9f}, beta=0 gap {abs(beta0 - plain):.1e}")


def test_c3_segmentation_invariants():
    spec = FrameSpec()
    start = time.perf_counter()
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        tokens = random_alignment(rng)
        lo, hi = sorted(rng.uniform(0.0, 0.3, 2))
        a, b = segment_phrases(tokens, spec, lo), segment_phrases(tokens, spec, hi)
        check_invariants(tokens, a, lo)
        check_invariants(tokens, b, hi)
        assert b.K <= a.K
    elapsed = time.perf_counter() - start
    record("C3 segmentation invariants", elapsed < 10, f"1000 alignments in {elapsed:.1f}s")


def _spans(k):
    return PhraseSet(tuple(PhraseSpan(i, (i, i + 1), (i, i + 1)) for i in range(k)), k)


def test_c4_broadcast_invariants():
    rng = np.random.default_rng(7)
    for _ in range(200):
        k = int(rng.integers(1, 9))
        counts = tuple(int(c) for c in rng.integers(1, 15, k))
        plan = ConditioningPlan(_spans(k), counts)
        prosody = torch.from_numpy(rng.normal(size=(k, 3)))
        noise = torch.from_numpy(rng.normal(size=(k, 2)))
        m = build_conditioning(prosody, noise, plan)
        assert np.all(np.diff(m.phrase_index) >= 0)
        assert np.bincount(m.phrase_index, minlength=k).tolist() == list(counts)
        for row, phrase in zip(m.rows, m.phrase_index):
            assert torch.equal(row, torch.cat([prosody[phrase], noise[phrase]]))
    try:
        make_cross_lingual_plan(_spans(3), "a | b")
        mismatch = "no error"
    except PhraseMismatchError as exc:
        mismatch = str(exc) if (exc.source_count, exc.target_count) == (3, 2) else "wrong counts"
    record("C4 broadcast invariants", "3" in mismatch and "2" in mismatch,
           f"200 random plans; mismatch error: {mismatch}")


def test_c5_gradient_check():
    start = time.perf_counter()
    model = tiny_model(latent=4, channels=8, dtype=torch.float64)
    item = tiny_item(frame_bounds=(0, 5, 12), phoneme_counts=(2, 3), dtype=torch.float64)
    gen = torch.Generator().manual_seed(5)
    eps_p = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    eps_n = torch.randn(2, 4, generator=gen, dtype=torch.float64)
    weights = LossWeights()

    def loss():
        return utterance_loss(model, item, weights, Mode.PVAE, eps_p, eps_n).total

    model.zero_grad()
    loss().backward()
    analytic, numeric = [], []
    h = 1e-6
    pick = np.random.default_rng(0)
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            for idx in pick.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
                orig = float(flat[idx])
                flat[idx] = orig + h
                up = float(loss())
                flat[idx] = orig - h
                down = float(loss())
                flat[idx] = orig
                numeric.append((up - down) / (2 * h))
                analytic.append(float(p.grad.view(-1)[idx]))
    analytic, numeric = np.array(analytic), np.array(numeric)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    elapsed = time.perf_counter() - start
    record("C5 gradient check", rel < 1e-4 and elapsed < 120,
           f"relative error {rel:.2e} over {analytic.size} coordinates, {elapsed:.1f}s")


def test_c6_pvae_gvae_coincidence(tmp_path):
    manifest = write_toy_corpus(tmp_path, 4, seed=11, max_phrases=1)
    spec = FrameSpec()
    torch.manual_seed(0)
    encoder = ReferenceEncoder(EncoderConfig.desk_scale(input_bins=spec.num_bins))
    checked = 0
    for record_ in load_manifest(manifest):
        prepared = prepare_utterance(record_, spec, 2.0)
        spans = segment_phrases(prepared.tokens, spec)
        if spans.K != 1:
            continue
        feats = compute_features(prepared.audio, spec)
        a = encode_posteriors(feats, spans_for_mode(spans, Mode.PVAE), encoder)[0]
        b = encode_posteriors(feats, spans_for_mode(spans, Mode.GVAE), encoder)[0]
        assert torch.equal(a.mean, b.mean) and torch.equal(a.log_variance, b.log_variance)
        checked += 1
    record("C6 PVAE/GVAE single-phrase coincidence", checked >= 1, f"{checked} utterances bitwise identical")


# --------------------------------------------------------------------------- toy training (C7, C8)


def _short_phrase_kld(run_result, config):
    loaded = load_model(run_result.checkpoint_path)
    items = load_training_items(config, load_manifest(config.manifest), loaded.vocab)
    rows = []
    with torch.no_grad():
        for item in items:
            posts = encode_posteriors(item.denoised_features, item.spans, loaded.model.prosody_encoder)
            rows += [(length, float(kld_diag_standard(p))) for length, p in zip(item.spans.lengths, posts)]
    rows.sort(key=lambda r: r[0])
    quartile = rows[: max(1, math.ceil(len(rows) / 4))]
    return float(np.mean([k for _, k in quartile])), len(quartile), len(rows)


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_toy")
    manifest = write_toy_corpus(root / "corpus", 10, seed=0, max_phrases=3, phoneme_range=(2, 10))
    runs = {}
    for beta in (0.08, 0.0):
        config = RunConfig(manifest=str(manifest), output_dir=str(root / f"beta{beta}"), seed=0, steps=500,
                           batch_size=10, denoiser="moving-average", loss={"beta1": beta, "beta2": beta})
        start = time.perf_counter()
        result = run_train(config)
        runs[beta] = (config, result, time.perf_counter() - start)
    return runs


@pytest.mark.slow
def test_c7_toy_overfit(toy_runs):
    _, result, elapsed = toy_runs[0.08]
    first, last = result.history[0], result.history[-1]
    drop = 1.0 - last["reconstruction"] / first["reconstruction"]
    finite = all(math.isfinite(r["prosody_kld"]) and math.isfinite(r["noise_kld"]) for r in result.history)
    record("C7 toy overfit", drop >= 0.5 and finite and elapsed < 600,
           f"reconstruction {first['reconstruction']:.4f} -> {last['reconstruction']:.4f} "
           f"({drop:.0%} drop), KLDs finite={finite}, {elapsed:.0f}s")


@pytest.mark.slow
@pytest.mark.xfail(strict=False, reason="with fixed alpha every exp(-beta*L) weight is below 1, so beta>0 "
                                         "weakens regularization on short phrases too; see README")
def test_c8_ablation_direction(toy_runs):
    with_beta, n_short, n_all = _short_phrase_kld(toy_runs[0.08][1], toy_runs[0.08][0])
    without, _, _ = _short_phrase_kld(toy_runs[0.0][1], toy_runs[0.0][0])
    record("C8 length-regularization ablation", with_beta < without,
           f"shortest-quartile KLD ({n_short}/{n_all} phrases): beta=0.08 {with_beta:.3e}, beta=0 {without:.3e}")


# --------------------------------------------------------------------------- metrics and dubbing


def test_c9_metric_oracles():
    seqs = list(all_sequences("ab", 5))
    mismatches = 0
    for ref, hyp in itertools.product(seqs, seqs):
        mismatches += sum(edit_operations(ref, hyp)) != exhaustive_distance(ref, hyp)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m1, m2 = rng.normal(size=2)
        v1, v2 = rng.uniform(0.1, 5.0, 2)
        got = frechet_distance(FeatureSetSummary(np.array([m1]), np.array([[v1]]), 2),
                               FeatureSetSummary(np.array([m2]), np.array([[v2]]), 2))
        worst = max(worst, abs(got - ((m1 - m2) ** 2 + (math.sqrt(v1) - math.sqrt(v2)) ** 2)))
    summary = FeatureSetSummary.fit(rng.normal(size=(40, 6)))
    self_distance = frechet_distance(summary, summary)
    record("C9 metric oracles", mismatches == 0 and worst < 1e-8 and self_distance < 1e-8,
           f"{len(seqs) ** 2} WER pairs, {mismatches} mismatches; 1-d Frechet max error {worst:.1e}; "
           f"self distance {self_distance:.1e}")


def test_c10_dub_determinism_and_mismatch(pvae_run, dub_fixture, tmp_path):
    a = run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path / "a")
    b = run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path / "b")
    same = all(
        (tmp_path / "a" / row["features_path"]).read_bytes() == (tmp_path / "b" / row["features_path"]).read_bytes()
        for row in a.outputs
    ) and a.outputs == b.outputs
    errors = json.loads((tmp_path / "a" / "dub_report.json").read_text())["errors"]
    mismatch_ok = (a.exit_code == 1 and len(a.outputs) == 2 and len(errors) == 1
                   and errors[0]["error_type"] == "PhraseMismatchError")
    record("C10 dub determinism and mismatch path", same and mismatch_ok,
           f"{len(a.outputs)} outputs byte-identical={same}; failed entry: {errors[0]['error'] if errors else None}")
