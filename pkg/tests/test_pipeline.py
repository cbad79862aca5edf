import json
import math

import numpy as np
import pytest

from phrasedub import cli
from phrasedub.errors import ConfigurationError, ModeError, SchemaError
from phrasedub.pipeline import RunConfig, load_model, run_dub, run_eval, run_train

from conftest import small_config


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(SchemaError, match="stpes"):
            RunConfig.from_dict({"manifest": "m.jsonl", "stpes": 3})

    def test_unknown_section_key(self, toy_manifest, tmp_path):
        with pytest.raises(SchemaError, match="channels"):
            small_config(toy_manifest, tmp_path, encoder={"channels": 3}).encoder_config()

    def test_relative_paths(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"manifest": "data/m.jsonl", "output_dir": "out"}))
        cfg = RunConfig.load(tmp_path / "cfg.json")
        assert cfg.manifest == str(tmp_path / "data" / "m.jsonl")


class TestTrain:
    def test_log_has_one_finite_row_per_step(self, pvae_run):
        rows = [json.loads(line) for line in pvae_run.log_path.read_text().splitlines()]
        assert [r["step"] for r in rows] == [1, 2, 3]
        for r in rows:
            assert {"reconstruction", "prosody_kld", "noise_kld", "total"} <= set(r)
            assert all(math.isfinite(r[k]) for k in r)

    def test_checkpoint_bytes_reproducible(self, toy_manifest, tmp_path):
        first = run_train(small_config(toy_manifest, tmp_path))
        blob, history = first.checkpoint_path.read_bytes(), first.history
        again = run_train(small_config(toy_manifest, tmp_path))
        assert again.checkpoint_path.read_bytes() == blob
        assert again.history == history

    def test_gvae_pp_training_rejected(self, toy_manifest, tmp_path):
        with pytest.raises(ModeError):
            run_train(small_config(toy_manifest, tmp_path, mode="GVAE-PP"))

    def test_checkpoint_metadata(self, pvae_run, gvae_run):
        assert load_model(pvae_run.checkpoint_path).mode.value == "PVAE"
        assert load_model(gvae_run.checkpoint_path).mode.value == "GVAE"


class TestDub:
    def test_batch_with_mismatch(self, pvae_run, dub_fixture, tmp_path):
        result = run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path)
        assert result.exit_code == 1
        assert [o["request_id"] for o in result.outputs] == ["req0", "req1"]
        assert len(result.errors) == 1
        err = result.errors[0]
        assert err["request_id"] == "req2" and err["error_type"] == "PhraseMismatchError"
        assert sorted(p.name for p in (tmp_path / "features").iterdir()) == ["req0.npy", "req1.npy"]
        report = json.loads((tmp_path / "dub_report.json").read_text())
        assert report["succeeded"] == 2 and report["failed"] == 1

    def test_output_length_follows_durations(self, pvae_run, dub_fixture, tmp_path):
        result = run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path, default_duration=5)
        for row in result.outputs:
            feats = np.load(tmp_path / row["features_path"])
            assert feats.shape[0] == 5 * row["num_phonemes"]
            assert feats.shape[1] == 513 and (feats >= 0).all()

    def test_deterministic(self, pvae_run, dub_fixture, tmp_path):
        run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path / "a")
        run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path / "b")
        for name in ("req0.npy", "req1.npy"):
            assert (tmp_path / "a" / "features" / name).read_bytes() == (tmp_path / "b" / "features" / name).read_bytes()

    def test_mode_matrix(self, pvae_run, gvae_run, dub_fixture, tmp_path):
        with pytest.raises(ModeError):
            run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path / "x", mode="GVAE")
        with pytest.raises(ModeError):
            run_dub(gvae_run.checkpoint_path, dub_fixture, tmp_path / "x", mode="PVAE")
        forced = run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path / "y", mode="GVAE", allow_mode_mismatch=True)
        # global mode strips the phrase breaks, so the extra phrase no longer mismatches
        assert len(forced.outputs) == 3
        chunked = run_dub(gvae_run.checkpoint_path, dub_fixture, tmp_path / "z", mode="GVAE-PP")
        assert len(chunked.outputs) == 2 and chunked.exit_code == 1

    def test_missing_clean_reference_is_per_entry(self, pvae_run, dub_fixture, tmp_path):
        rows = [json.loads(line) for line in dub_fixture.read_text().splitlines()][:2]
        rows[1]["clean_audio_path"] = "nowhere.wav"
        path = dub_fixture.parent / "missing.jsonl"
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        result = run_dub(pvae_run.checkpoint_path, path, tmp_path)
        assert len(result.outputs) == 1 and "nowhere.wav" in result.errors[0]["error"]

    def test_malformed_line(self, pvae_run, dub_fixture, tmp_path):
        path = dub_fixture.parent / "bad.jsonl"
        path.write_text(dub_fixture.read_text().splitlines()[0] + "\n{not json\n" + json.dumps({"utterance_id": "u"}) + "\n")
        result = run_dub(pvae_run.checkpoint_path, path, tmp_path)
        assert len(result.outputs) == 1 and len(result.errors) == 2


class TestEval:
    @pytest.fixture
    def dubbed(self, pvae_run, dub_fixture, tmp_path):
        run_dub(pvae_run.checkpoint_path, dub_fixture, tmp_path)
        refs = [{"utterance_id": f"req{i}", "text": "hello there world", "features_path": f"features/req{i}.npy"}
                for i in range(2)]
        (tmp_path / "refs.jsonl").write_text("".join(json.dumps(r) + "\n" for r in refs))
        hyps = [{"utterance_id": "req0", "text": "hello there world"}, {"utterance_id": "req1", "text": "hello world"}]
        (tmp_path / "hyps.jsonl").write_text("".join(json.dumps(r) + "\n" for r in hyps))
        return tmp_path

    def test_identity_references(self, dubbed):
        report = run_eval(dubbed, dubbed / "refs.jsonl", transcripts_path=dubbed / "refs.jsonl", extractor="band-stats")
        assert report["wer"] == 0.0
        assert report["cfdsd"] == pytest.approx(0.0, abs=1e-8)
        assert json.loads((dubbed / "metrics.json").read_text())["num_utterances"] == 2

    def test_wer_only(self, dubbed):
        report = run_eval(dubbed, dubbed / "refs.jsonl", transcripts_path=dubbed / "hyps.jsonl", metrics=["wer"])
        assert report["wer"] == pytest.approx(1 / 6) and report["cfdsd"] is None

    def test_missing_plugins(self, dubbed):
        with pytest.raises(ConfigurationError):
            run_eval(dubbed, dubbed / "refs.jsonl", metrics=["cfdsd"])
        with pytest.raises(ConfigurationError):
            run_eval(dubbed, dubbed / "refs.jsonl", metrics=["wer"])


class TestCli:
    def test_inspect_phrases(self, toy_manifest, capsys):
        assert cli.main(["inspect-phrases", "--manifest", str(toy_manifest)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines and all(line.startswith("utt") and "frames=[" in line for line in lines)

    def test_train_and_dub(self, toy_manifest, dub_fixture, tmp_path, capsys):
        cfg = small_config(toy_manifest, tmp_path / "run", steps=1).to_dict()
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
        ckpt = tmp_path / "run" / "model.ckpt"
        assert ckpt.is_file()
        code = cli.main(["dub", "--checkpoint", str(ckpt), "--requests", str(dub_fixture), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "2 request(s), 1 failed" in capsys.readouterr().out

    def test_config_errors_exit_2(self, tmp_path, toy_manifest):
        (tmp_path / "cfg.json").write_text(json.dumps({"manifest": str(toy_manifest), "mode": "GVAE-PP"}))
        assert cli.main(["train", "--config", str(tmp_path / "cfg.json")]) == 2
        assert cli.main(["train", "--config", str(tmp_path / "absent.json")]) == 2

    def test_make_toy_corpus(self, tmp_path, capsys):
        assert cli.main(["make-toy-corpus", "--out", str(tmp_path), "--count", "2"]) == 0
        assert (tmp_path / "manifest.jsonl").is_file()
