import json

import numpy as np
import pytest

from rmelnet.cli import EXIT_ALL_FAILED, EXIT_INPUT, EXIT_OK, build_parser, main, parse_seeds
from rmelnet.features import MelGrid, grid_to_bytes, load_grid, save_grid, write_wav
from rmelnet.plotting import read_pgm
from rmelnet.text import Utterance, Word, save_transcripts

TINY_MODEL = {"hidden": 8, "embed_dim": 4, "M": 2}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    wavs = root / "wavs"
    wavs.mkdir()
    t = np.arange(22050) / 22050
    utts = []
    for i, (word, f0) in enumerate([("ab", 220), ("ba", 330), ("abba", 440)]):
        write_wav(wavs / f"u{i}.wav", 0.3 * np.sin(2 * np.pi * f0 * t))
        utts.append(Utterance(f"u{i}", [Word(word), Word("a")]))
    save_transcripts(root / "t.jsonl", utts)
    return root


@pytest.fixture(scope="module")
def features(corpus):
    out = corpus / "feat"
    assert main(["features", "extract", "--wav-dir", str(corpus / "wavs"),
                 "--transcripts", str(corpus / "t.jsonl"), "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(features, tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "train": {"lr": 1e-3}}))
    out = root / "ckpt"
    assert main(["train", "--features", str(features), "--stats", str(features / "stats.json"),
                 "--config", str(cfg), "--out", str(out), "--steps", "10",
                 "--sub-batch", "8", "--accum", "2"]) == EXIT_OK
    return out


class TestFeatures:
    def test_three_wavs(self, features):
        assert len(list(features.glob("*.rmg"))) == 6
        assert (features / "stats.json").is_file()
        assert load_grid(features / "u0.tier1.rmg").shape == (112, 32)
        assert load_grid(features / "u0.full.rmg").shape == (448, 256)
        assert len(list(features.glob("manifest.json"))) == 1

    def test_rerun_byte_identical(self, corpus, features, tmp_path):
        assert main(["features", "extract", "--wav-dir", str(corpus / "wavs"),
                     "--transcripts", str(corpus / "t.jsonl"), "--out", str(tmp_path)]) == EXIT_OK
        for f in features.glob("*.rmg"):
            assert (tmp_path / f.name).read_bytes() == f.read_bytes()
        assert (tmp_path / "manifest.json").read_bytes() == (features / "manifest.json").read_bytes()

    def test_empty_dir(self, tmp_path, capsys):
        (tmp_path / "w").mkdir()
        code = main(["features", "extract", "--wav-dir", str(tmp_path / "w"),
                     "--transcripts", str(tmp_path / "t.jsonl"), "--out", str(tmp_path / "o")])
        assert code == EXIT_INPUT
        assert "no input files" in capsys.readouterr().err

    def test_bad_file_reported(self, corpus, tmp_path, capsys):
        wavs = tmp_path / "w"
        wavs.mkdir()
        (wavs / "u0.wav").write_bytes((corpus / "wavs" / "u0.wav").read_bytes())
        (wavs / "u1.wav").write_bytes(b"RIFF junk")
        code = main(["features", "extract", "--wav-dir", str(wavs),
                     "--transcripts", str(corpus / "t.jsonl"), "--out", str(tmp_path / "o")])
        assert code == EXIT_INPUT
        assert "u1.wav" in capsys.readouterr().err
        assert (tmp_path / "o" / "u0.tier1.rmg").is_file()


class TestTrain:
    def test_log_and_manifest(self, trained):
        lines = (trained / "log.jsonl").read_text().splitlines()
        assert len(lines) == 10
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["config"]["effective_batch"] == 16
        assert manifest["command"] == "train" and manifest["seeds"] == [0]
        assert (trained / "last.rmck").is_file()

    def test_missing_stats(self, features, tmp_path):
        assert main(["train", "--features", str(features), "--stats", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o")]) == EXIT_INPUT

    def test_bins_mismatch_before_any_step(self, features, tmp_path):
        stats = json.loads((features / "stats.json").read_text())
        stats["mean"], stats["std"], stats["n_mels"] = stats["mean"][:8], stats["std"][:8], 8
        (tmp_path / "s.json").write_text(json.dumps(stats))
        code = main(["train", "--features", str(features), "--stats", str(tmp_path / "s.json"),
                     "--out", str(tmp_path / "o"), "--steps", "1"])
        assert code == EXIT_INPUT and not (tmp_path / "o" / "log.jsonl").exists()

    def test_bad_config(self, features, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"train": {"sub_batch": 3, "accum": 2, "effective_batch": 5}}))
        assert main(["train", "--features", str(features), "--stats", str(features / "stats.json"),
                     "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_INPUT


class TestSample:
    def test_eight_seeds(self, trained, tmp_path):
        out = tmp_path / "s"
        code = main(["sample", "--ckpt", str(trained / "last.rmck"), "--text", "ab a", "--seeds", "1..8",
                     "--Q", "2", "--max-frames", "3", "--out", str(out)])
        # an undertrained model cannot reach the end of the text in 3 frames
        assert code == EXIT_ALL_FAILED
        assert len(list(out.glob("sample_*.rmg"))) == 8
        assert len(list(out.glob("*.attn.pgm"))) == 8
        report = json.loads((out / "rank_report.json").read_text())
        assert report["status"] == "all_failed" and len(report["candidates"]) == 8
        # "ab a" in characters is 4 positions; time runs along the width
        assert read_pgm(out / "sample_00_seed1.attn.pgm").shape == (4, 3)

    def test_greedy_repeat_seed_identical(self, trained, tmp_path):
        out = tmp_path / "s"
        main(["sample", "--ckpt", str(trained / "last.rmck"), "--text", "ab a", "--seeds", "5,5",
              "--Q", "1", "--R", "0", "--max-frames", "3", "--out", str(out)])
        a, b = out / "sample_00_seed5.rmg", out / "sample_01_seed5.rmg"
        assert a.read_bytes() == b.read_bytes()
        assert (out / "sample_00_seed5.attn.pgm").read_bytes() == (out / "sample_01_seed5.attn.pgm").read_bytes()

    def test_defaults(self):
        args = build_parser().parse_args(["sample", "--ckpt", "c", "--text", "t", "--out", "o"])
        assert (args.Q, args.R) == (100, 0.33)

    def test_unknown_symbol(self, trained, tmp_path):
        assert main(["sample", "--ckpt", str(trained / "last.rmck"), "--text", "ab \u00e9",
                     "--out", str(tmp_path / "s")]) == EXIT_INPUT

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "c.rmck").write_bytes(b"junk")
        assert main(["sample", "--ckpt", str(tmp_path / "c.rmck"), "--text", "a",
                     "--out", str(tmp_path / "s")]) == EXIT_INPUT

    @pytest.mark.parametrize("spec,want", [("1..3", [1, 2, 3]), ("5,5", [5, 5]), ("2, 4..5", [2, 4, 5])])
    def test_parse_seeds(self, spec, want):
        assert parse_seeds(spec) == want


class TestPlot:
    def test_tier1_shape(self, features, tmp_path, capsys):
        assert main(["plot", "--in", str(features / "u0.tier1.rmg"), "--out", str(tmp_path / "g.pgm")]) == EXIT_OK
        img = read_pgm(tmp_path / "g.pgm")
        assert img.shape == (32, 112)
        printed = json.loads(capsys.readouterr().out)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["min"] == printed["min"] and manifest["config"]["bounds"] == "data"

    def test_constant_grid(self, tmp_path):
        save_grid(tmp_path / "c.rmg", MelGrid(np.full((112, 32), -3.0), "tier1"))
        assert main(["plot", "--in", str(tmp_path / "c.rmg"), "--out", str(tmp_path / "c.pgm")]) == EXIT_OK
        img = read_pgm(tmp_path / "c.pgm")
        assert len(np.unique(img)) == 1

    def test_explicit_bounds(self, tmp_path):
        v = np.zeros((4, 2))
        v[0, 0], v[1, 0] = 1.0, 2.0
        save_grid(tmp_path / "g.rmg", MelGrid(v, "tier1"))
        main(["plot", "--in", str(tmp_path / "g.rmg"), "--out", str(tmp_path / "g.pgm"), "--min", "0", "--max", "1"])
        img = read_pgm(tmp_path / "g.pgm")
        assert img.max() == 255 and img.min() == 0
        assert json.loads((tmp_path / "manifest.json").read_text())["config"]["bounds"] == "explicit"

    def test_corrupt_magic(self, tmp_path, capsys):
        data = bytearray(grid_to_bytes(MelGrid(np.zeros((2, 2)), "tier1")))
        data[:4] = b"XXXX"
        (tmp_path / "bad.rmg").write_bytes(bytes(data))
        assert main(["plot", "--in", str(tmp_path / "bad.rmg"), "--out", str(tmp_path / "b.pgm")]) == EXIT_INPUT
        assert "RMG1" in capsys.readouterr().err

    def test_png(self, features, tmp_path):
        main(["plot", "--in", str(features / "u0.tier1.rmg"), "--out", str(tmp_path / "g.pgm"),
              "--png", str(tmp_path / "g.png")])
        assert (tmp_path / "g.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
