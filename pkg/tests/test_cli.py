import hashlib
import json

import pytest

from logoskit.cli import emit_cluster_svg, run
from logoskit.corpus import load_ocr
from logoskit.geometry import cluster_lines

TINY_CONFIG = """
total_iters = 12
batch_size = 4
base_lr = 1e-3
eval_every = 6

[model]
d_model = 8
n_heads = 2
mm_layers = 1
ffn_mult = 2
pos_width = 4

[grounding]
n_train = 24
n_val = 8
"""


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run(["gen-synth", "--seed", "7", "--n-train", "12", "--n-val", "6", "--feature-width", "8",
                "--out", str(out)]) == 0
    return out


class TestUsage:
    def test_help(self, capsys):
        assert run(["--help"]) == 0
        assert "gen-synth" in capsys.readouterr().out

    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1
        err = capsys.readouterr().err
        assert "usage error" in err

    def test_missing_subcommand(self):
        assert run([]) == 1

    def test_unknown_flag(self):
        assert run(["phoc", "a", "--bogus"]) == 1

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        assert run(["cluster", "--ocr", str(tmp_path / "none.jsonl")]) == 2
        assert capsys.readouterr().out == ""

    def test_bad_source_argument(self, tmp_path):
        assert run(["predict", "--checkpoint", "x", "--qa", "q", "--ocr", "nosep", "--objects", "o",
                    "--out", str(tmp_path / "p")]) == 1


class TestPhoc:
    def test_bits(self, capsys):
        assert run(["phoc", "a"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["count"] == len(rec["bits"])
        assert rec["count"] > 0

    def test_empty_word(self, capsys):
        assert run(["phoc", "!!"]) == 0
        assert json.loads(capsys.readouterr().out)["count"] == 0


class TestCluster:
    def test_matches_library(self, corpus, capsys):
        path = corpus / "val" / "ocr_A.jsonl"
        assert run(["cluster", "--ocr", str(path)]) == 0
        recs = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        table = load_ocr(path)
        expected = []
        for image_id in sorted(table):
            assign = cluster_lines([ln.box for ln in table[image_id]])
            expected += [(image_id, ln.line_id, c) for ln, c in zip(table[image_id], assign.cluster_of_line)]
        assert [(r["image_id"], r["line_id"], r["cluster"]) for r in recs] == expected

    def test_svg_deterministic(self, corpus, tmp_path):
        path = corpus / "val" / "ocr_A.jsonl"
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        assert run(["cluster", "--ocr", str(path), "--svg", str(a)]) == 0
        assert run(["cluster", "--ocr", str(path), "--svg", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        text = a.read_text()
        assert text.startswith("<svg") and text.count("data-cluster=") > 0

    def test_svg_empty(self, tmp_path):
        out = emit_cluster_svg([], None, tmp_path / "e.svg")
        assert "data-line" not in out.read_text()

    def test_unknown_image(self, corpus, tmp_path):
        assert run(["cluster", "--ocr", str(corpus / "val" / "ocr_A.jsonl"), "--image", "nope",
                    "--svg", str(tmp_path / "x.svg")]) == 2


class TestGenSynth:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run(["gen-synth", "--seed", "3", "--n-train", "4", "--n-val", "2", "--out",
                        str(tmp_path / name)]) == 0
        for rel in ("train/qa.jsonl", "train/ocr_A.jsonl", "val/ocr_B.jsonl", "val/objects.jsonl"):
            assert _digest(tmp_path / "a" / rel) == _digest(tmp_path / "b" / rel)

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LOGOSKIT_SEED", "3")
        assert run(["gen-synth", "--n-train", "4", "--n-val", "2", "--out", str(tmp_path / "env")]) == 0
        monkeypatch.delenv("LOGOSKIT_SEED")
        assert run(["gen-synth", "--seed", "3", "--n-train", "4", "--n-val", "2", "--out",
                    str(tmp_path / "flag")]) == 0
        assert _digest(tmp_path / "env/train/qa.jsonl") == _digest(tmp_path / "flag/train/qa.jsonl")

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LOGOSKIT_SEED", "seven")
        assert run(["gen-synth", "--n-train", "4", "--n-val", "2", "--out", str(tmp_path / "x")]) == 2


class TestEval:
    def test_report(self, tmp_path, capsys):
        qa = tmp_path / "qa.jsonl"
        qa.write_text(json.dumps({"question_id": "q1", "image_id": "i", "question": "what ?",
                                  "answers": ["stop"] * 3 + ["go"] * 7}) + "\n")
        pred = tmp_path / "p.jsonl"
        pred.write_text(json.dumps({"question_id": "q1", "answer": "stop"}) + "\n")
        out = tmp_path / "r.json"
        assert run(["eval", "--pred", str(pred), "--qa", str(qa), "--metric", "acc", "--out", str(out)]) == 0
        rep = json.loads(out.read_text())
        assert rep["accuracy"] == pytest.approx(0.9) and "anls" not in rep
        assert json.loads(capsys.readouterr().out.splitlines()[0]) == rep

    def test_unknown_qid(self, tmp_path):
        qa = tmp_path / "qa.jsonl"
        qa.write_text(json.dumps({"question_id": "q1", "image_id": "i", "question": "what ?",
                                  "answers": ["a"] * 10}) + "\n")
        pred = tmp_path / "p.jsonl"
        pred.write_text(json.dumps({"question_id": "q9", "answer": "a"}) + "\n")
        assert run(["eval", "--pred", str(pred), "--qa", str(qa)]) == 2


class TestGradcheck:
    def test_passes(self, capsys):
        assert run(["gradcheck", "--probes", "20"]) == 0
        assert json.loads(capsys.readouterr().out)["passed"] is True

    def test_fault_fails(self):
        assert run(["gradcheck", "--probes", "20", "--fault", "gelu"]) != 0


def smoke_pipeline(corpus, work):
    """gen-synth output -> pretrain -> train -> predict -> eval; returns produced files."""
    cfg = work / "cfg.toml"
    cfg.write_text(TINY_CONFIG)
    val = corpus / "val"
    files = {
        "pre": work / "pre.ckpt", "ft": work / "ft.ckpt", "pred": work / "pred.jsonl",
        "report": work / "report.json", "svg": work / "clusters.svg",
    }
    steps = [
        ["pretrain", "--data", str(corpus), "--config", str(cfg), "--out", str(files["pre"]),
         "--metrics", str(work / "pre.jsonl")],
        ["train", "--data", str(corpus), "--config", str(cfg), "--init", str(files["pre"]),
         "--out", str(files["ft"]), "--metrics", str(work / "ft.jsonl")],
        ["predict", "--checkpoint", str(files["ft"]), "--qa", str(val / "qa.jsonl"),
         "--ocr", f"A={val / 'ocr_A.jsonl'}", "--ocr", f"B={val / 'ocr_B.jsonl'}",
         "--objects", str(val / "objects.jsonl"), "--out", str(files["pred"])],
        ["eval", "--pred", str(files["pred"]), "--qa", str(val / "qa.jsonl"), "--out", str(files["report"])],
        ["cluster", "--ocr", str(val / "ocr_A.jsonl"), "--svg", str(files["svg"])],
    ]
    for argv in steps:
        assert run(argv) == 0, argv
    return files


class TestPipeline:
    def test_smoke(self, corpus, tmp_path):
        files = smoke_pipeline(corpus, tmp_path)
        report = json.loads(files["report"].read_text())
        assert report["n_items"] == 6
        preds = [json.loads(line) for line in files["pred"].read_text().splitlines()]
        assert [p["question_id"] for p in preds] == sorted(p["question_id"] for p in preds)
        for p in preds:
            assert {c["source"] for c in p["candidates"]} == {"A", "B"}
            assert p["selected_source"] in ("A", "B")
        metrics = [json.loads(line) for line in (tmp_path / "ft.jsonl").read_text().splitlines()]
        assert any({"iter", "lr", "loss", "val_accuracy"} <= set(m) for m in metrics)

    def test_bad_config(self, corpus, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("learning_rate = 1.0\n")
        assert run(["train", "--data", str(corpus), "--config", str(cfg), "--out", str(tmp_path / "m")]) == 2

    def test_json_config(self, corpus, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"total_iters": 3, "batch_size": 2, "model": {"d_model": 8, "n_heads": 2,
                                                                                 "pos_width": 4}}))
        assert run(["train", "--data", str(corpus), "--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
