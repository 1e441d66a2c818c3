import json
from pathlib import Path

import numpy as np
import pytest
import torch

from tablex.cli import main
from tablex.datagen import PageConfig, load_annotation, load_corpus
from tablex.detector import TableDetector
from tablex.geometry import QuadBox
from tablex.neural_ops import save_checkpoint
from tablex.pipeline import PageResult, page_result_to_json
from tablex.splitter import TSRModel
from tablex.structure import CellSpan, TableStructure
from tablex.detector import Detection


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = {"width": 448, "height": 576, "table_count": [1, 1], "rows": [2, 3], "cols": [2, 3]}
    cfg_path = out / "page.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["synth", "--config", str(cfg_path), "--out", str(out / "data"),
               "--count", "3", "--seed", "5"])
    assert rc == 0
    return out / "data"


@pytest.fixture(scope="module")
def checkpoints(tmp_path_factory):
    """Random-weight checkpoints with the score heads biased off so blank
    pages yield no detections."""
    out = tmp_path_factory.mktemp("ckpt")
    torch.manual_seed(0)
    det = TableDetector("tiny")
    with torch.no_grad():
        det.frcn.score.bias.fill_(-6.0)
    save_checkpoint(out / "det.pt", det, det.checkpoint_header())
    tsr = TSRModel("tiny", kernel_width=5)
    save_checkpoint(out / "tsr.pt", tsr, tsr.checkpoint_header())
    return out


class TestSynth:
    def test_layout_and_manifest(self, corpus_dir):
        assert (corpus_dir / "run_manifest.json").exists()
        assert (corpus_dir / "manifest.json").exists()
        images = sorted((corpus_dir / "images").glob("*.png"))
        annotations = sorted((corpus_dir / "annotations").glob("*.json"))
        assert len(images) == len(annotations) == 3

    def test_deterministic(self, corpus_dir, tmp_path):
        cfg_path = corpus_dir.parent / "page.json"
        rc = main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "again"),
                   "--count", "3", "--seed", "5"])
        assert rc == 0
        for name in ("images/0000.png", "annotations/0001.json"):
            a = (corpus_dir / name).read_bytes()
            b = (tmp_path / "again" / name).read_bytes()
            assert a == b

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"not_a_key": 1}))
        rc = main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "not_a_key" in capsys.readouterr().err

    def test_infeasible_config_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"rows": [2, 13]}))
        rc = main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert rc == 2


class TestTrain:
    def test_train_det_writes_outputs(self, corpus_dir, tmp_path):
        cfg = {
            "iterations": 3, "decay_iterations": [2], "scales": [224],
            "backbone": "tiny", "corner_top_k": 10, "max_frcn_candidates": 32,
        }
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        rc = main(["train", "det", "--corpus", str(corpus_dir), "--config", str(cfg_path),
                   "--out", str(out), "--seed", "1"])
        assert rc == 0
        assert (out / "detector.pt").exists()
        assert (out / "trace.csv").exists()
        assert (out / "run_manifest.json").exists()

    def test_train_tsr_writes_outputs(self, corpus_dir, tmp_path):
        cfg = {"iterations": 3, "decay_iterations": [2], "scales": [224], "backbone": "tiny"}
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        rc = main(["train", "tsr", "--corpus", str(corpus_dir), "--config", str(cfg_path),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "tsr.pt").exists()

    def test_bad_train_key_fails(self, corpus_dir, tmp_path, capsys):
        cfg_path = tmp_path / "train.json"
        cfg_path.write_text(json.dumps({"learning_rate": 0.1}))
        rc = main(["train", "det", "--corpus", str(corpus_dir), "--config", str(cfg_path),
                   "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "learning_rate" in capsys.readouterr().err


class TestInfer:
    def test_missing_checkpoint_fails(self, corpus_dir, tmp_path, capsys):
        rc = main(["infer", "--images", str(corpus_dir), "--det-checkpoint",
                   str(tmp_path / "nope.pt"), "--tsr-checkpoint", str(tmp_path / "nope2.pt"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2
        assert "missing checkpoint" in capsys.readouterr().err

    def test_blank_image_empty_tables(self, checkpoints, tmp_path):
        from PIL import Image

        img_dir = tmp_path / "imgs"
        img_dir.mkdir()
        Image.fromarray(np.full((256, 320, 3), 255, dtype=np.uint8)).save(img_dir / "blank.png")
        out = tmp_path / "out"
        rc = main(["infer", "--images", str(img_dir),
                   "--det-checkpoint", str(checkpoints / "det.pt"),
                   "--tsr-checkpoint", str(checkpoints / "tsr.pt"),
                   "--out", str(out), "--short-side", "256", "--max-side", "512",
                   "--crop-long-side", "256"])
        assert rc == 0
        data = json.loads((out / "blank.json").read_text())
        assert data["tables"] == []

    def test_infer_idempotent(self, corpus_dir, checkpoints, tmp_path):
        args = ["--det-checkpoint", str(checkpoints / "det.pt"),
                "--tsr-checkpoint", str(checkpoints / "tsr.pt"),
                "--short-side", "224", "--max-side", "448", "--crop-long-side", "224",
                "--html"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["infer", "--images", str(corpus_dir), "--out", str(out1)] + args) == 0
        assert main(["infer", "--images", str(corpus_dir), "--out", str(out2)] + args) == 0
        for f in sorted(out1.glob("*.json")):
            if f.name == "run_manifest.json":
                continue
            assert f.read_bytes() == (out2 / f.name).read_bytes()


def gt_predictions(corpus_dir: Path, out: Path):
    """Write prediction JSONs that echo the ground truth."""
    from tablex.pipeline import assign_content

    out.mkdir(parents=True, exist_ok=True)
    for ann_path in sorted((corpus_dir / "annotations").glob("*.json")):
        ann = load_annotation(ann_path)
        result = PageResult(image_id=ann_path.stem)
        for table in ann.tables:
            result.detections.append(
                Detection(QuadBox.from_array(np.asarray(table.quad)), 1.0)
            )
            cells = [
                CellSpan(c.start_row, c.end_row, c.start_col, c.end_col,
                         QuadBox.from_array(c.quad))
                for c in table.cells
            ]
            structure = TableStructure(rows=table.grid_rows, cols=table.grid_cols, cells=cells)
            result.structures.append(structure)
            result.contents.append(assign_content(ann.content_boxes, structure)[0])
        (out / f"{ann_path.stem}.json").write_text(page_result_to_json(result))


class TestEval:
    def test_perfect_predictions_score_one(self, corpus_dir, tmp_path):
        preds = tmp_path / "preds"
        gt_predictions(corpus_dir, preds)
        report_path = tmp_path / "report.json"
        rc = main(["eval", "--pred", str(preds), "--gt", str(corpus_dir),
                   "--report", str(report_path)])
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert report["wavg_f1"] == pytest.approx(1.0)
        assert report["mean_adjacency_f1"] == pytest.approx(1.0)
        assert report["mean_teds_struct"] == pytest.approx(1.0)
        for thr in ("0.6", "0.7", "0.8", "0.9"):
            assert report["detection"][thr]["f1"] == pytest.approx(1.0)
        assert len(report["per_image"]) == 3


class TestOverlay:
    def test_overlay_writes_png(self, corpus_dir, tmp_path):
        preds = tmp_path / "preds"
        gt_predictions(corpus_dir, preds)
        image = sorted((corpus_dir / "images").glob("*.png"))[0]
        result = preds / (image.stem + ".json")
        out = tmp_path / "overlay.png"
        rc = main(["overlay", "--image", str(image), "--result", str(result),
                   "--out", str(out)])
        assert rc == 0
        assert out.exists() and out.stat().st_size > 0


class TestMainEntry:
    def test_missing_out_flag(self, capsys):
        rc = main(["synth", "--count", "1"])
        assert rc == 2
        assert "--out" in capsys.readouterr().err

    def test_env_seed_used(self, corpus_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("TABLEX_SEED", "5")
        cfg_path = corpus_dir.parent / "page.json"
        rc = main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "env"),
                   "--count", "1"])
        assert rc == 0
        a = (tmp_path / "env" / "images" / "0000.png").read_bytes()
        b = (corpus_dir / "images" / "0000.png").read_bytes()
        assert a == b
