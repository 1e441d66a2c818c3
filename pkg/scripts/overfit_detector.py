#!/usr/bin/env python3
"""Overfit the corner-proposal detector on a small synthetic corpus and
report the training-set F1 at IoU 0.9.

Example:
    python scripts/overfit_detector.py --out runs/det --pages 20 --iterations 2000
"""

import argparse
import json
import time
from pathlib import Path

from tablex.datagen import PageConfig, synthesize_page
from tablex.detector import DetectorInferenceConfig, detect_tables
from tablex.geometry import Box
from tablex.metrics import detection_prf
from tablex.neural_ops import save_checkpoint
from tablex.trainer import TrainConfig, train_detector, write_trace_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--pages", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scale", type=int, default=256)
    ap.add_argument("--backbone", default="tiny", choices=("tiny", "resnet18"))
    args = ap.parse_args()

    page_cfg = PageConfig(
        width=448, height=576, table_count=(1, 2), rows=(2, 4), cols=(2, 4),
        ruling_line_prob=0.6, span_prob=0.2, empty_cell_prob=0.1, margin=26,
    )
    corpus = [synthesize_page(page_cfg, args.seed + i) for i in range(args.pages)]

    cfg = TrainConfig(
        iterations=args.iterations,
        decay_iterations=(int(args.iterations * 0.7), int(args.iterations * 0.9)),
        scales=(args.scale,),
        max_side=2 * args.scale,
        backbone=args.backbone,
        seed=args.seed,
        corner_top_k=40,
        max_frcn_candidates=128,
    )
    t0 = time.time()
    result = train_detector(corpus, cfg)
    minutes = (time.time() - t0) / 60

    infer_cfg = DetectorInferenceConfig(short_side=args.scale, max_side=2 * args.scale)
    matches = preds = gts = 0
    for image, ann in corpus:
        gt_boxes = [
            Box.from_xyxy(t.quad[:, 0].min(), t.quad[:, 1].min(),
                          t.quad[:, 0].max(), t.quad[:, 1].max())
            for t in ann.tables
        ]
        dets = detect_tables(result.model, image, infer_cfg)
        pred_boxes = [(d.quad.hull(), d.score) for d in dets]
        p, _, _ = detection_prf(pred_boxes, gt_boxes, 0.9)
        matches += round(p * len(pred_boxes))
        preds += len(pred_boxes)
        gts += len(gt_boxes)
    precision = matches / preds if preds else 0.0
    recall = matches / gts if gts else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "detector.pt", result.model, result.model.checkpoint_header())
    write_trace_csv(out / "trace.csv", result.trace)
    summary = {
        "train_minutes": minutes,
        "final_loss": result.trace[-1]["total_loss"],
        "train_f1_iou090": f1,
        "precision": precision,
        "recall": recall,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
