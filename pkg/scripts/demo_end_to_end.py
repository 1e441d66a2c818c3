#!/usr/bin/env python3
"""End-to-end demo driven through the CLI: synthesize a corpus, train both
models briefly, run inference, score it, and render one overlay.

With default iteration counts this is a smoke demo (models underfit);
raise --iterations to ~2000 for models that actually work.
"""

import argparse
import json
from pathlib import Path

from tablex.cli import main as tablex


def run(argv):
    print("+ tablex", " ".join(argv))
    rc = tablex(argv)
    if rc != 0:
        raise SystemExit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--pages", type=int, default=6)
    ap.add_argument("--iterations", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    page_cfg = work / "page_config.json"
    page_cfg.write_text(json.dumps({
        "width": 448, "height": 576, "table_count": [1, 1],
        "rows": [2, 4], "cols": [2, 4], "span_prob": 0.3,
    }))
    train_cfg = work / "train_config.json"
    train_cfg.write_text(json.dumps({
        "iterations": args.iterations,
        "decay_iterations": [int(args.iterations * 0.7), int(args.iterations * 0.9)],
        "scales": [256],
        "max_side": 512,
        "backbone": "tiny",
        "corner_top_k": 40,
        "seed": args.seed,
    }))

    corpus = work / "corpus"
    run(["synth", "--config", str(page_cfg), "--out", str(corpus),
         "--count", str(args.pages), "--seed", str(args.seed)])
    run(["train", "det", "--corpus", str(corpus), "--config", str(train_cfg),
         "--out", str(work / "det")])
    run(["train", "tsr", "--corpus", str(corpus), "--config", str(train_cfg),
         "--out", str(work / "tsr")])
    run(["infer", "--images", str(corpus),
         "--det-checkpoint", str(work / "det" / "detector.pt"),
         "--tsr-checkpoint", str(work / "tsr" / "tsr.pt"),
         "--out", str(work / "pred"), "--html", "--save-masks",
         "--short-side", "256", "--max-side", "512", "--crop-long-side", "320"])
    run(["eval", "--pred", str(work / "pred"), "--gt", str(corpus),
         "--report", str(work / "report.json")])
    first = sorted((corpus / "images").glob("*.png"))[0]
    run(["overlay", "--image", str(first),
         "--result", str(work / "pred" / f"{first.stem}.json"),
         "--masks", str(work / "pred" / f"{first.stem}_masks.npz"),
         "--out", str(work / "overlay.png")])
    print(f"demo artifacts under {work}")


if __name__ == "__main__":
    main()
