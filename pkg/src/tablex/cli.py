"""Command-line entry points.

Subcommands: synth (corpus generation), train (detector or recognizer),
infer (page JSON + optional HTML + mask dumps), eval (metric report),
overlay (static visualization PNG). Every command writes a run manifest
before any other output. Flags --seed/--workers/--out fall back to the
TABLEX_SEED / TABLEX_WORKERS / TABLEX_OUT environment variables.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import (
    DocAnnotation,
    GenerationError,
    PageConfig,
    load_annotation,
    load_corpus,
    write_corpus,
)
from .geometry import Box, QuadBox
from .metrics import PageEval, evaluate_pages
from .structure import CellSpan, TableStructure


class CliError(Exception):
    pass


def _env_default(name: str, cast, fallback):
    raw = os.environ.get(f"TABLEX_{name}")
    if raw is None:
        return fallback
    return cast(raw)


def load_dataclass_config(path, cls):
    """JSON key-value file onto a dataclass; unknown keys are fatal."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise CliError(f"unknown config key: {key!r}")
        default = getattr(cls(), key)
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    """Reproducibility record, written before any outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": {k: str(v) for k, v in vars(args).items() if k != "func"},
        "config": getattr(args, "config", None) and str(args.config),
        "seed": getattr(args, "seed", None),
        "version": __version__,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))


# ---------------------------------------------------------------------------
# model loading


def _load_models(det_path, tsr_path):
    import torch  # local import keeps --help fast

    from .detector import TableDetector
    from .neural_ops import load_checkpoint
    from .splitter import TSRModel

    detector = tsr = None
    if det_path:
        if not Path(det_path).exists():
            raise CliError(f"missing checkpoint: {det_path}")
        header, state = load_checkpoint(det_path)
        detector = TableDetector(header.get("backbone", "resnet18"))
        detector.load_state_dict(state)
        detector.eval()
    if tsr_path:
        if not Path(tsr_path).exists():
            raise CliError(f"missing checkpoint: {tsr_path}")
        header, state = load_checkpoint(tsr_path)
        tsr = TSRModel(header.get("backbone", "resnet18"), header.get("kernel_width", 9))
        tsr.load_state_dict(state)
        tsr.eval()
    return detector, tsr


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    config = load_dataclass_config(args.config, PageConfig) if args.config else PageConfig()
    try:
        config.validate()
    except GenerationError as exc:
        raise CliError(str(exc))
    out = Path(args.out)
    write_manifest(out, "synth", args)
    write_corpus(config, out, count=args.count, seed=args.seed)
    print(f"wrote {args.count} pages to {out}")
    return 0


def cmd_train(args) -> int:
    from .neural_ops import save_checkpoint
    from .trainer import TrainConfig, train_detector, train_tsr, write_trace_csv

    config = load_dataclass_config(args.config, TrainConfig) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    try:
        config.validate()
    except ValueError as exc:
        raise CliError(str(exc))
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise CliError(f"no corpus found under {args.corpus}")
    out = Path(args.out)
    write_manifest(out, f"train-{args.model}", args)
    if args.model == "det":
        result = train_detector(corpus, config)
        header = result.model.checkpoint_header()
        name = "detector.pt"
    else:
        result = train_tsr(corpus, config)
        header = result.model.checkpoint_header()
        name = "tsr.pt"
    save_checkpoint(out / name, result.model, header)
    write_trace_csv(out / "trace.csv", result.trace)
    print(f"trained {args.model}: final loss {result.trace[-1]['total_loss']:.4f}; "
          f"checkpoint {out / name}")
    return 0


def _iter_images(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        candidates = sorted(p.glob("*.png")) + sorted(p.glob("*.jpg"))
        if not candidates and (p / "images").is_dir():
            candidates = sorted((p / "images").glob("*.png"))
        return candidates
    if not p.exists():
        raise CliError(f"image path not found: {spec}")
    return [p]


def cmd_infer(args) -> int:
    from PIL import Image

    from .detector import DetectorInferenceConfig
    from .pipeline import TSRInferenceConfig, extract_page, page_result_to_json, to_html

    detector, tsr = _load_models(args.det_checkpoint, args.tsr_checkpoint)
    if detector is None or tsr is None:
        raise CliError("infer needs both --det-checkpoint and --tsr-checkpoint")
    images = _iter_images(args.images)
    if not images:
        raise CliError(f"no images under {args.images}")
    out = Path(args.out)
    write_manifest(out, "infer", args)
    det_cfg = DetectorInferenceConfig(short_side=args.short_side, max_side=args.max_side)
    tsr_cfg = TSRInferenceConfig(long_side=args.crop_long_side)

    def process(path: Path):
        image = np.asarray(Image.open(path).convert("RGB"))
        result = extract_page(detector, tsr, image, image_id=path.stem,
                              detector_cfg=det_cfg, tsr_cfg=tsr_cfg)
        (out / f"{path.stem}.json").write_text(page_result_to_json(result))
        if args.html:
            html = "\n".join(to_html(s) for s in result.structures)
            (out / f"{path.stem}.html").write_text(html)
        if args.save_masks:
            _dump_masks(out / f"{path.stem}_masks.npz", tsr, image, result, tsr_cfg)
        return path.stem, len(result.detections)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(process, images))
    else:
        outcomes = [process(p) for p in images]
    for stem, n in outcomes:
        print(f"{stem}: {n} tables")
    return 0


def _dump_masks(path, tsr, image, result, tsr_cfg) -> None:
    import torch

    from .pipeline import crop_and_resize

    payload = {}
    for i, det in enumerate(result.detections):
        crop, transform = crop_and_resize(image, det.quad, tsr_cfg.long_side)
        tensor = torch.as_tensor(crop / 255.0, dtype=torch.float32).permute(2, 0, 1)[None]
        with torch.no_grad():
            masks = tsr.split_forward(tensor)
        payload[f"table{i}_row"] = masks.row.numpy()
        payload[f"table{i}_col"] = masks.col.numpy()
        payload[f"table{i}_origin"] = np.array(transform.origin)
        payload[f"table{i}_scale"] = np.array(transform.scale)
    np.savez(path, **payload)


def _gt_page_eval(result_dict: dict, annotation: DocAnnotation) -> PageEval:
    from .pipeline import assign_content, page_result_from_dict

    result = page_result_from_dict(result_dict)
    pred_boxes = [(d.quad.hull(), d.score) for d in result.detections]
    gt_boxes = []
    gt_structures = []
    gt_contents = []
    for table in annotation.tables:
        q = np.asarray(table.quad)
        gt_boxes.append(Box.from_xyxy(q[:, 0].min(), q[:, 1].min(), q[:, 0].max(), q[:, 1].max()))
        cells = [
            CellSpan(c.start_row, c.end_row, c.start_col, c.end_col,
                     QuadBox.from_array(c.quad))
            for c in table.cells
        ]
        gt_structures.append(
            TableStructure(rows=table.grid_rows, cols=table.grid_cols, cells=cells)
        )
        gt_contents.append([list(c.content_ids) for c in table.cells])
    pred_contents = [
        assign_content(annotation.content_boxes, s)[0] for s in result.structures
    ]
    return PageEval(
        image_id=result.image_id,
        pred_boxes=pred_boxes,
        gt_boxes=gt_boxes,
        pred_structures=result.structures,
        pred_contents=pred_contents,
        gt_structures=gt_structures,
        gt_contents=gt_contents,
    )


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    if (gt_dir / "annotations").is_dir():
        gt_dir = gt_dir / "annotations"
    pages = []
    pred_files = sorted(p for p in pred_dir.glob("*.json") if p.name != "run_manifest.json")
    if not pred_files:
        raise CliError(f"no prediction files under {args.pred}")
    for pf in pred_files:
        gt_path = gt_dir / pf.name
        if not gt_path.exists():
            raise CliError(f"missing ground truth for {pf.name}")
        annotation = load_annotation(gt_path)
        pages.append(_gt_page_eval(json.loads(pf.read_text()), annotation))
    report = evaluate_pages(pages)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2))
    print(
        f"wavg_f1={report['wavg_f1']:.4f} "
        f"adjacency_f1={report['mean_adjacency_f1']:.4f} "
        f"teds_struct={report['mean_teds_struct']:.4f}"
    )
    return 0


def cmd_overlay(args) -> int:
    from PIL import Image, ImageDraw

    from .pipeline import page_result_from_json

    img_path = Path(args.image)
    if not img_path.exists():
        raise CliError(f"image not found: {args.image}")
    result = page_result_from_json(Path(args.result).read_text())
    image = Image.open(img_path).convert("RGB")

    if args.masks:
        data = np.load(args.masks)
        base = np.asarray(image).astype(np.float64)
        i = 0
        while f"table{i}_row" in data:
            ox, oy = data[f"table{i}_origin"]
            sx, sy = data[f"table{i}_scale"]
            for key, channel, rx, ry in (
                (f"table{i}_row", 1, 8, 1),  # row mask is (H, W/8) in crop coords
                (f"table{i}_col", 2, 1, 8),
            ):
                mask = data[key]
                mh, mw = mask.shape
                # back to page pixels: undo the mask reduction and the crop scale
                target_w = max(1, int(round(mw * rx / sx)))
                target_h = max(1, int(round(mh * ry / sy)))
                up = Image.fromarray((mask * 255).astype(np.uint8)).resize(
                    (target_w, target_h), Image.BILINEAR
                )
                arr = np.asarray(up, dtype=np.float64) / 255.0
                y0, x0 = int(oy), int(ox)
                y1 = min(base.shape[0], y0 + arr.shape[0])
                x1 = min(base.shape[1], x0 + arr.shape[1])
                region = base[y0:y1, x0:x1, channel]
                a = arr[: y1 - y0, : x1 - x0] * 0.6
                base[y0:y1, x0:x1, channel] = region * (1 - a) + 255 * a
            i += 1
        image = Image.fromarray(np.clip(base, 0, 255).astype(np.uint8))

    draw = ImageDraw.Draw(image)
    for structure in result.structures:
        for cell in structure.cells:
            pts = [tuple(p) for p in cell.quad.as_array()]
            draw.polygon(pts, outline=(60, 90, 220))
    for det in result.detections:
        pts = [tuple(p) for p in det.quad.as_array()]
        draw.polygon(pts, outline=(220, 40, 40))
        draw.text((pts[0][0] + 2, pts[0][1] + 2), f"{det.score:.2f}", fill=(220, 40, 40))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    image.save(out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tablex",
                                     description="table detection and structure recognition")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("--config", default=None, help="PageConfig JSON")
    p.add_argument("--out", default=_env_default("OUT", str, None), required=False)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=_env_default("SEED", int, 0))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the detector or the structure recognizer")
    p.add_argument("model", choices=("det", "tsr"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--out", default=_env_default("OUT", str, None))
    p.add_argument("--seed", type=int, default=_env_default("SEED", int, None))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the full pipeline over images")
    p.add_argument("--images", required=True, help="image file, directory, or corpus dir")
    p.add_argument("--det-checkpoint", required=True)
    p.add_argument("--tsr-checkpoint", required=True)
    p.add_argument("--out", default=_env_default("OUT", str, None))
    p.add_argument("--html", action="store_true")
    p.add_argument("--save-masks", action="store_true")
    p.add_argument("--workers", type=int, default=_env_default("WORKERS", int, 1))
    p.add_argument("--short-side", type=int, default=512)
    p.add_argument("--max-side", type=int, default=1024)
    p.add_argument("--crop-long-side", type=int, default=1024)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against a corpus")
    p.add_argument("--pred", required=True, help="directory of pipeline JSON files")
    p.add_argument("--gt", required=True, help="corpus dir or its annotations dir")
    p.add_argument("--report", required=True, help="output report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="draw detections, cells, and masks onto a page")
    p.add_argument("--image", required=True)
    p.add_argument("--result", required=True, help="pipeline JSON for the image")
    p.add_argument("--out", default=_env_default("OUT", str, None))
    p.add_argument("--masks", default=None, help="npz from infer --save-masks")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None) in (None, "") and args.command in (
        "synth", "train", "infer", "overlay",
    ):
        print("error: --out is required (or set TABLEX_OUT)", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
