"""Command line entry points: train, infer, eval, make-cam, make-synth.

All commands run to completion without interaction. Exit codes: 0 success,
2 bad arguments, 3 data problems, 4 numeric failures.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .archive import write_archive
from .backbone import ImageBatch
from .camgen import compute_cam_stack
from .datakit import (load_dataset, load_image, load_mask,
                      make_synthetic_dataset, miou, multi_scale_infer,
                      save_index_png, write_palette_json)
from .decoder import load_decoder_state
from .errors import DataError, NumericError
from .rfm import (affinity_map, attention_filter, attention_score,
                  class_box_mask, par_refine, refine_cam, refining_map,
                  sinkhorn_normalize)
from .training import TrainState, load_config, train, train_fully_supervised


def _add_config_args(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key = value settings file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config entry (repeatable)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")


def _resolve_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise DataError(f"--set expects KEY=VALUE, got '{item}'")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _cmd_train(args):
    config = _resolve_config(args)
    if args.data is not None:
        config = dataclasses.replace(config, data_root=str(args.data))
    if not config.data_root:
        raise DataError("train needs a dataset (--data or config data_root)")
    manifest = load_dataset(config.data_root, config.train_split, mode=config.mode)
    if config.mode == "full":
        final = train_fully_supervised(config, manifest, args.out)
    else:
        final = train(config, manifest, args.out)
    print(f"final checkpoint: {final}")
    return 0


def _cmd_infer(args):
    config = _resolve_config(args)
    data_root = args.data or config.data_root
    if not data_root:
        raise DataError("infer needs a dataset (--data or config data_root)")
    manifest = load_dataset(data_root, args.split, mode="weak")
    state = TrainState(config, manifest)
    if args.checkpoint is not None:
        load_decoder_state(state.decoder, args.checkpoint)
    state.decoder.eval()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_palette_json(out_dir / "palette.json", manifest.class_names)
    for record in manifest.records:
        image = load_image(record.image_path).unsqueeze(0)
        probs = multi_scale_infer(state.backbone, state.decoder, image, config.scales)
        pred = probs[0].argmax(dim=0).to(torch.uint8).numpy()
        save_index_png(pred, out_dir / f"{record.image_id}.png")
    print(f"wrote {len(manifest.records)} predictions to {out_dir}")
    return 0


def _cmd_eval(args):
    manifest = load_dataset(args.data, args.split, mode="full")
    preds, gts = [], []
    missing = []
    for record in manifest.records:
        pred_path = Path(args.pred) / f"{record.image_id}.png"
        if not pred_path.is_file():
            missing.append(record.image_id)
            continue
        preds.append(load_mask(pred_path).numpy())
        gts.append(load_mask(record.mask_path).numpy())
    if missing:
        raise DataError(f"missing predictions for ids: {', '.join(missing[:5])}"
                        + ("..." if len(missing) > 5 else ""))
    per_class, mean = miou(preds, gts, manifest.num_classes)
    lines = ["class\tname\tiou"]
    names = ["__background__"] + list(manifest.class_names)
    for i, value in enumerate(per_class):
        iou = "absent" if np.isnan(value) else repr(float(value))
        lines.append(f"{i}\t{names[i]}\t{iou}")
    lines.append(f"mean\t\t{mean!r}")
    report = "\n".join(lines) + "\n"
    if args.out is not None:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report)
    print(report, end="")
    return 0


def _cmd_make_cam(args):
    config = _resolve_config(args)
    data_root = args.data or config.data_root
    if not data_root:
        raise DataError("make-cam needs a dataset (--data or config data_root)")
    manifest = load_dataset(data_root, args.split, mode="weak")
    state = TrainState(config, manifest)
    if args.checkpoint is not None:
        load_decoder_state(state.decoder, args.checkpoint)
    state.decoder.eval()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    for record in manifest.records:
        image = load_image(record.image_path).unsqueeze(0)
        grid = state.backbone.token_grid(image.shape[-2:])
        features, attentions, pooled = state.backbone.encode_image(ImageBatch(image))
        present = sorted(record.labels)
        text = state.text_embeddings(present)
        cam = compute_cam_stack(
            tokens=pooled.tokens[0], image_vec=pooled.vector[0],
            text_embeds=text, present_classes=present, grid=grid,
            tau=cfg.tau, background_mode=cfg.background_mode)
        tensors = {"initial": cam.maps,
                   "class_indices": torch.tensor(cam.class_indices, dtype=torch.float32)}
        if args.refined:
            with torch.no_grad():
                _, fused = state.decoder(features, grid, image.shape[-2:])
                aff = affinity_map(fused[0])
                per_block = [a[0] for a in attentions]
                scores = torch.stack([attention_score(aff, a) for a in per_block])
                gate = attention_filter(scores, cfg.n0)
                r_nor = sinkhorn_normalize(refining_map(aff, gate, per_block))
                boxes = [class_box_mask(cam.maps[1 + j], cfg.box_threshold)
                         for j in range(len(present))]
                refined = refine_cam(r_nor, cam, cfg.alpha, boxes,
                                     alpha_mode=cfg.alpha_mode)
                small = F.adaptive_avg_pool2d(image, grid)[0]
                tensors["refined"] = par_refine(small, refined.maps,
                                                num_iters=cfg.par_iters,
                                                sigma_rgb=cfg.par_sigma)
        write_archive(out_dir / f"{record.image_id}.nta", tensors)
    print(f"wrote {len(manifest.records)} activation archives to {out_dir}")
    return 0


def _cmd_make_synth(args):
    manifest = make_synthetic_dataset(
        args.out, seed=args.seed, count=args.count,
        grid=(args.grid_h, args.grid_w), num_classes=args.num_classes,
        cell=args.cell, val_count=args.val_count, min_rect=args.min_rect)
    print(f"dataset at {manifest.root}: {len(manifest)} train samples, "
          f"{len(manifest.class_names)} classes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakseg",
        description="weakly supervised segmentation with a frozen encoder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the decoder (weak or full mode)")
    _add_config_args(p)
    p.add_argument("--data", type=Path, default=None, help="dataset root")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="write predicted index masks for a split")
    _add_config_args(p)
    p.add_argument("--data", type=Path, default=None, help="dataset root")
    p.add_argument("--split", default="val")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="decoder archive; omitted = freshly initialized decoder")
    p.add_argument("--out", type=Path, required=True, help="prediction directory")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="mean IoU of predictions against masks")
    p.add_argument("--data", type=Path, required=True, help="dataset root")
    p.add_argument("--split", default="val")
    p.add_argument("--pred", type=Path, required=True, help="prediction directory")
    p.add_argument("--out", type=Path, default=None, help="report file (TSV)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("make-cam", help="export activation maps per image")
    _add_config_args(p)
    p.add_argument("--data", type=Path, default=None, help="dataset root")
    p.add_argument("--split", default="train")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="decoder archive for the refined maps")
    p.add_argument("--refined", action="store_true",
                   help="also export online-refined maps")
    p.add_argument("--out", type=Path, required=True, help="archive directory")
    p.set_defaults(func=_cmd_make_cam)

    p = sub.add_parser("make-synth", help="materialize a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="dataset root to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=8, help="train split size")
    p.add_argument("--val-count", type=int, default=0, help="val split size")
    p.add_argument("--grid-h", type=int, default=4)
    p.add_argument("--grid-w", type=int, default=4)
    p.add_argument("--num-classes", type=int, default=2)
    p.add_argument("--cell", type=int, default=16,
                   help="pixels per layout cell (match the patch size)")
    p.add_argument("--min-rect", type=int, default=1,
                   help="smallest rectangle side, in cells")
    p.set_defaults(func=_cmd_make_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
