"""Losses, run configuration and the online training loops.

The frozen encoder is never optimized: its outputs enter the graph detached,
the pseudo-label branch runs under no_grad, and only decoder parameters are
registered with the optimizer.
"""

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (BackboneConfig, FrozenBackbone, ImageBatch,
                       load_backbone, make_synthetic_backbone)
from .camgen import (DEFAULT_TEMPLATE, VOC_BACKGROUND, ClassVocabulary,
                     CamStack, build_prompts, compute_cam_stack)
from .datakit import DatasetManifest, load_image, load_mask
from .decoder import Decoder, save_decoder
from .errors import DataError, NumericError
from .rfm import (affinity_map, attention_filter, attention_score,
                  class_box_mask, par_refine, refine_cam, refining_map,
                  sinkhorn_normalize, to_pseudo_label)

IGNORE_INDEX = 255


# -- losses ---------------------------------------------------------------


@dataclass(frozen=True)
class LossBreakdown:
    seg_loss: float
    aff_loss: float
    weight: float
    total: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.seg_loss, self.aff_loss, self.total))


def affinity_label(pseudo: torch.Tensor) -> torch.Tensor:
    """(hw, hw) binary map; 1 where two positions share a pseudo class."""
    flat = pseudo.reshape(-1)
    return (flat[:, None] == flat[None, :]).float()


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel cross entropy; positions labeled IGNORE_INDEX are skipped."""
    return F.cross_entropy(logits, target, ignore_index=IGNORE_INDEX)


def affinity_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross entropy between the decoder affinity and its label."""
    if predicted.shape != target.shape:
        raise ValueError("affinity shapes differ")
    clamped = predicted.clamp(1e-7, 1.0 - 1e-7)
    return -(target * clamped.log() + (1.0 - target) * (1.0 - clamped).log()).mean()


def total_loss(seg: float, aff: float, weight: float) -> LossBreakdown:
    return LossBreakdown(seg_loss=float(seg), aff_loss=float(aff),
                         weight=float(weight), total=float(seg) + float(weight) * float(aff))


# -- configuration --------------------------------------------------------


@dataclass
class TrainConfig:
    """Run settings; defaults reproduce the reference recipe at full scale."""

    # optimization
    mode: str = "weak"
    batch_size: int = 4
    max_iters: int = 30000
    learning_rate: float = 2e-3
    weight_decay: float = 1e-3
    crop_size: int = 320
    lambda_aff: float = 0.1
    seed: int = 0
    # decoder
    decoder_width: int = 256
    decoder_depth: int = 3
    decoder_heads: int = 8
    layer_start: int = 1
    ff_expansion: int = 2
    decoder_seed: int = 0
    # refinement
    n0: int = 6
    alpha: float = 2.0
    alpha_mode: str = "matrix"
    box_threshold: float = 0.4
    par_iters: int = 10
    par_sigma: float = 0.1
    min_confidence: float = 0.0
    # initial activation maps
    tau: float = 0.01
    background_mode: str = "one_minus_max"
    prompt_template: str = DEFAULT_TEMPLATE
    # frozen encoder
    backbone_source: str = "synthetic"     # "synthetic" or "archive"
    backbone_archive: str = ""
    backbone_seed: int = 0
    num_blocks: int = 12
    token_dim: int = 768
    patch_size: int = 16
    backbone_heads: int = 12
    text_dim: int = 512
    separable: bool = False
    separable_noise: float = 0.05
    # data
    data_root: str = ""
    train_split: str = "train"
    flip: bool = True
    # inference
    scales: tuple = (0.75, 1.0)
    # bookkeeping
    checkpoint_interval: int = 1000
    log_interval: int = 1

    def validate(self) -> None:
        for name in ("batch_size", "learning_rate", "crop_size", "n0",
                     "par_iters", "tau", "checkpoint_interval", "log_interval",
                     "num_blocks", "token_dim", "patch_size", "decoder_width",
                     "decoder_depth", "decoder_heads", "ff_expansion"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        for name in ("max_iters", "weight_decay", "lambda_aff", "alpha",
                     "box_threshold", "par_sigma", "min_confidence"):
            if getattr(self, name) < 0:
                raise ValueError(f"config field {name} must be non-negative")
        if self.mode not in ("weak", "full"):
            raise ValueError(f"unknown training mode '{self.mode}'")
        if self.alpha_mode not in ("matrix", "elementwise"):
            raise ValueError(f"unknown alpha_mode '{self.alpha_mode}'")
        if self.background_mode not in ("one_minus_max", "gradcam_bg"):
            raise ValueError(f"unknown background_mode '{self.background_mode}'")
        if self.backbone_source not in ("synthetic", "archive"):
            raise ValueError(f"unknown backbone_source '{self.backbone_source}'")
        if self.backbone_source == "archive" and not self.backbone_archive:
            raise ValueError("backbone_source=archive requires backbone_archive")
        if not self.scales:
            raise ValueError("scales must be non-empty")


# config files are flat "key = value" lines; "lambda" maps to lambda_aff
_KEY_ALIASES = {"lambda": "lambda_aff"}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field_type, raw: str):
    raw = raw.strip()
    if field_type is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got '{raw}'")
    if field_type is int:
        return int(raw)
    if field_type is float:
        return float(raw)
    if field_type is tuple:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    return raw


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment; returns raw strings."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno} is not key = value: '{line}'")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def apply_settings(config: TrainConfig, settings: dict) -> TrainConfig:
    """Typed overrides onto a config; unknown keys raise DataError."""
    concrete = {f.name: type(getattr(config, f.name)) for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for key, raw in settings.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in concrete:
            raise DataError(f"unknown config key '{key}'")
        try:
            updates[name] = _parse_value(concrete[name], str(raw))
        except ValueError as exc:
            raise DataError(f"bad value for config key '{key}': {exc}") from exc
    return dataclasses.replace(config, **updates)


def format_config(config: TrainConfig) -> str:
    lines = []
    for field in dataclasses.fields(TrainConfig):
        name = "lambda" if field.name == "lambda_aff" else field.name
        lines.append(f"{name} = {_format_value(getattr(config, field.name))}")
    return "\n".join(lines) + "\n"


def load_config(path=None, overrides=None) -> TrainConfig:
    config = TrainConfig()
    if path is not None:
        config = apply_settings(config, parse_config_text(Path(path).read_text()))
    if overrides:
        config = apply_settings(config, overrides)
    config.validate()
    return config


# -- model assembly -------------------------------------------------------


def build_backbone(config: TrainConfig, class_names=None) -> FrozenBackbone:
    if config.backbone_source == "archive":
        return load_backbone(config.backbone_archive)
    shape = BackboneConfig(num_blocks=config.num_blocks, token_dim=config.token_dim,
                           patch_size=config.patch_size, grid_h=config.crop_size // config.patch_size,
                           grid_w=config.crop_size // config.patch_size,
                           num_heads=config.backbone_heads, text_dim=config.text_dim)
    kwargs = {"template": config.prompt_template}
    if config.separable:
        if not class_names:
            raise DataError("separable backbone needs dataset class names")
        kwargs.update(separable_classes=list(class_names),
                      separable_noise=config.separable_noise)
    return make_synthetic_backbone(shape, seed=config.backbone_seed, **kwargs)


def build_decoder(config: TrainConfig, backbone: FrozenBackbone,
                  num_classes: int) -> Decoder:
    return Decoder(num_blocks=backbone.config.num_blocks,
                   token_dim=backbone.config.token_dim,
                   num_classes=num_classes, width=config.decoder_width,
                   depth=config.decoder_depth, num_heads=config.decoder_heads,
                   layer_start=config.layer_start, ff_expansion=config.ff_expansion,
                   seed=config.decoder_seed)


class TrainState:
    """Everything a training step needs; the encoder stays frozen inside."""

    def __init__(self, config: TrainConfig, manifest: DatasetManifest):
        config.validate()
        self.config = config
        self.manifest = manifest
        self.backbone = build_backbone(config, manifest.class_names)
        self.decoder = build_decoder(config, self.backbone, manifest.num_classes)
        self.optimizer = torch.optim.AdamW(
            self.decoder.parameters(), lr=config.learning_rate,
            weight_decay=config.weight_decay)
        self.vocabulary = ClassVocabulary(
            foreground_names=tuple(manifest.class_names),
            background_names=tuple(VOC_BACKGROUND),
            template=config.prompt_template)
        self.rng = np.random.default_rng(config.seed)
        self._text_cache = {}

    def text_embeddings(self, present) -> tuple:
        key = tuple(present)
        if key not in self._text_cache:
            prompts = build_prompts(self.vocabulary, present)
            self._text_cache[key] = self.backbone.encode_text(prompts)
        return self._text_cache[key]

    def sample_batch(self):
        """Random crops (and flips) from the train split, seeded."""
        cfg = self.config
        indices = self.rng.integers(0, len(self.manifest.records), size=cfg.batch_size)
        images, labels, masks = [], [], []
        for idx in indices:
            record = self.manifest.records[int(idx)]
            image = load_image(record.image_path)
            mask = load_mask(record.mask_path) if record.mask_path else None
            _, height, width = image.shape
            if height < cfg.crop_size or width < cfg.crop_size:
                raise DataError(f"image '{record.image_id}' smaller than crop "
                                f"{cfg.crop_size}")
            top = int(self.rng.integers(0, height - cfg.crop_size + 1))
            left = int(self.rng.integers(0, width - cfg.crop_size + 1))
            image = image[:, top:top + cfg.crop_size, left:left + cfg.crop_size]
            if mask is not None:
                mask = mask[top:top + cfg.crop_size, left:left + cfg.crop_size]
            if cfg.flip and self.rng.random() < 0.5:
                image = torch.flip(image, dims=(2,))
                if mask is not None:
                    mask = torch.flip(mask, dims=(1,))
            images.append(image)
            labels.append(sorted(record.labels))
            masks.append(mask)
        return torch.stack(images), labels, masks


def _pseudo_targets(state: TrainState, pixels: torch.Tensor, present: list,
                    attentions: list, pooled, aff: torch.Tensor, grid,
                    sample: int):
    """Refined pseudo mask and affinity label for one image, gradient-free."""
    cfg = state.config
    text = state.text_embeddings(present)
    with torch.no_grad():
        cam = compute_cam_stack(
            tokens=pooled.tokens[sample], image_vec=pooled.vector[sample],
            text_embeds=text, present_classes=present, grid=grid,
            tau=cfg.tau, background_mode=cfg.background_mode)
        per_block = [a[sample] for a in attentions]
        scores = torch.stack([attention_score(aff, a) for a in per_block])
        gate = attention_filter(scores, cfg.n0)
        refining = refining_map(aff, gate, per_block)
        r_nor = sinkhorn_normalize(refining)
        boxes = [class_box_mask(cam.maps[1 + j], cfg.box_threshold)
                 for j in range(len(present))]
        refined = refine_cam(r_nor, cam, cfg.alpha, boxes, alpha_mode=cfg.alpha_mode)
        small = F.adaptive_avg_pool2d(pixels[sample:sample + 1], grid)[0]
        par_maps = par_refine(small, refined.maps, num_iters=cfg.par_iters,
                              sigma_rgb=cfg.par_sigma)
        pseudo = to_pseudo_label(CamStack(maps=par_maps,
                                          class_indices=refined.class_indices,
                                          normalized=False))
        if cfg.min_confidence > 0.0:
            confidence = par_maps.max(dim=0).values
            pseudo = pseudo.masked_fill(confidence < cfg.min_confidence, IGNORE_INDEX)
        pair_label = affinity_label(pseudo.masked_fill(pseudo == IGNORE_INDEX, 0)
                                    if cfg.min_confidence > 0.0 else pseudo)
    return pseudo, pair_label


def train_step(state: TrainState, batch) -> LossBreakdown:
    """One optimizer update; returns the recorded loss values."""
    cfg = state.config
    pixels, labels, masks = batch
    crop = tuple(pixels.shape[-2:])
    grid = state.backbone.token_grid(crop)
    features, attentions, pooled = state.backbone.encode_image(ImageBatch(pixels))
    logits, fused = state.decoder(features, grid, crop)

    targets = []
    aff_terms = []
    for i in range(pixels.shape[0]):
        if cfg.mode == "full":
            if masks[i] is None:
                raise DataError("full mode requires ground-truth masks")
            targets.append(masks[i])
            continue
        if not labels[i]:
            raise DataError("weak mode requires image-level labels")
        aff = affinity_map(fused[i])
        pseudo, pair_label = _pseudo_targets(
            state, pixels, labels[i], attentions, pooled, aff.detach(), grid, i)
        upsampled = F.interpolate(pseudo[None, None].float(), size=crop,
                                  mode="nearest")[0, 0].long()
        targets.append(upsampled)
        aff_terms.append(affinity_loss(aff, pair_label))

    seg = segmentation_loss(logits, torch.stack(targets))
    if aff_terms:
        aff = torch.stack(aff_terms).mean()
        total = seg + cfg.lambda_aff * aff
    else:
        aff = torch.zeros(())
        total = seg
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss at training step: seg={seg.item()!r} "
                           f"aff={aff.item()!r}")
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    return total_loss(seg.item(), aff.item(), cfg.lambda_aff if aff_terms else 0.0)


def train(config: TrainConfig, manifest: DatasetManifest, out_dir) -> Path:
    """Full run: loop, TSV loss log, periodic checkpoints; returns final path."""
    torch.manual_seed(config.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(format_config(config))
    state = TrainState(config, manifest)
    log_path = out_dir / "run_log.tsv"
    with open(log_path, "w") as log:
        log.write("# step\tseg_loss\taff_loss\ttotal\n")
        for step in range(1, config.max_iters + 1):
            losses = train_step(state, state.sample_batch())
            if step % config.log_interval == 0 or step == config.max_iters:
                log.write(f"{step}\t{losses.seg_loss!r}\t{losses.aff_loss!r}"
                          f"\t{losses.total!r}\n")
            if step % config.checkpoint_interval == 0:
                save_decoder(state.decoder, out_dir / f"checkpoint_{step:06d}.nta")
    final = out_dir / "checkpoint_final.nta"
    save_decoder(state.decoder, final)
    return final


def train_fully_supervised(config: TrainConfig, manifest: DatasetManifest, out_dir) -> Path:
    """Ground-truth mask training; affinity loss is recorded as zero."""
    if config.mode != "full":
        config = dataclasses.replace(config, mode="full")
    return train(config, manifest, out_dir)
