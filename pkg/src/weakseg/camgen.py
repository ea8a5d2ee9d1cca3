"""Initial class activation maps from the frozen encoder.

Pipeline per image: build prompts for the present classes plus a background
vocabulary, embed them, take cosine distances to the pooled image embedding,
sharpen with a temperature softmax, then turn the analytic gradient of a
class score into channel weights and a ReLU-weighted activation map.

Gradients are closed-form (no autograd): for the temperature softmax

    dS_c/dD_c' = S_c (delta_cc' - S_c') / tau

and for the cosine distance with respect to the pooled vector

    dD_c'/dF_v = F_t[c'] / (|F_t[c']| |F_v|) - D_c' F_v / |F_v|^2

chained through global average pooling (factor 1/hw per token).
"""

from dataclasses import dataclass

import torch

VOC_FOREGROUND = [
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
]

VOC_BACKGROUND = [
    "ground", "land", "grass", "tree", "building", "wall", "sky", "lake",
    "water", "river", "sea", "railway", "railroad", "keyboard", "helmet",
    "cloud", "house", "mountain", "ocean", "road", "rock", "street",
    "valley", "bridge", "sign",
]

COCO_EXCLUDED_BACKGROUND = {"sign", "keyboard"}

DEFAULT_TEMPLATE = "a clear origami {}"

_EPS = 1e-8


@dataclass(frozen=True)
class ClassVocabulary:
    foreground_names: tuple
    background_names: tuple = tuple(VOC_BACKGROUND)
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        for names in (self.foreground_names, self.background_names):
            if len(set(names)) != len(names):
                raise ValueError("class names must be unique within each list")
            if any(not n for n in names):
                raise ValueError("class names must be non-empty")

    @property
    def num_foreground(self) -> int:
        return len(self.foreground_names)


def voc_vocabulary(template: str = DEFAULT_TEMPLATE) -> ClassVocabulary:
    return ClassVocabulary(tuple(VOC_FOREGROUND), tuple(VOC_BACKGROUND), template)


@dataclass
class CamStack:
    """Activation maps (1 + num present classes, h, w); channel 0 is background.

    `class_indices` holds the global foreground index of channels 1.. in order.
    """
    maps: torch.Tensor
    class_indices: list
    normalized: bool = False

    @property
    def grid(self):
        return self.maps.shape[-2], self.maps.shape[-1]


def build_prompts(vocabulary: ClassVocabulary, present_classes) -> list:
    """Prompts for present foregrounds (vocabulary order) then all backgrounds."""
    for idx in present_classes:
        if not 0 <= idx < vocabulary.num_foreground:
            raise ValueError(f"unknown foreground class index {idx}")
    ordered = sorted(set(present_classes))
    names = [vocabulary.foreground_names[i] for i in ordered]
    return [vocabulary.template.format(n) for n in names] + \
           [vocabulary.template.format(n) for n in vocabulary.background_names]


def class_distance(image_vec: torch.Tensor, text_embeds: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of each text row to the pooled image vector."""
    v_norm = image_vec.norm()
    t_norms = text_embeds.norm(dim=1)
    if v_norm <= _EPS or bool((t_norms <= _EPS).any()):
        raise ValueError("zero-norm embedding in cosine distance")
    return (text_embeds @ image_vec) / (t_norms * v_norm)


def class_scores(distances: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return torch.softmax(distances / tau, dim=0)


def channel_weights(tokens: torch.Tensor, image_vec: torch.Tensor,
                    text_embeds: torch.Tensor, scores: torch.Tensor,
                    distances: torch.Tensor, tau: float, class_index: int) -> torch.Tensor:
    """Analytic per-channel weights for one class score.

    tokens: (hw, d_embed) spatial features, image_vec their mean. Returns the
    gradient of scores[class_index] w.r.t. any single token entry, averaged
    over tokens, i.e. the weight vector of the activation map.
    """
    hw = tokens.shape[0]
    v_norm = image_vec.norm()
    t_norms = text_embeds.norm(dim=1)
    if v_norm <= _EPS or bool((t_norms <= _EPS).any()):
        raise ValueError("zero-norm embedding in channel_weights")
    # dS_c/dD: (num_prompts,)
    one_hot = torch.zeros_like(scores)
    one_hot[class_index] = 1.0
    score_grad = scores[class_index] * (one_hot - scores) / tau
    # dD_c'/dF_v: (num_prompts, d_embed)
    dist_grad = text_embeds / (t_norms * v_norm).unsqueeze(1) \
        - distances.unsqueeze(1) * image_vec.unsqueeze(0) / (v_norm ** 2)
    return (score_grad @ dist_grad) / hw


def initial_cam(weights: torch.Tensor, tokens: torch.Tensor, grid) -> torch.Tensor:
    """ReLU-weighted sum of token channels, reshaped onto the (h, w) grid."""
    h, w = grid
    if tokens.shape[0] != h * w:
        raise ValueError(f"token count {tokens.shape[0]} does not match grid {h}x{w}")
    return torch.relu(tokens @ weights).reshape(h, w)


def max_normalize(channel: torch.Tensor) -> torch.Tensor:
    """Scale a nonnegative map to peak 1; all-(near-)zero channels become zero."""
    peak = channel.max()
    if peak > _EPS:
        return channel / peak
    return torch.zeros_like(channel)


def compute_cam_stack(tokens: torch.Tensor, image_vec: torch.Tensor,
                      text_embeds: torch.Tensor, present_classes, grid,
                      tau: float = 0.01, background_mode: str = "one_minus_max") -> CamStack:
    """Initial CAM stack for one image: background channel 0 plus present classes.

    text_embeds rows must follow build_prompts order: present foregrounds in
    vocabulary order, then the background vocabulary.
    """
    present = sorted(set(present_classes))
    h, w = grid
    distances = class_distance(image_vec, text_embeds)
    scores = class_scores(distances, tau)
    fg_maps = []
    for channel, _ in enumerate(present):
        w_c = channel_weights(tokens, image_vec, text_embeds, scores, distances, tau, channel)
        fg_maps.append(max_normalize(initial_cam(w_c, tokens, grid)))
    fg = torch.stack(fg_maps) if fg_maps else torch.zeros(0, h, w, dtype=tokens.dtype)
    if background_mode == "one_minus_max":
        bg = 1.0 - fg.amax(dim=0) if len(fg_maps) else torch.ones(h, w, dtype=tokens.dtype)
    elif background_mode == "gradcam_bg":
        bg_maps = []
        for channel in range(len(present), text_embeds.shape[0]):
            w_c = channel_weights(tokens, image_vec, text_embeds, scores, distances, tau, channel)
            bg_maps.append(max_normalize(initial_cam(w_c, tokens, grid)))
        bg = torch.stack(bg_maps).amax(dim=0)
    else:
        raise ValueError(f"unknown background mode '{background_mode}'")
    maps = torch.cat([bg.unsqueeze(0), fg], dim=0)
    return CamStack(maps=maps, class_indices=list(present), normalized=True)
