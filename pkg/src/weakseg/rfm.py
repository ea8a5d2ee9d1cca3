"""Online refinement of the initial activation maps.

Per image: a learnable affinity map from the fused decoder features scores
each frozen attention map; maps scoring below the average over the eligible
block range are kept; the kept ones are averaged and gated by the affinity
to form a refining map, which after Sinkhorn normalization propagates each
class activation inside its bounding box. Pixel-adaptive color smoothing and
an argmax then yield the hard pseudo labels.

Everything here is a pure per-image transform; only the affinity map carries
gradients (its supervision lives in the training module).
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .camgen import CamStack, max_normalize

_EPS = 1e-8

PAR_DILATIONS = (1, 2, 4, 8, 12, 24)


@dataclass
class FilterMask:
    """Binary per-block gate; blocks before `eligible_start` are never kept."""
    gate: torch.Tensor        # (N,) bool
    eligible_start: int       # 1-based first eligible block

    @property
    def num_selected(self) -> int:
        return int(self.gate.sum().item())


def affinity_map(fused: torch.Tensor) -> torch.Tensor:
    """Sigmoid of the pairwise feature dot products; (hw, hw), symmetric."""
    flat = fused.reshape(fused.shape[0], -1)          # (width, hw)
    return torch.sigmoid(flat.t() @ flat)


def attention_score(affinity: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Total absolute deviation between the affinity and one attention map."""
    if affinity.shape != attention.shape:
        raise ValueError(f"shape mismatch {tuple(affinity.shape)} vs {tuple(attention.shape)}")
    return (affinity - attention).abs().sum()


def attention_filter(scores, eligible_start: int) -> FilterMask:
    """Keep eligible blocks scoring strictly below the eligible-range mean.

    Blocks before `eligible_start` (1-based) are ineligible. If no eligible
    block scores below the mean (all eligible scores equal), every eligible
    block is kept.
    """
    scores = torch.as_tensor(
        [s.item() if isinstance(s, torch.Tensor) else float(s) for s in scores])
    n = scores.shape[0]
    if not 1 <= eligible_start <= n:
        raise ValueError(f"eligible_start must lie in [1, {n}]")
    eligible = torch.zeros(n, dtype=torch.bool)
    eligible[eligible_start - 1:] = True
    threshold = scores[eligible].mean()
    gate = (scores < threshold) & eligible
    if not bool(gate.any()):
        gate = eligible.clone()
    return FilterMask(gate=gate, eligible_start=eligible_start)


def refining_map(affinity: torch.Tensor, mask: FilterMask, attentions) -> torch.Tensor:
    """Affinity-gated mean of the selected attention maps."""
    if mask.num_selected < 1:
        raise ValueError("refining_map requires at least one selected attention map")
    kept = [a for a, g in zip(attentions, mask.gate) if bool(g)]
    return affinity / mask.num_selected * torch.stack(kept).sum(dim=0)


def sinkhorn_normalize(matrix: torch.Tensor, tol: float = 1e-3,
                       max_iters: int = 50) -> torch.Tensor:
    """Alternate row/column normalization toward a doubly stochastic matrix.

    Stops once every row and column sum is within `tol` of 1, capped at
    `max_iters` passes. All-zero rows or columns get an epsilon floor first.
    """
    if matrix.dim() != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError("sinkhorn_normalize expects a square matrix")
    if bool((matrix < 0).any()):
        raise ValueError("sinkhorn_normalize expects nonnegative entries")
    m = matrix.clone()
    if bool((m.sum(dim=1) <= 0).any()) or bool((m.sum(dim=0) <= 0).any()):
        m = m + _EPS
    for _ in range(max_iters):
        row_dev = (m.sum(dim=1) - 1).abs().max()
        col_dev = (m.sum(dim=0) - 1).abs().max()
        # convergence test before touching the matrix keeps the op idempotent
        if max(row_dev.item(), col_dev.item()) < tol:
            break
        m = m / m.sum(dim=1, keepdim=True)
        m = m / m.sum(dim=0, keepdim=True)
    return m


def class_box_mask(channel: torch.Tensor, threshold: float = 0.4) -> torch.Tensor:
    """Bounding-box mask of activations >= threshold; full grid if none."""
    active = channel >= threshold
    if not bool(active.any()):
        return torch.ones_like(channel, dtype=torch.bool)
    rows = active.any(dim=1).nonzero().flatten()
    cols = active.any(dim=0).nonzero().flatten()
    mask = torch.zeros_like(channel, dtype=torch.bool)
    mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
    return mask


def refine_cam(r_nor: torch.Tensor, cam: CamStack, alpha: int, box_masks,
               alpha_mode: str = "matrix") -> CamStack:
    """Propagate each foreground channel with the symmetrized refining map.

    The propagation matrix has columns outside the class box zeroed (only
    box pixels act as sources) and the result is confined to the box. With
    alpha_mode "matrix" the map is applied `alpha` times (random-walk
    propagation); "elementwise" raises its entries to the alpha-th power
    before a single application.
    """
    if alpha < 1:
        raise ValueError("alpha must be a positive integer")
    if alpha_mode == "matrix" and alpha != int(alpha):
        raise ValueError("matrix alpha_mode requires an integer alpha")
    h, w = cam.grid
    sym = (r_nor + r_nor.t()) / 2
    refined = []
    for i in range(cam.maps.shape[0] - 1):
        box = box_masks[i].reshape(-1)
        column_masked = sym * box.to(sym.dtype).unsqueeze(0)
        vec = cam.maps[i + 1].reshape(-1, 1).to(sym.dtype)
        if alpha_mode == "matrix":
            out = vec
            for _ in range(int(alpha)):
                out = column_masked @ out
        elif alpha_mode == "elementwise":
            out = column_masked.pow(alpha) @ vec
        else:
            raise ValueError(f"unknown alpha_mode '{alpha_mode}'")
        out = out.reshape(h, w) * box.reshape(h, w).to(sym.dtype)
        refined.append(max_normalize(out))
    if refined:
        fg = torch.stack(refined)
        bg = 1.0 - fg.amax(dim=0)
    else:
        fg = cam.maps[1:]
        bg = torch.ones(h, w, dtype=cam.maps.dtype)
    maps = torch.cat([bg.unsqueeze(0), fg], dim=0)
    return CamStack(maps=maps, class_indices=list(cam.class_indices), normalized=True)


def par_refine(image: torch.Tensor, scores: torch.Tensor, num_iters: int = 10,
               sigma_rgb: float = 0.1, dilations=PAR_DILATIONS) -> torch.Tensor:
    """Pixel-adaptive smoothing of score maps with color-similarity kernels.

    image: (3, h, w) rgb in [0, 1] on the score grid. Each pixel's new score
    is the kernel-weighted mean of its 8-neighborhood at every dilation
    (out-of-border neighbors dropped), repeated `num_iters` times.
    """
    if num_iters == 0:
        return scores.clone()
    _, h, w = image.shape
    offsets = [(dy * d, dx * d)
               for d in dilations
               for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if not (dy == 0 and dx == 0)]
    weights, slices = [], []
    for dy, dx in offsets:
        if abs(dy) >= h and dy != 0 or abs(dx) >= w and dx != 0:
            continue
        dst_y = slice(max(0, -dy), min(h, h - dy))
        dst_x = slice(max(0, -dx), min(w, w - dx))
        src_y = slice(max(0, dy), min(h, h + dy))
        src_x = slice(max(0, dx), min(w, w + dx))
        diff = image[:, dst_y, dst_x] - image[:, src_y, src_x]
        kernel = torch.exp(-(diff ** 2).sum(dim=0) / (2 * sigma_rgb ** 2))
        full = torch.zeros(h, w, dtype=scores.dtype)
        full[dst_y, dst_x] = kernel.to(scores.dtype)
        weights.append(full)
        slices.append((dst_y, dst_x, src_y, src_x))
    if not weights:
        return scores.clone()
    denom = torch.stack(weights).sum(dim=0)
    out = scores.clone()
    for _ in range(num_iters):
        acc = torch.zeros_like(out)
        for (dst_y, dst_x, src_y, src_x), weight in zip(slices, weights):
            acc[:, dst_y, dst_x] += weight[dst_y, dst_x] * out[:, src_y, src_x]
        out = torch.where(denom > 0, acc / denom, out)
    return out


def to_pseudo_label(cam: CamStack) -> torch.Tensor:
    """Per-pixel argmax over channels mapped to global labels (0 = background).

    Ties go to the lowest channel index, i.e. to the background channel and
    then to earlier foreground channels (strictly-greater update below).
    """
    channel = torch.zeros(cam.grid, dtype=torch.long)
    best = cam.maps[0].clone()
    for i in range(1, cam.maps.shape[0]):
        better = cam.maps[i] > best
        channel[better] = i
        best = torch.where(better, cam.maps[i], best)
    label_of = torch.tensor([0] + [c + 1 for c in cam.class_indices], dtype=torch.long)
    return label_of[channel]
