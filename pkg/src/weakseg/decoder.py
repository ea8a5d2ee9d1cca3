"""Trainable segmentation decoder.

Per-block MLPs project every frozen feature map to a common width, a 1x1
convolution fuses the concatenated stack, and a small pre-norm transformer
plus a classification convolution produce dense logits which are bilinearly
upsampled to the input resolution. The fused map is also exposed since the
refinement module builds its affinity from it.
"""

from collections import OrderedDict

import torch
import torch.nn.functional as F
from torch import nn

from .archive import read_archive, write_archive


def _seeded_fan_in_init(module: nn.Module, generator: torch.Generator):
    for p in module.parameters():
        fan_in = p.shape[-1] if p.dim() == 1 else p[0].numel()
        bound = max(fan_in, 1) ** -0.5
        with torch.no_grad():
            p.uniform_(-bound, bound, generator=generator)


class _BlockMLP(nn.Module):
    """fc1(ReLU(fc2(x))) applied tokenwise, one instance per frozen block."""

    def __init__(self, token_dim, width):
        super().__init__()
        self.fc2 = nn.Linear(token_dim, width)
        self.fc1 = nn.Linear(width, width)

    def forward(self, x):
        return self.fc1(torch.relu(self.fc2(x)))


class _SelfAttention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError("decoder width must be divisible by head count")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.head_dim ** -0.5, dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class _TransformerLayer(nn.Module):
    """Pre-norm encoder layer with a ReLU feed-forward."""

    def __init__(self, dim, num_heads, ff_expansion):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, dim * ff_expansion),
            nn.ReLU(),
            nn.Linear(dim * ff_expansion, dim),
        )

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class Decoder(nn.Module):
    """Interprets the frozen feature stack as dense class logits.

    Args:
        num_blocks: number of frozen encoder blocks (N).
        token_dim: frozen token feature dimension.
        num_classes: output channels including background.
        width: hidden width shared by the MLPs, fusion and transformer.
        depth: number of transformer layers.
        num_heads: attention heads per transformer layer.
        layer_start: first (1-based) frozen block consumed; blocks
            [layer_start, num_blocks] each get their own MLP.
        ff_expansion: feed-forward widening factor inside the transformer.
    """

    def __init__(self, num_blocks=12, token_dim=768, num_classes=21, width=256,
                 depth=3, num_heads=8, layer_start=1, ff_expansion=2, seed=0):
        super().__init__()
        if not 1 <= layer_start <= num_blocks:
            raise ValueError(f"layer_start must lie in [1, {num_blocks}]")
        self.num_blocks = num_blocks
        self.layer_start = layer_start
        self.width = width
        self.num_classes = num_classes

        self.mlps = nn.ModuleDict({
            f"mlp{l}": _BlockMLP(token_dim, width)
            for l in range(layer_start, num_blocks + 1)
        })
        used = num_blocks - layer_start + 1
        self.fuse = nn.Conv2d(used * width, width, kernel_size=1)
        self.phi = nn.ModuleList(
            [_TransformerLayer(width, num_heads, ff_expansion) for _ in range(depth)])
        self.head = nn.Conv2d(width, num_classes, kernel_size=1)

        _seeded_fan_in_init(self, torch.Generator().manual_seed(seed))

    # -- stages ---------------------------------------------------------

    def per_layer_mlp(self, features: torch.Tensor, block: int) -> torch.Tensor:
        """Apply block `block`'s (1-based) MLP to (batch, hw, token_dim) tokens."""
        return self.mlps[f"mlp{block}"](features)

    def fuse_features(self, feature_stack, grid) -> torch.Tensor:
        """Concatenate the per-block MLP outputs and fuse to (batch, width, h, w)."""
        h, w = grid
        outs = [self.per_layer_mlp(feature_stack[l - 1], l)
                for l in range(self.layer_start, self.num_blocks + 1)]
        x = torch.cat(outs, dim=-1)                       # (b, hw, used*width)
        b, hw, c = x.shape
        if hw != h * w:
            raise ValueError(f"token count {hw} does not match grid {h}x{w}")
        x = x.transpose(1, 2).reshape(b, c, h, w)
        return self.fuse(x)

    def decode_segment(self, fused: torch.Tensor, out_size) -> torch.Tensor:
        """Transformer stack, classification conv, bilinear upsample to out_size."""
        b, c, h, w = fused.shape
        x = fused.flatten(2).transpose(1, 2)              # (b, hw, width)
        for layer in self.phi:
            x = layer(x)
        x = x.transpose(1, 2).reshape(b, c, h, w)
        logits = self.head(x)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)

    def forward(self, feature_stack, grid, out_size):
        """Full pass: returns (logits at out_size, fused feature map)."""
        fused = self.fuse_features(feature_stack, grid)
        return self.decode_segment(fused, out_size), fused

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _archive_name(param_name: str) -> str:
    name = param_name
    if name.startswith("mlps."):
        name = name[len("mlps."):]
    elif name.startswith("phi."):
        name = "phi" + name[len("phi."):]
    return "decoder/" + name.replace(".", "/")


def save_decoder(decoder: Decoder, path) -> None:
    records = OrderedDict(
        (_archive_name(name), param) for name, param in decoder.named_parameters())
    write_archive(path, records)


def load_decoder_state(decoder: Decoder, path) -> None:
    """Load parameters saved by save_decoder into an identically shaped decoder."""
    records = read_archive(path)
    reverse = {_archive_name(name): name for name, _ in decoder.named_parameters()}
    state = {}
    for key, tensor in records.items():
        if key not in reverse:
            raise ValueError(f"unexpected decoder record '{key}'")
        state[reverse[key]] = tensor
    decoder.load_state_dict(state)
