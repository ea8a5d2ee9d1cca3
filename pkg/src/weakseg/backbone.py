"""Frozen image/text encoder.

A small ViT with per-block token features and per-block attention maps, plus
a hash-based text encoder. All parameters are frozen at construction; the
module never exposes trainable parameters. Two sources of weights exist:
a seeded synthetic initialization and a named-tensor archive on disk.

The optional "separable" mode replaces the transformer forward with a rig
for end-to-end tests: token features become class-indexed embeddings of the
color layout found in the image (plus seeded noise), and attention maps
become the row-normalized same-class indicator of that layout.
"""

import hashlib
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .archive import read_archive, write_archive
from .errors import DataError
from .palette import palette_array

DEFAULT_TEMPLATE = "a clear origami {}"


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 12
    token_dim: int = 768
    patch_size: int = 16
    grid_h: int = 20
    grid_w: int = 20
    num_heads: int = 12
    text_dim: int = 512

    def __post_init__(self):
        for name in ("num_blocks", "token_dim", "patch_size", "grid_h", "grid_w",
                     "num_heads", "text_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"BackboneConfig.{name} must be a positive integer")
        if self.token_dim % self.num_heads != 0:
            raise ValueError("token_dim must be divisible by num_heads")


@dataclass
class ImageBatch:
    """Pixel batch (batch, 3, H, W) with values in [0, 1] before normalization."""
    pixels: torch.Tensor
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.pixels.dim() != 4 or self.pixels.shape[1] != 3:
            raise ValueError("pixels must have shape (batch, 3, H, W)")
        lo, hi = self.pixels.min().item(), self.pixels.max().item()
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise ValueError(f"pixel values must lie in [0, 1], got [{lo:g}, {hi:g}]")

    def normalized(self) -> torch.Tensor:
        mean = torch.tensor(self.mean, dtype=self.pixels.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=self.pixels.dtype).view(1, 3, 1, 1)
        return (self.pixels - mean) / std


@dataclass
class PooledImageEmbedding:
    """Last-block tokens projected to the text space, and their spatial mean."""
    tokens: torch.Tensor   # (batch, h*w, text_dim)
    vector: torch.Tensor   # (batch, text_dim)


def _prompt_seed(prompt: str, seed: int) -> int:
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    return (int.from_bytes(digest[:8], "little") ^ (seed * 0x9E3779B9)) & 0x7FFFFFFFFFFFFFFF


class _SelfAttention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * self.head_dim ** -0.5
        attn = attn.softmax(dim=-1)                  # (b, heads, n, n)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class _Block(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class FrozenBackbone(nn.Module):
    """Frozen ViT image encoder + deterministic hash text encoder."""

    def __init__(self, config: BackboneConfig, seed: int = 0,
                 separable_classes=None, separable_background_names=None,
                 separable_noise: float = 0.05, template: str = DEFAULT_TEMPLATE):
        super().__init__()
        self.config = config
        self.seed = int(seed)
        self.template = template
        self.separable_noise = float(separable_noise)
        self.separable_classes = list(separable_classes) if separable_classes else None
        self.separable_background_names = (
            list(separable_background_names) if separable_background_names else None)

        c = config
        self.patch_embed = nn.Conv2d(3, c.token_dim, kernel_size=c.patch_size,
                                     stride=c.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.token_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + c.grid_h * c.grid_w, c.token_dim))
        self.blocks = nn.ModuleList(
            [_Block(c.token_dim, c.num_heads) for _ in range(c.num_blocks)])
        self.norm = nn.LayerNorm(c.token_dim)
        self.proj = nn.Linear(c.token_dim, c.text_dim, bias=False)

        self._init_weights()
        if self.separable_classes is not None:
            self._init_separable()
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    # -- construction -------------------------------------------------

    def _init_weights(self):
        gen = torch.Generator().manual_seed(self.seed)
        for p in self.parameters():
            if p.dim() > 1:
                bound = p.shape[-1] ** -0.5
                with torch.no_grad():
                    p.uniform_(-bound, bound, generator=gen)
            else:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=gen)
        with torch.no_grad():
            # keep LayerNorms near identity so activations stay well scaled
            for m in self.modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    def _init_separable(self):
        """Class-indexed token embeddings and a projection aligning them to text."""
        names = self.separable_classes
        n_cls = len(names) + 1  # index 0 = background
        if n_cls > self.config.token_dim:
            raise ValueError("separable mode needs token_dim >= number of classes + 1")
        gen = torch.Generator().manual_seed(self.seed + 7919)
        basis = torch.randn(self.config.token_dim, n_cls, generator=gen)
        q, _ = torch.linalg.qr(basis)
        token_embed = q.t().contiguous()  # (n_cls, token_dim), orthonormal rows

        text_rows = [self._background_anchor()]
        for name in names:
            text_rows.append(self.encode_text([self.template.format(name)])[0])
        text_embed = torch.stack(text_rows)  # (n_cls, text_dim)

        self._sep_token_embed = token_embed
        self._sep_palette = torch.from_numpy(palette_array(n_cls))
        with torch.no_grad():
            # proj maps token embedding u_c exactly onto text embedding e_c
            self.proj.weight.copy_(text_embed.t() @ token_embed)

    def _background_anchor(self) -> torch.Tensor:
        if self.separable_background_names:
            prompts = [self.template.format(n) for n in self.separable_background_names]
            vec = self.encode_text(prompts).mean(dim=0)
            return vec / vec.norm()
        return self.encode_text([self.template.format("background")])[0]

    # -- text ----------------------------------------------------------

    def encode_text(self, prompts) -> torch.Tensor:
        """Deterministic unit embedding per prompt string, one row each."""
        if not prompts:
            raise ValueError("encode_text requires a non-empty prompt list")
        rows = []
        for prompt in prompts:
            gen = torch.Generator().manual_seed(_prompt_seed(prompt, self.seed))
            v = torch.randn(self.config.text_dim, generator=gen)
            rows.append(v / v.norm())
        return torch.stack(rows)

    # -- image ---------------------------------------------------------

    def encode_image(self, image: ImageBatch):
        """Per-block token features, per-block attention maps, pooled embedding.

        Attention maps are head-averaged with the class-token row/column
        removed and rows renormalized to sum 1.
        """
        pixels = image.pixels
        _, _, height, width = pixels.shape
        p = self.config.patch_size
        if height % p != 0 or width % p != 0:
            raise ValueError(
                f"image side lengths ({height}x{width}) must be divisible by patch size {p}")
        if self.separable_classes is not None:
            return self._encode_separable(image)
        with torch.no_grad():
            x = self.patch_embed(image.normalized())          # (b, d, h, w)
            b, d, h, w = x.shape
            x = x.flatten(2).transpose(1, 2)                  # (b, hw, d)
            cls = self.cls_token.expand(b, -1, -1)
            x = torch.cat([cls, x], dim=1) + self._pos_embed_for(h, w)
            features, attentions = [], []
            for block in self.blocks:
                x, attn = block(x)
                features.append(x[:, 1:, :].clone())
                attentions.append(self._strip_cls(attn))
            tokens = self.proj(self.norm(x[:, 1:, :]))
            pooled = PooledImageEmbedding(tokens=tokens, vector=tokens.mean(dim=1))
        return features, attentions, pooled

    def _pos_embed_for(self, h: int, w: int) -> torch.Tensor:
        gh, gw = self.config.grid_h, self.config.grid_w
        if (h, w) == (gh, gw):
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        grid = self.pos_embed[:, 1:].reshape(1, gh, gw, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        grid = grid.permute(0, 2, 3, 1).reshape(1, h * w, -1)
        return torch.cat([cls_pos, grid], dim=1)

    @staticmethod
    def _strip_cls(attn: torch.Tensor) -> torch.Tensor:
        mean = attn.mean(dim=1)                              # (b, n, n)
        spatial = mean[:, 1:, 1:]
        return spatial / spatial.sum(dim=-1, keepdim=True)

    def token_grid(self, image_size) -> tuple:
        """(h, w) token layout for a pixel size divisible by the patch size."""
        height, width = image_size
        p = self.config.patch_size
        if height % p != 0 or width % p != 0:
            raise ValueError(
                f"image side lengths ({height}x{width}) must be divisible by patch size {p}")
        return height // p, width // p

    # -- separable rig ---------------------------------------------------

    def patch_classes(self, image: ImageBatch) -> torch.Tensor:
        """(batch, h, w) class layout recovered from patch mean colors."""
        p = self.config.patch_size
        cell_color = F.avg_pool2d(image.pixels, kernel_size=p, stride=p)  # (b,3,h,w)
        pal = self._sep_palette.to(cell_color.dtype)                      # (n_cls, 3)
        dist = (cell_color.unsqueeze(1) - pal.view(1, -1, 3, 1, 1)).pow(2).sum(dim=2)
        return dist.argmin(dim=1)

    def _encode_separable(self, image: ImageBatch):
        with torch.no_grad():
            layout = self.patch_classes(image)                # (b, h, w)
            b, h, w = layout.shape
            flat = layout.reshape(b, h * w)
            same = (flat.unsqueeze(2) == flat.unsqueeze(1)).float()
            attn = same / same.sum(dim=-1, keepdim=True)
            features, attentions = [], []
            for l in range(self.config.num_blocks):
                tokens = self._sep_token_embed[flat]          # (b, hw, d)
                tokens = tokens + self.separable_noise * self._position_noise(l, h, w)
                features.append(tokens)
                attentions.append(attn.clone())
            last = features[-1] @ self.proj.weight.t()
            pooled = PooledImageEmbedding(tokens=last, vector=last.mean(dim=1))
        return features, attentions, pooled

    def _position_noise(self, block: int, h: int, w: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(
            (self.seed * 1000003 + block * 8191 + h * 131 + w) & 0x7FFFFFFFFFFFFFFF)
        return torch.randn(h * w, self.config.token_dim, generator=gen)


def make_synthetic_backbone(config: BackboneConfig, seed: int = 0, **kwargs) -> FrozenBackbone:
    """Seeded frozen backbone; identical (config, seed) gives identical weights."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    return FrozenBackbone(config, seed=seed, **kwargs)


_META_INT_FIELDS = ("num_blocks", "token_dim", "patch_size", "grid_h", "grid_w",
                    "num_heads", "text_dim")


def dump_backbone(backbone: FrozenBackbone, path) -> None:
    """Serialize weights plus construction metadata to the tensor archive."""
    records = {}
    for name in _META_INT_FIELDS:
        records[f"meta/{name}"] = torch.tensor(float(getattr(backbone.config, name)))
    # 16-bit limbs keep arbitrary 64-bit seeds exact in a float32 payload
    records["meta/seed"] = torch.tensor(
        [float((backbone.seed >> (16 * i)) & 0xFFFF) for i in range(4)])
    records["meta/separable_noise"] = torch.tensor(backbone.separable_noise)
    records[f"meta/str/template:{backbone.template}"] = torch.tensor(0.0)
    if backbone.separable_classes is not None:
        for i, name in enumerate(backbone.separable_classes):
            records[f"meta/str/separable_class/{i}:{name}"] = torch.tensor(0.0)
    if backbone.separable_background_names is not None:
        for i, name in enumerate(backbone.separable_background_names):
            records[f"meta/str/separable_background/{i}:{name}"] = torch.tensor(0.0)
    for name, param in backbone.named_parameters():
        records[f"backbone/{name}"] = param
    write_archive(path, records)


def load_backbone(path) -> FrozenBackbone:
    """Rebuild a frozen backbone from an archive written by dump_backbone."""
    records = read_archive(path)
    try:
        cfg = BackboneConfig(**{k: int(records[f"meta/{k}"].item()) for k in _META_INT_FIELDS})
    except KeyError as exc:
        raise DataError(f"backbone archive {path} is missing metadata record {exc}")
    strings = {}
    for key in records:
        if key.startswith("meta/str/"):
            field_name, _, value = key[len("meta/str/"):].partition(":")
            strings[field_name] = value
    sep_classes = _collect_indexed(strings, "separable_class")
    sep_bg = _collect_indexed(strings, "separable_background")
    limbs = records["meta/seed"].tolist()
    seed = sum(int(v) << (16 * i) for i, v in enumerate(limbs))
    backbone = FrozenBackbone(
        cfg,
        seed=seed,
        separable_classes=sep_classes,
        separable_background_names=sep_bg,
        separable_noise=float(records["meta/separable_noise"].item()),
        template=strings.get("template", DEFAULT_TEMPLATE),
    )
    state = {k[len("backbone/"):]: v for k, v in records.items() if k.startswith("backbone/")}
    with torch.no_grad():
        backbone.load_state_dict(state)
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


def _collect_indexed(strings: dict, prefix: str):
    items = []
    i = 0
    while f"{prefix}/{i}" in strings:
        items.append(strings[f"{prefix}/{i}"])
        i += 1
    return items or None
