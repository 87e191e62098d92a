"""Dual-branch copy-move network.

ResNet-18 style backbone cut at stride 16, an encoder of interleaved
windowed (local) and full (global) self-attention blocks followed by a
three-convolution residual block, and two upsampling decoders emitting
2-class detection logits and 3-class source/target logits.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

NORM_MEAN = 0.5
NORM_STD = 0.25
# expected fraction of forged pixels, used to initialise the classifier biases
FORGED_PRIOR = 0.1
CLASSIFIER_INIT_STD = 1e-3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 256
    embed_channels: int = 256
    encoder_depth: int = 1
    num_heads: int = 8
    window: int = 4
    decoder_channels: tuple[int, ...] = (128, 64, 32, 16)
    use_transformer: bool = True
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.input_size % 16:
            raise ConfigError(f"input_size must be a multiple of 16, got {self.input_size}")
        if self.embed_channels % 4:
            raise ConfigError(f"embed_channels must be divisible by 4, got {self.embed_channels}")
        if self.embed_channels % self.num_heads:
            raise ConfigError(f"embed_channels={self.embed_channels} not divisible by num_heads={self.num_heads}")
        if self.feature_size % self.window:
            raise ConfigError(f"feature side {self.feature_size} not divisible by window {self.window}")
        if self.encoder_depth < 0:
            raise ConfigError("encoder_depth must be >= 0")
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder needs exactly four stages to undo the stride-16 backbone")

    @property
    def feature_size(self) -> int:
        return self.input_size // 16

    @property
    def transformer_active(self) -> bool:
        return self.use_transformer and self.encoder_depth > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


def normalize_images(images) -> torch.Tensor:
    """uint8 (N,H,W,3) or (H,W,3) array -> float (N,3,H,W), (x/255 - 0.5)/0.25."""
    x = torch.tensor(np.asarray(images))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    x = x.permute(0, 3, 1, 2).contiguous().to(torch.float32) / 255.0
    return (x - NORM_MEAN) / NORM_STD


# ------------------------------------------------------------------ backbone


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


class Backbone(nn.Module):
    """ResNet-18 stem + layer1..layer3; widths are (C/4, C/2, C) for C output channels."""

    def __init__(self, out_channels: int = 256):
        super().__init__()
        w1, w2, w3 = out_channels // 4, out_channels // 2, out_channels
        self.conv1 = nn.Conv2d(3, w1, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(w1)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = nn.Sequential(BasicBlock(w1, w1), BasicBlock(w1, w1))
        self.layer2 = nn.Sequential(BasicBlock(w1, w2, 2), BasicBlock(w2, w2))
        self.layer3 = nn.Sequential(BasicBlock(w2, w3, 2), BasicBlock(w3, w3))

    def forward(self, x):
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        return self.layer3(self.layer2(self.layer1(x)))


# ------------------------------------------------------------------ encoder


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attention: bool = False):
        n, length, dim = x.shape
        qkv = self.qkv(x).reshape(n, length, 3, self.num_heads, dim // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(n, length, dim))
        return (out, attn) if return_attention else out


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, tokens, return_attention: bool = False):
        a = self.attn(self.norm1(tokens), return_attention=return_attention)
        if return_attention:
            a, weights = a
        tokens = tokens + a
        tokens = tokens + self.mlp(self.norm2(tokens))
        return (tokens, weights) if return_attention else tokens


class LocalAttention(nn.Module):
    """Self-attention inside non-overlapping window x window cells of the grid."""

    def __init__(self, dim: int, num_heads: int, window: int, mlp_ratio: int = 4):
        super().__init__()
        self.window = window
        self.block = TransformerBlock(dim, num_heads, mlp_ratio)

    def forward(self, fm, return_attention: bool = False):
        b, c, h, w = fm.shape
        ws = self.window
        if h % ws or w % ws:
            raise ConfigError(f"feature map {h}x{w} not divisible by window {ws}")
        x = fm.reshape(b, c, h // ws, ws, w // ws, ws).permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)
        out = self.block(x, return_attention=return_attention)
        if return_attention:
            out, weights = out
        out = out.reshape(b, h // ws, w // ws, ws, ws, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w).contiguous()
        return (out, weights) if return_attention else out


class GlobalAttention(nn.Module):
    """Full self-attention over all h*w grid positions."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.block = TransformerBlock(dim, num_heads, mlp_ratio)

    def forward(self, fm, return_attention: bool = False):
        b, c, h, w = fm.shape
        x = fm.flatten(2).transpose(1, 2)
        out = self.block(x, return_attention=return_attention)
        if return_attention:
            out, weights = out
        out = out.transpose(1, 2).reshape(b, c, h, w).contiguous()
        return (out, weights) if return_attention else out


class ResidualRefine(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, 1, 1) for _ in range(3))

    def forward(self, fm):
        out = fm
        for conv in self.convs:
            out = F.relu(conv(out))
        return fm + out


class Encoder(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        c = config.embed_channels
        self.pos_embed = None
        self.local_blocks = nn.ModuleList()
        self.global_blocks = nn.ModuleList()
        if config.transformer_active:
            self.pos_embed = nn.Parameter(torch.zeros(1, c, config.feature_size, config.feature_size))
            for _ in range(config.encoder_depth):
                self.local_blocks.append(LocalAttention(c, config.num_heads, config.window, config.mlp_ratio))
                self.global_blocks.append(GlobalAttention(c, config.num_heads, config.mlp_ratio))
        self.refine = ResidualRefine(c)

    def forward(self, fm):
        if self.pos_embed is not None:
            fm = fm + self.pos_embed
        for local, glob in zip(self.local_blocks, self.global_blocks):
            fm = glob(local(fm))
        return self.refine(fm)


# ------------------------------------------------------------------ decoders


class Decoder(nn.Module):
    """Four [3x3 conv, ReLU, 2x bilinear upsample] stages and a 1x1 classifier."""

    def __init__(self, in_channels: int, num_classes: int, channels=(128, 64, 32, 16)):
        super().__init__()
        if num_classes not in (2, 3):
            raise ConfigError(f"decoder supports 2 or 3 classes, got {num_classes}")
        self.stages = nn.ModuleList()
        prev = in_channels
        for ch in channels:
            self.stages.append(nn.Conv2d(prev, ch, 3, 1, 1))
            prev = ch
        self.classifier = nn.Conv2d(prev, num_classes, 1)

    def forward(self, fm, trace: list | None = None):
        x = fm
        for conv in self.stages:
            x = F.interpolate(F.relu(conv(x)), scale_factor=2, mode="bilinear", align_corners=False)
            if trace is not None:
                trace.append(tuple(x.shape))
        return self.classifier(x)


class DualBranchNet(nn.Module):
    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config or NetworkConfig()
        c = self.config.embed_channels
        self.backbone = Backbone(c)
        self.encoder = Encoder(self.config)
        self.decoder_f = Decoder(c, 2, self.config.decoder_channels)
        self.decoder_d = Decoder(c, 3, self.config.decoder_channels)
        init_weights(self)

    def forward(self, x):
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
            raise ValueError(f"expected input (N, 3, {size}, {size}), got {tuple(x.shape)}")
        # channels-last inputs crash some CPU conv backward kernels
        feats = self.encoder(self.backbone(x.contiguous()))
        return self.decoder_f(feats), self.decoder_d(feats)

    @torch.no_grad()
    def predict_logits(self, images, batch_size: int = 8) -> tuple[torch.Tensor, torch.Tensor]:
        """Eval-mode logits for uint8 (N,H,W,3) images."""
        was_training = self.training
        self.eval()
        det, dist = [], []
        try:
            for i in range(0, len(images), batch_size):
                x = normalize_images(images[i : i + batch_size]).to(next(self.parameters()).dtype)
                d, s = self(x)
                det.append(d)
                dist.append(s)
        finally:
            self.train(was_training)
        return torch.cat(det), torch.cat(dist)


def prior_bias(num_classes: int, prior: float = FORGED_PRIOR) -> torch.Tensor:
    """Log-probabilities putting ``prior`` on forged, split evenly over non-pristine classes."""
    rest = prior / (num_classes - 1)
    return torch.tensor([math.log(1.0 - prior)] + [math.log(rest)] * (num_classes - 1))


def init_weights(model: nn.Module) -> None:
    for name, m in model.named_modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for m in model.modules():
        if isinstance(m, Decoder):
            # Near-zero weights plus prior biases make both heads start with the same
            # forged probability, so the consistency term is ~0 at step 0 instead of
            # swamping the cross-entropy with a large random disagreement.
            nn.init.normal_(m.classifier.weight, std=CLASSIFIER_INIT_STD)
            with torch.no_grad():
                m.classifier.bias.copy_(prior_bias(m.classifier.out_channels))
        if isinstance(m, Encoder) and m.pos_embed is not None:
            nn.init.trunc_normal_(m.pos_embed, std=0.02)


def parameter_schema(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every tensor in the model state (parameters and buffers)."""
    with torch.device("meta"):
        model = DualBranchNet(config)
    return {k: tuple(v.shape) for k, v in model.state_dict().items()}
