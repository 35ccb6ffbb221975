"""ViT backbones and the feature/attention extraction path.

Extraction works on any ViT whose last block exposes a fused ``qkv`` linear
(the structure of the self-supervised ViT families this exporter targets):
patch features come from ``get_intermediate_layers`` and per-head attention
is recomputed from the tokens entering the final attention module, taking the
class-token row over the patch columns. Features are written raw, without any
normalization, since the downstream clustering distances assume unnormalized
backbone outputs.

``load_model("selftest")`` builds a small seeded ViT (patch 14, 384-dim, 6
heads) so pipelines can be validated offline; its features are meaningless
but structurally identical to a real backbone's.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

DINO_HUB_REPO = "facebookresearch/dinov2"
SELFTEST_MODEL_ID = "selftest"


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.GELU(), nn.Linear(dim * 4, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class MiniVit(nn.Module):
    """Compact ViT with the token layout and module structure of the larger
    self-supervised models: patch embedding, class token, pre-norm blocks
    with fused qkv attention, final norm."""

    def __init__(self, patch_size=14, dim=384, depth=2, num_heads=6, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch_size = patch_size
        self.embed_dim = dim
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.eval()

    def prepare_tokens(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(pixels).flatten(2).transpose(1, 2)  # (b, hw, d)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        x = self.prepare_tokens(pixels)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def get_intermediate_layers(self, pixels, n=1, reshape=False, norm=True):
        x = self.prepare_tokens(pixels)
        for block in self.blocks:
            x = block(x)
        if norm:
            x = self.norm(x)
        out = x[:, 1:, :]
        if reshape:
            b = pixels.shape[0]
            h = pixels.shape[2] // self.patch_size
            w = pixels.shape[3] // self.patch_size
            out = out.reshape(b, h, w, -1).permute(0, 3, 1, 2).contiguous()
        return (out,)


class VitBackbone:
    """Extraction wrapper around a ViT module.

    The wrapped model must provide ``blocks`` (last one holding an ``attn``
    module with ``qkv`` and ``num_heads``) and ``get_intermediate_layers``.
    """

    def __init__(self, model: nn.Module, model_id: str, patch_size: int):
        self.model = model.eval()
        self.model_id = model_id
        self.patch_size = patch_size
        attn = model.blocks[-1].attn
        self.num_heads = attn.num_heads
        self.embed_dim = getattr(model, "embed_dim", attn.qkv.in_features)

    @torch.no_grad()
    def extract(self, pixels: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        """Run one (1, 3, H, W) image; return (features (h, w, d), attention
        (heads, h, w)) as float32 arrays, both on the patch grid."""
        threads = torch.get_num_threads()
        torch.set_num_threads(1)  # keeps reductions bit-stable across runs
        try:
            h = pixels.shape[2] // self.patch_size
            w = pixels.shape[3] // self.patch_size

            attn_module = self.model.blocks[-1].attn
            captured: list[torch.Tensor] = []
            handle = attn_module.register_forward_pre_hook(
                lambda _mod, inputs: captured.append(inputs[0].detach())
            )
            try:
                feats = self.model.get_intermediate_layers(pixels, n=1, reshape=True, norm=True)[0]
            finally:
                handle.remove()
            features = feats[0].permute(1, 2, 0).contiguous().cpu().numpy().astype(np.float32)

            tokens = captured[-1]  # (1, n_tokens, d) entering the last attention
            b, n, d = tokens.shape
            head_dim = d // self.num_heads
            qkv = attn_module.qkv(tokens).reshape(b, n, 3, self.num_heads, head_dim)
            qkv = qkv.permute(2, 0, 3, 1, 4)
            q, k = qkv[0], qkv[1]
            attn = ((q @ k.transpose(-2, -1)) / math.sqrt(head_dim)).softmax(dim=-1)
            prefix = n - h * w  # class token plus any register tokens
            cls_to_patches = attn[0, :, 0, prefix:].reshape(self.num_heads, h, w)
            attention = cls_to_patches.cpu().numpy().astype(np.float32)
            return features, attention
        finally:
            torch.set_num_threads(threads)


def load_model(model_id: str) -> VitBackbone:
    """Resolve a model id to a backbone.

    "selftest" builds the deterministic offline MiniVit; anything else is
    fetched from the torch hub repo of the self-supervised ViT family
    (e.g. "dinov2_vits14"), which needs network access and cached weights.
    """
    if model_id == SELFTEST_MODEL_ID:
        return VitBackbone(MiniVit(), model_id, patch_size=14)
    model = torch.hub.load(DINO_HUB_REPO, model_id)
    patch_size = getattr(model, "patch_size", None) or model.patch_embed.patch_size[0]
    return VitBackbone(model, model_id, patch_size=int(patch_size))
