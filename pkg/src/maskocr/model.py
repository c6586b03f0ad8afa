"""Encoder-decoder transformer for text recognition over vertical patches."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    patch_width: int = 4
    channels: int = 3
    img_h: int = 32
    img_w: int = 128
    enc_layers: int = 4
    enc_dim: int = 128
    enc_heads: int = 4
    dec_layers: int = 2
    dec_dim: int = 128
    dec_heads: int = 4
    num_queries: int = 25
    vocab_size: int = 17
    mlp_ratio: float = 4.0
    drop_path_rate: float = 0.1
    head: str = "query"  # or "ctc"
    ctc_layers: int = 2
    pos_init: str = "sincos"  # or "trunc_normal"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.patch_width <= 0 or self.img_w % self.patch_width:
            raise ModelConfigError(f"patch_width {self.patch_width} must divide img_w {self.img_w}")
        if self.enc_dim % self.enc_heads:
            raise ModelConfigError("enc_dim must be divisible by enc_heads")
        if self.dec_dim % self.dec_heads:
            raise ModelConfigError("dec_dim must be divisible by dec_heads")
        if self.num_queries < 1:
            raise ModelConfigError("num_queries must be >= 1")
        if self.head not in ("query", "ctc"):
            raise ModelConfigError(f"unknown head {self.head!r}")
        if self.pos_init not in ("sincos", "trunc_normal"):
            raise ModelConfigError(f"unknown pos_init {self.pos_init!r}")

    @property
    def num_patches(self) -> int:
        return self.img_w // self.patch_width

    @property
    def patch_dim(self) -> int:
        return self.channels * self.img_h * self.patch_width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def patchify(images: torch.Tensor, patch_width: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., M, C*H*patch_width), patches ordered left to right."""
    *lead, C, H, W = images.shape
    if W % patch_width:
        raise ModelConfigError(f"patch_width {patch_width} does not divide width {W}")
    M = W // patch_width
    x = images.reshape(*lead, C, H, M, patch_width)
    x = x.movedim(-2, -4)  # (..., M, C, H, pw)
    return x.reshape(*lead, M, C * H * patch_width)


def unpatchify(patches: torch.Tensor, channels: int, height: int) -> torch.Tensor:
    *lead, M, D = patches.shape
    pw = D // (channels * height)
    x = patches.reshape(*lead, M, channels, height, pw).movedim(-4, -2)
    return x.reshape(*lead, channels, height, M * pw)


def sincos_positions(n: int, dim: int) -> torch.Tensor:
    """Fixed 1-D sine/cosine table, used as the starting point of learnable positions."""
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(n, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.float()


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = x.new_empty(shape).bernoulli_(keep)
        return x * mask / keep


class Attention(nn.Module):
    """Multi-head attention; ``key_mask`` is True where a key must be ignored."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_mask=None):
        context = x if context is None else context
        B, Nq, D = x.shape
        Nk = context.shape[1]
        h = self.heads
        q = self.q(x).view(B, Nq, h, -1).transpose(1, 2)
        k = self.k(context).view(B, Nk, h, -1).transpose(1, 2)
        v = self.v(context).view(B, Nk, h, -1).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(key_mask[:, None, None, :], float("-inf"))
        attn = scores.softmax(dim=-1)
        if key_mask is not None:
            # hidden values are zeroed so that non-finite content cannot leak through 0 * inf
            v = v.masked_fill(key_mask[:, None, :, None], 0.0)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, D)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim, heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, key_mask=None):
        x = x + self.drop_path(self.attn(self.norm1(x), key_mask=key_mask))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class CrossBlock(nn.Module):
    """Pre-norm cross-attention + FFN (queries attend to a fixed context)."""

    def __init__(self, dim, heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, context, key_mask=None):
        x = x + self.drop_path(self.attn(self.norm_q(x), self.norm_kv(context), key_mask=key_mask))
        return x + self.drop_path(self.mlp(self.norm2(x)))


class DecoderBlock(nn.Module):
    """Self-attention over queries, cross-attention to memory, FFN."""

    def __init__(self, dim, heads, mlp_ratio=4.0, drop_path=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, memory):
        x = x + self.drop_path(self.self_attn(self.norm1(x)))
        x = x + self.drop_path(self.cross_attn(self.norm2(x), memory))
        return x + self.drop_path(self.mlp(self.norm3(x)))


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_width = cfg.patch_width
        self.num_patches = cfg.num_patches
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.enc_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches, cfg.enc_dim))
        dpr = torch.linspace(0, cfg.drop_path_rate, cfg.enc_layers).tolist() if cfg.enc_layers else []
        self.blocks = nn.ModuleList(Block(cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio, p) for p in dpr)
        self.norm = nn.LayerNorm(cfg.enc_dim)
        if cfg.pos_init == "sincos":
            with torch.no_grad():
                self.pos_embed.copy_(sincos_positions(cfg.num_patches, cfg.enc_dim)[None])
        else:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def embed(self, patches):
        return self.patch_embed(patches) + self.pos_embed

    def forward(self, patches, mask=None):
        """Patch vectors (B, M, P) -> representations (B, M, enc_dim).

        ``mask`` (B, M) is True at hidden patches; they are excluded as keys,
        so visible outputs do not depend on hidden content.
        """
        if patches.shape[-2] != self.num_patches:
            raise ModelConfigError(f"expected {self.num_patches} patches, got {patches.shape[-2]}")
        if mask is not None and mask.all(dim=-1).any():
            raise ValueError("attention mask hides every patch")
        x = self.embed(patches)
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        return self.norm(x)


class QueryDecoder(nn.Module):
    """Parallel decoder: N learned character queries read the encoder memory."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.pos_init == "sincos":
            # distinct starting points; near-identical queries stall on symmetric attention
            init = sincos_positions(cfg.num_queries, cfg.dec_dim)
        else:
            init = torch.randn(cfg.num_queries, cfg.dec_dim) * 0.02
        self.queries = nn.Parameter(init)
        self.memory_proj = nn.Linear(cfg.enc_dim, cfg.dec_dim) if cfg.enc_dim != cfg.dec_dim else nn.Identity()
        dpr = torch.linspace(0, cfg.drop_path_rate, cfg.dec_layers).tolist() if cfg.dec_layers else []
        self.blocks = nn.ModuleList(DecoderBlock(cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio, p) for p in dpr)
        self.norm = nn.LayerNorm(cfg.dec_dim)
        self.classifier = nn.Linear(cfg.dec_dim, cfg.vocab_size)

    def forward(self, memory):
        """memory: (B, M, enc_dim), positions already added -> logits (B, N, vocab)."""
        mem = self.memory_proj(memory)
        x = self.queries.unsqueeze(0).expand(memory.shape[0], -1, -1)
        for blk in self.blocks:
            x = blk(x, mem)
        return self.classifier(self.norm(x))


class CTCHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.ctc_layers))
        self.norm = nn.LayerNorm(cfg.enc_dim)
        self.classifier = nn.Linear(cfg.enc_dim, cfg.vocab_size + 1)

    def forward(self, memory):
        x = memory
        for blk in self.blocks:
            x = blk(x)
        return self.classifier(self.norm(x))


class MaskOCR(nn.Module):
    """Recognizer: patchify -> embed(+pos) -> encode -> decode.

    The decoder memory is the encoder output with the encoder's positional
    embeddings added again.  With ``zero_masked`` the rows of hidden
    patches are replaced by zeros before that addition.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        if cfg.head == "query":
            self.decoder = QueryDecoder(cfg)
        else:
            self.decoder = CTCHead(cfg)
        self.apply(_init_weights)

    def encode(self, images, mask=None):
        return self.encoder(patchify(images, self.cfg.patch_width), mask)

    def memory(self, feats, mask=None, zero_masked: bool = False):
        if zero_masked and mask is not None:
            feats = feats.masked_fill(mask[..., None], 0.0)
        return feats + self.encoder.pos_embed

    def decode(self, feats, mask=None, zero_masked: bool = False):
        if feats.shape[-2] != self.cfg.num_patches:
            raise ModelConfigError(f"decoder expects {self.cfg.num_patches} rows, got {feats.shape[-2]}")
        return self.decoder(self.memory(feats, mask, zero_masked))

    def forward(self, images, mask=None, zero_masked: bool = False):
        feats = self.encode(images, mask)
        return self.decode(feats, mask, zero_masked)

    def classifier_parameters(self):
        return list(self.decoder.classifier.parameters())


def greedy_decode(logits: torch.Tensor, vocab) -> list[str]:
    """Argmax per query row, truncated at the first EOS."""
    ids = logits.argmax(dim=-1)
    return [vocab.decode(row.tolist()) for row in ids]


def ctc_greedy_decode(frame_ids, blank_id: int, vocab=None):
    """Collapse repeats, then drop blanks."""
    out = []
    prev = None
    for i in frame_ids:
        i = int(i)
        if i != prev and i != blank_id:
            out.append(i)
        prev = i
    if vocab is None:
        return out
    return "".join(vocab.chars[i] for i in out if i < len(vocab.chars))


def _linear(i, o):
    return i * o + o


def _attn(d):
    return 4 * _linear(d, d)


def _mlp(d, r):
    h = int(d * r)
    return _linear(d, h) + _linear(h, d)


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    encoder   = (P*E + E) + M*E + Le*(4E + attn(E) + mlp(E)) + 2E
    decoder   = N*D + proj + Ld*(6D + 2*attn(D) + mlp(D)) + 2D + (D*V + V)
    ctc head  = Lc*(4E + attn(E) + mlp(E)) + 2E + (E*(V+1) + V+1)
    with attn(d) = 4(d^2 + d), mlp(d) = 2*r*d^2 + r*d + d, proj = E*D + D when E != D.
    """
    E, D, r = cfg.enc_dim, cfg.dec_dim, cfg.mlp_ratio
    enc_block = 4 * E + _attn(E) + _mlp(E, r)
    n = _linear(cfg.patch_dim, E) + cfg.num_patches * E + cfg.enc_layers * enc_block + 2 * E
    if cfg.head == "query":
        n += cfg.num_queries * D + (_linear(E, D) if E != D else 0)
        n += cfg.dec_layers * (6 * D + 2 * _attn(D) + _mlp(D, r)) + 2 * D + _linear(D, cfg.vocab_size)
    else:
        n += cfg.ctc_layers * enc_block + 2 * E + _linear(E, cfg.vocab_size + 1)
    return n


def lr_scaled(base_lr: float, batch_size: int) -> float:
    return base_lr * batch_size / 256


def cosine_lr(step: int, total_steps: int, warmup_steps: int, peak: float, floor: float = 0.0) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    t = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * min(t, 1.0)))
