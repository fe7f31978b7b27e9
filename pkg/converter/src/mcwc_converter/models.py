"""Reference decoder-only Transformer used by the converter tests and as the
'tiny-decoder' architecture adapter target."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class TinyDecoderConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_heads: int = 4
    n_kv_heads: int = 4  # < n_heads means grouped-query attention
    n_layers: int = 2
    d_ff: int = 64
    max_seq: int = 32
    head_mixing: bool = False  # cross-head mixing after attention


class Attention(nn.Module):
    def __init__(self, cfg: TinyDecoderConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.n_kv_heads = cfg.n_kv_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.q = nn.Linear(cfg.d_model, cfg.n_heads * self.d_head)
        self.k = nn.Linear(cfg.d_model, cfg.n_kv_heads * self.d_head)
        self.v = nn.Linear(cfg.d_model, cfg.n_kv_heads * self.d_head)
        self.o = nn.Linear(cfg.n_heads * self.d_head, cfg.d_model)
        if cfg.head_mixing:
            self.mix = nn.Parameter(torch.eye(cfg.n_heads))
        else:
            self.mix = None

    def forward(self, x):
        b, t, _ = x.shape
        rep = self.n_heads // self.n_kv_heads
        q = self.q(x).view(b, t, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(x).view(b, t, self.n_kv_heads, self.d_head).transpose(1, 2)
        v = self.v(x).view(b, t, self.n_kv_heads, self.d_head).transpose(1, 2)
        if rep > 1:
            k = k.repeat_interleave(rep, dim=1)
            v = v.repeat_interleave(rep, dim=1)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        mask = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = att @ v
        if self.mix is not None:
            y = torch.einsum("gh,bhtd->bgtd", self.mix, y)
        y = y.transpose(1, 2).reshape(b, t, -1)
        return self.o(y)


class Block(nn.Module):
    def __init__(self, cfg: TinyDecoderConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.up = nn.Linear(cfg.d_model, cfg.d_ff)
        self.down = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        x = x + self.down(F.gelu(self.up(self.ln2(x))))
        return x


class TinyDecoder(nn.Module):
    def __init__(self, cfg: TinyDecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Embedding(cfg.max_seq, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, tokens):
        pos = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.embed(tokens) + self.pos(pos)[None]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


def save_model(model: TinyDecoder, path) -> None:
    torch.save({"arch": "tiny-decoder", "config": asdict(model.cfg),
                "state_dict": model.state_dict()}, path)


def load_model(path) -> TinyDecoder:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = TinyDecoder(TinyDecoderConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
