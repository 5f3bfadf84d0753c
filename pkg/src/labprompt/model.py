"""Trainable substrate: shared text encoder with self/cross attention,
patch time-series encoder, heads, and learnable query vectors.

One parameter set serves all text-encoding roles; cross-attention and
self-attention are entry points into the same block stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import PAD_ID, parse_kv_config


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_prompts: int = 24  # prompt/query length
    patch_len: int = 8
    max_len: int = 1000  # padded series length
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 0  # set from the corpus vocabulary
    n_variables: int = 8
    downstream_hidden: int = 512
    lm_dim: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    max_tokens: int = 512  # longest text sequence (positions)
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")
        if self.n_prompts < 1:
            raise ShapeError("need at least one prompt vector")
        if self.max_len % self.patch_len != 0:
            raise ShapeError("max_len must be divisible by patch_len")

    @property
    def n_patches(self) -> int:
        return self.max_len // self.patch_len

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        return cls(**parse_kv_config(path, cls))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,  # (B, Nq, D)
        kv: torch.Tensor,  # (B, Nk, D)
        kv_mask: torch.Tensor | None = None,  # (B, Nk) bool, True = attendable
        causal: bool = False,
        return_weights: bool = False,
    ):
        B, Nq, D = query.shape
        Nk = kv.shape[1]
        q = self.q_proj(query).view(B, Nq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(kv).view(B, Nk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(kv).view(B, Nk, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / self.head_dim**0.5  # (B, H, Nq, Nk)
        if kv_mask is not None:
            scores = scores.masked_fill(~kv_mask[:, None, None, :], float("-inf"))
        if causal:
            tri = torch.ones(Nq, Nk, dtype=torch.bool, device=query.device).tril()
            scores = scores.masked_fill(~tri, float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, Nq, D)
        out = self.o_proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, d_model: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(F.gelu(self.fc1(x))))


class EncoderBlock(nn.Module):
    """Pre-norm residual block with separate self- and cross-attention paths."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ln_self = nn.LayerNorm(d_model)
        self.ln_cross = nn.LayerNorm(d_model)
        self.ln_ffn = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, dropout)

    def forward(
        self,
        x: torch.Tensor,
        x_mask: torch.Tensor | None,
        kv: torch.Tensor | None = None,
        kv_mask: torch.Tensor | None = None,
        causal: bool = False,
        use_self: bool = True,
    ) -> torch.Tensor:
        if use_self:
            h = self.ln_self(x)
            x = x + self.self_attn(h, h, kv_mask=x_mask, causal=causal)
        if kv is not None:
            x = x + self.cross_attn(self.ln_cross(x), kv, kv_mask=kv_mask)
        x = x + self.ffn(self.ln_ffn(x))
        return x


def _mask_from_ids(token_ids: torch.Tensor) -> torch.Tensor:
    return token_ids != PAD_ID


class SharedTextEncoder(nn.Module):
    """Stand-in for the shared clinical text encoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_embedding = nn.Embedding(config.max_tokens, config.d_model)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.d_model, config.n_heads, config.dropout)
            for _ in range(config.n_layers)
        )
        self.ln_out = nn.LayerNorm(config.d_model)

    def embed_tokens(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Row lookup (f_W); no positions added here. Returns (values, mask)."""
        if token_ids.max() >= self.config.vocab_size or token_ids.min() < 0:
            raise IndexError("token id outside the vocabulary")
        mask = _mask_from_ids(token_ids)
        return self.tok_embedding(token_ids), mask

    def add_positions(self, values: torch.Tensor) -> torch.Tensor:
        n = values.shape[1]
        if n > self.config.max_tokens:
            raise ShapeError(f"sequence length {n} exceeds max_tokens {self.config.max_tokens}")
        pos = torch.arange(n, device=values.device)
        return values + self.pos_embedding(pos)

    def self_encode(
        self, values: torch.Tensor, mask: torch.Tensor, positions: bool = True
    ) -> torch.Tensor:
        """Bidirectional self-attention stack; masked positions stay zeroed."""
        if values.shape[:2] != mask.shape:
            raise ShapeError("mask misaligned with values")
        x = self.add_positions(values) if positions else values
        for block in self.blocks:
            x = block(x, x_mask=mask)
        return self.ln_out(x) * mask.unsqueeze(-1)

    def cross_encode(
        self,
        query_values: torch.Tensor,
        kv_values: torch.Tensor,
        kv_mask: torch.Tensor,
        query_mask: torch.Tensor | None = None,
        causal: bool = False,
        positions: bool = False,
    ) -> torch.Tensor:
        """Attend query stream into key/value stream; output length = query length.

        `causal=True` additionally runs causally masked self-attention over the
        query stream before each cross step (the decoding entry point).
        """
        if query_values.shape[-1] != kv_values.shape[-1]:
            raise ShapeError("query and key/value widths differ")
        x = self.add_positions(query_values) if positions else query_values
        for block in self.blocks:
            x = block(
                x,
                x_mask=query_mask,
                kv=kv_values,
                kv_mask=kv_mask,
                causal=causal,
                use_self=causal,
            )
        x = self.ln_out(x)
        if query_mask is not None:
            x = x * query_mask.unsqueeze(-1)
        return x


class TimeSeriesEncoder(nn.Module):
    """PatchTST-style encoder: per-patch linear projection + positions + attention."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.patch_proj = nn.Linear(config.patch_len * config.n_variables, config.d_model)
        self.pos_embedding = nn.Embedding(config.n_patches, config.d_model)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.d_model, config.n_heads, config.dropout)
            for _ in range(config.n_layers)
        )
        self.ln_out = nn.LayerNorm(config.d_model)

    def forward(
        self, patches: torch.Tensor, patch_pad: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """patches: (B, P, patch_len, N_x); patch_pad: (B, P) bool, True = all-padding patch."""
        B, P, plen, nvar = patches.shape
        if plen != self.config.patch_len or nvar != self.config.n_variables:
            raise ShapeError(
                f"patch shape ({plen},{nvar}) does not match config "
                f"({self.config.patch_len},{self.config.n_variables})"
            )
        mask = torch.ones(B, P, dtype=torch.bool, device=patches.device)
        if patch_pad is not None:
            mask = ~patch_pad
        x = self.patch_proj(patches.reshape(B, P, plen * nvar))
        x = x + self.pos_embedding(torch.arange(P, device=patches.device))
        for block in self.blocks:
            x = block(x, x_mask=mask)
        return self.ln_out(x) * mask.unsqueeze(-1), mask


class MatchHead(nn.Module):
    """Mean-pool then 2-layer perceptron over {no-match, match}."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(config.d_model, config.downstream_hidden)
        self.fc2 = nn.Linear(config.downstream_hidden, 2)

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pooled = masked_mean(values, mask)
        return self.fc2(F.relu(self.fc1(pooled)))


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over unmasked positions along the token axis."""
    counts = mask.sum(dim=-1)
    if (counts == 0).any():
        raise ShapeError("cannot pool a fully masked sequence")
    return (values * mask.unsqueeze(-1)).sum(dim=-2) / counts.unsqueeze(-1)


def init_query_set(config: ModelConfig, word_embedding: torch.Tensor) -> nn.Parameter:
    """Copy the first N_p word-embedding rows as independent learnable queries."""
    if word_embedding.shape[0] < config.n_prompts:
        raise ShapeError("vocabulary smaller than the requested prompt length")
    return nn.Parameter(word_embedding[: config.n_prompts].detach().clone())


class AlignmentModel(nn.Module):
    """The full pretraining stack: shared encoder, TSE, queries, and heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < max(4, config.n_prompts):
            raise ShapeError("vocab_size not set or smaller than the prompt length")
        self.config = config
        self.encoder = SharedTextEncoder(config)
        self.tse = TimeSeriesEncoder(config)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size)
        self.match_head = MatchHead(config)
        self.apply(_init_weights)
        self.queries = init_query_set(config, self.encoder.tok_embedding.weight)

    def prompt_queries(self, batch_size: int) -> torch.Tensor:
        return self.queries.unsqueeze(0).expand(batch_size, -1, -1)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Embedding):
        nn.init.uniform_(module.weight, -0.02, 0.02)
    elif isinstance(module, nn.Linear):
        if min(module.weight.shape) > 1:
            nn.init.orthogonal_(module.weight, gain=0.5)
        else:
            nn.init.uniform_(module.weight, -0.02, 0.02)
        nn.init.zeros_(module.bias)


def frozen_names(module: nn.Module) -> set[str]:
    return {name for name, p in module.named_parameters() if not p.requires_grad}


def freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
