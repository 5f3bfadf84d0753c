"""Tiny decoder-only language model used frozen for downstream diagnosis.

Pre-trained in-repo on synthetic instruction -> diagnosis text until fluent
on the template grammar; it can consume mixed sequences of soft prompt
vectors and token embeddings.
"""

from __future__ import annotations

import hashlib

import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import EncoderBlock, ModelConfig, _init_weights


class TinyCausalLM(nn.Module):
    def __init__(self, config: ModelConfig, max_positions: int = 384):
        super().__init__()
        self.config = config
        self.max_positions = max_positions
        self.tok_embedding = nn.Embedding(config.vocab_size, config.lm_dim)
        self.pos_embedding = nn.Embedding(max_positions, config.lm_dim)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.lm_dim, config.lm_heads) for _ in range(config.lm_layers)
        )
        self.head = nn.Linear(config.lm_dim, config.vocab_size)
        self.apply(_init_weights)

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.tok_embedding(token_ids)

    def forward(
        self,
        inputs_embeds: torch.Tensor,  # (B, N, lm_dim), may mix soft vectors and token embeddings
        attend_mask: torch.Tensor | None = None,  # (B, N) bool, True = real position
    ) -> torch.Tensor:
        B, N, _ = inputs_embeds.shape
        if N > self.max_positions:
            raise ValueError(f"sequence length {N} exceeds LM positions {self.max_positions}")
        x = inputs_embeds + self.pos_embedding(torch.arange(N, device=inputs_embeds.device))
        for block in self.blocks:
            x = block(x, x_mask=attend_mask, causal=True)
        return self.head(x)


def lm_parameter_hash(lm: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(lm.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def assert_frozen(lm: nn.Module) -> None:
    unfrozen = [n for n, p in lm.named_parameters() if p.requires_grad]
    if unfrozen:
        raise RuntimeError(f"frozen-LM invariant violated; tunable parameters: {unfrozen}")


def greedy_decode(
    lm: TinyCausalLM,
    prefix_embeds: torch.Tensor,  # (1, N, lm_dim)
    eos_id: int,
    max_new_tokens: int = 64,
) -> tuple[list[int], bool]:
    """Greedy continuation after the prefix; returns (token ids, truncated flag)."""
    embeds = prefix_embeds
    out: list[int] = []
    with torch.no_grad():
        for _ in range(max_new_tokens):
            logits = lm(embeds)
            next_id = int(logits[0, -1].argmax())
            if next_id == eos_id:
                return out, False
            out.append(next_id)
            nxt = lm.embed(torch.tensor([[next_id]]))
            embeds = torch.cat([embeds, nxt], dim=1)
    return out, True
