"""Forward passes producing prompt embeddings and the fused text embedding.

Prompt embeddings: learnable queries cross-attend into the encoded lab
series. Fused text: note and anomaly caption are self-encoded separately
with shared parameters, concatenated, and mean-pooled.
"""

from __future__ import annotations

import torch

from .model import AlignmentModel, ShapeError, masked_mean


def compute_prompt_embeddings(
    model: AlignmentModel,
    patches: torch.Tensor,  # (B, P, patch_len, N_x)
    patch_pad: torch.Tensor | None = None,
) -> torch.Tensor:
    """Queries (broadcast over the batch) attend into the time-series encoding."""
    kv, kv_mask = model.tse(patches, patch_pad)
    queries = model.prompt_queries(patches.shape[0])
    return model.encoder.cross_encode(queries, kv, kv_mask)


def encode_texts(
    model: AlignmentModel,
    note_ids: torch.Tensor,  # (B, N_m)
    caption_ids: torch.Tensor,  # (B, N_c)
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Encode note and caption separately (same parameters, no cross-attending)."""
    note_values, note_mask = model.encoder.embed_tokens(note_ids)
    cap_values, cap_mask = model.encoder.embed_tokens(caption_ids)
    e_m = model.encoder.self_encode(note_values, note_mask)
    e_c = model.encoder.self_encode(cap_values, cap_mask)
    return e_m, note_mask, e_c, cap_mask


def fuse_text(
    e_m: torch.Tensor,
    note_mask: torch.Tensor,
    e_c: torch.Tensor,
    cap_mask: torch.Tensor,
) -> torch.Tensor:
    """Concatenate along the token axis and mean over unmasked positions -> (B, D)."""
    if e_m.shape[0] != e_c.shape[0] or e_m.shape[-1] != e_c.shape[-1]:
        raise ShapeError("note and caption encodings disagree on batch or width")
    values = torch.cat([e_m, e_c], dim=1)
    mask = torch.cat([note_mask, cap_mask], dim=1)
    return masked_mean(values, mask)
