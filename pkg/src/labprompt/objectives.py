"""The three self-supervised losses and their weighted combination:
symmetric contrastive alignment, intra-modal matching with in-batch hard
negatives, and caption reconstruction by teacher forcing.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .corpus import PAD_ID
from .model import AlignmentModel, ShapeError

MATCH = 1
NO_MATCH = 0


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # contrastive
    beta: float = 1.0  # matching
    gamma: float = 1.0  # generation

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ObjectiveError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ObjectiveError("at least one loss weight must be positive")

    @classmethod
    def from_ratio(cls, ratio: str) -> "LossWeights":
        """Accepts presets like "1:2:2"."""
        parts = ratio.split(":")
        if len(parts) != 3:
            raise ObjectiveError(f"expected three ratio terms, got {ratio!r}")
        a, b, g = (float(p) for p in parts)
        return cls(a, b, g)

    def as_ratio(self) -> str:
        def fmt(x: float) -> str:
            return str(int(x)) if x == int(x) else str(x)

        return f"{fmt(self.alpha)}:{fmt(self.beta)}:{fmt(self.gamma)}"


@dataclass
class LossBreakdown:
    contrast: float
    match: float
    gen: float
    total: float


def similarity_matrices(e_f: torch.Tensor, prompts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Max over the prompt axis of all pairwise inner products; both (B, B).

    g_f2x[i, j] = max_n <e_f[i], prompts[j, n]>; g_x2f[i, j] = max_n <prompts[i, n], e_f[j]>.
    """
    if e_f.shape[0] != prompts.shape[0] or e_f.shape[-1] != prompts.shape[-1]:
        raise ShapeError("fused text and prompt embeddings disagree on batch or width")
    g_f2x = torch.einsum("id,jnd->ijn", e_f, prompts).max(dim=-1).values
    g_x2f = torch.einsum("ind,jd->ijn", prompts, e_f).max(dim=-1).values
    return g_f2x, g_x2f


def contrastive_loss(
    g_f2x: torch.Tensor,
    g_x2f: torch.Tensor,
    targets: torch.Tensor | None = None,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Symmetric row-softmax cross-entropy; aligned batches default to diagonal targets."""
    if not torch.isfinite(g_f2x).all() or not torch.isfinite(g_x2f).all():
        raise ObjectiveError("non-finite similarity logits")
    B = g_f2x.shape[0]
    if targets is None:
        targets = torch.eye(B, dtype=g_f2x.dtype, device=g_f2x.device)
    log_f2x = F.log_softmax(g_f2x / temperature, dim=-1)
    log_x2f = F.log_softmax(g_x2f / temperature, dim=-1)
    h_f2x = -(targets * log_f2x).sum(dim=-1).mean()
    h_x2f = -(targets * log_x2f).sum(dim=-1).mean()
    return 0.5 * (h_f2x + h_x2f)


def mine_hard_negatives(
    g_f2x: torch.Tensor, g_x2f: torch.Tensor
) -> list[tuple[int, int, int]]:
    """Per anchor: the true pair plus the top-ranked in-batch non-pair per direction.

    Returns 3B (caption_index, series_index, label) triples; selection is
    detached from the gradient graph.
    """
    B = g_f2x.shape[0]
    if B < 2:
        raise ObjectiveError("hard-negative mining needs a batch of at least 2")
    neg_inf = torch.finfo(g_f2x.dtype).min
    eye = torch.eye(B, dtype=torch.bool, device=g_f2x.device)
    f2x = g_f2x.detach().masked_fill(eye, neg_inf)
    x2f = g_x2f.detach().masked_fill(eye, neg_inf)
    pairs = []
    for i in range(B):
        pairs.append((i, i, MATCH))
        pairs.append((i, int(f2x[i].argmax()), NO_MATCH))  # hardest series for caption i
        pairs.append((int(x2f[i].argmax()), i, NO_MATCH))  # hardest caption for series i
    return pairs


def matching_loss(
    model: AlignmentModel,
    caption_ids: torch.Tensor,  # (B, N_c)
    patches: torch.Tensor,  # (B, P, patch_len, N_x)
    patch_pad: torch.Tensor | None,
    pairs: list[tuple[int, int, int]],
) -> torch.Tensor:
    """Binary match/no-match cross-entropy over mined candidate pairs.

    Query = [embedded caption ++ prompt queries]; keys/values = encoded series.
    """
    cap_idx = torch.tensor([p[0] for p in pairs], device=caption_ids.device)
    ser_idx = torch.tensor([p[1] for p in pairs], device=caption_ids.device)
    labels = torch.tensor([p[2] for p in pairs], device=caption_ids.device)
    cap_values, cap_mask = model.encoder.embed_tokens(caption_ids[cap_idx])
    queries = model.prompt_queries(len(pairs))
    q_values = torch.cat([cap_values, queries], dim=1)
    q_mask = torch.cat(
        [cap_mask, torch.ones(len(pairs), queries.shape[1], dtype=torch.bool, device=cap_mask.device)],
        dim=1,
    )
    kv, kv_mask = model.tse(patches[ser_idx], None if patch_pad is None else patch_pad[ser_idx])
    hidden = model.encoder.cross_encode(q_values, kv, kv_mask, query_mask=q_mask)
    logits = model.match_head(hidden, q_mask)
    return F.cross_entropy(logits, labels)


def generation_loss(
    model: AlignmentModel,
    caption_ids: torch.Tensor,  # (B, N_c), BOS ... EOS then PAD
    prompts: torch.Tensor,  # (B, N_p, D)
) -> torch.Tensor:
    """Teacher-forced caption reconstruction from the prompt embeddings.

    Caption-side states run under a causal self-attention mask while
    cross-attending into the prompts; position t is scored against token t+1.
    """
    if caption_ids.shape[1] < 2:
        raise ObjectiveError("caption too short to teacher-force")
    values, mask = model.encoder.embed_tokens(caption_ids)
    kv_mask = torch.ones(prompts.shape[0], prompts.shape[1], dtype=torch.bool, device=prompts.device)
    hidden = model.encoder.cross_encode(
        values, prompts, kv_mask, query_mask=mask, causal=True, positions=True
    )
    logits = model.lm_head(hidden)
    return F.cross_entropy(
        logits[:, :-1].reshape(-1, logits.shape[-1]),
        caption_ids[:, 1:].reshape(-1),
        ignore_index=PAD_ID,
    )


def total_loss(
    contrast: torch.Tensor | float,
    match: torch.Tensor | float,
    gen: torch.Tensor | float,
    weights: LossWeights,
):
    """total = alpha * contrast + beta * match + gamma * gen."""
    return weights.alpha * contrast + weights.beta * match + weights.gamma * gen
