"""Downstream diagnosis: prefix soft prompts feeding a frozen LM, diagnosis
string rendering/parsing, fine-tuning of the projection (and optionally the
alignment stack), greedy decoding, and micro/macro metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import alignment
from .corpus import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    DiagnosisLabelSet,
    Vocabulary,
    tokenize,
)
from .lm import TinyCausalLM, assert_frozen, greedy_decode
from .model import AlignmentModel
from .trainer import AdamW, TensorizedCorpus, TrainConfig, epoch_batches, pad_id_batch, warmup_scale

INSTRUCTION_TEXT = "diagnose disease from the following medical notes :"
CAPTION_SECTION_TEXT = "lab test anomaly descriptions :"
ANSWER_PREFIX_TEXT = "diagnosed results :"
ANSWER_PREFIX_DISPLAY = "Diagnosed Results:"


class PromptProjection(nn.Module):
    """Tunable affine map from the alignment width to the LM input width."""

    def __init__(self, d_model: int, lm_dim: int):
        super().__init__()
        self.linear = nn.Linear(d_model, lm_dim)

    def forward(self, prompts: torch.Tensor) -> torch.Tensor:
        return self.linear(prompts)


@dataclass
class DiagnosisPrediction:
    patient_id: str
    raw_text: str
    parsed: DiagnosisLabelSet
    truncated: bool = False
    dropped_fragments: int = 0


def render_diagnosis(labels: DiagnosisLabelSet, vocabulary: Sequence[str]) -> str:
    """Gold diagnosis string: canonical labels in vocabulary order."""
    ordered = [lab for lab in vocabulary if lab in labels.labels]
    return f"{ANSWER_PREFIX_DISPLAY} " + ", ".join(ordered) + "." if ordered else f"{ANSWER_PREFIX_DISPLAY}."


def _normalize_label(text: str) -> str:
    return " ".join(tokenize(text))


def _split_respecting_parens(text: str) -> list[str]:
    parts, depth, current = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return parts


def parse_diagnosis_text(
    text: str, vocabulary: Sequence[str]
) -> tuple[DiagnosisLabelSet, int]:
    """Recover the label set from decoded text; unknown fragments are dropped.

    Returns (labels, dropped fragment count). Matching is tokenizer-normalized,
    so detokenization spacing and casing do not matter.
    """
    canonical = {_normalize_label(lab): lab for lab in vocabulary}
    body = text.strip()
    norm_prefix = _normalize_label(ANSWER_PREFIX_DISPLAY)
    norm_body = _normalize_label(body)
    if norm_body.startswith(norm_prefix):
        # locate the prefix in the raw text case-insensitively
        idx = body.lower().find("diagnosed results")
        if idx >= 0:
            body = body[idx + len("diagnosed results"):]
            body = body.lstrip(" :")
    found, dropped = [], 0
    for fragment in _split_respecting_parens(body):
        fragment = fragment.strip().strip(".").strip()
        if not fragment:
            continue
        key = _normalize_label(fragment)
        if key in canonical:
            found.append(canonical[key])
        else:
            dropped += 1
    return DiagnosisLabelSet(frozenset(found)), dropped


# ---------------------------------------------------------------------------
# LLM input assembly


def encode_section(vocab: Vocabulary, text: str) -> list[int]:
    return vocab.encode(text, add_special=False)


def build_sequences(
    vocab: Vocabulary,
    note_ids: list[int],
    caption_ids: list[int] | None = None,
    answer_ids: list[int] | None = None,
) -> list[int]:
    """Token part of the LM input: BOS, instruction, note, optional caption
    section, answer prefix, then (for training) the gold answer and EOS.
    """
    ids = [BOS_ID] + encode_section(vocab, INSTRUCTION_TEXT)
    ids += [i for i in note_ids if i not in (BOS_ID, EOS_ID)]
    if caption_ids is not None:
        ids += encode_section(vocab, CAPTION_SECTION_TEXT)
        ids += [i for i in caption_ids if i not in (BOS_ID, EOS_ID)]
    ids += encode_section(vocab, ANSWER_PREFIX_TEXT)
    if answer_ids is not None:
        ids = ids + answer_ids + [EOS_ID]
    return ids


def build_llm_input(
    lm: TinyCausalLM,
    proj: PromptProjection,
    prompts: torch.Tensor | None,  # (N_p, D) or (1, N_p, D); None = notes-only arm
    token_ids: torch.Tensor,  # (1, N)
) -> torch.Tensor:
    """Soft prefix (projected prompt embeddings) followed by embedded tokens."""
    tok = lm.embed(token_ids)
    if prompts is None:
        return tok
    if prompts.dim() == 2:
        prompts = prompts.unsqueeze(0)
    soft = proj(prompts)
    if soft.shape[-1] != tok.shape[-1]:
        raise ValueError("projected prompt width does not match the LM input width")
    return torch.cat([soft, tok], dim=1)


def answer_token_ids(vocab: Vocabulary, labels: DiagnosisLabelSet, vocabulary: Sequence[str]) -> list[int]:
    text = render_diagnosis(labels, vocabulary)
    # strip the answer prefix; build_sequences adds it separately
    stripped = text[len(ANSWER_PREFIX_DISPLAY):].strip()
    return encode_section(vocab, stripped) if stripped and stripped != "." else encode_section(vocab, ".")


# ---------------------------------------------------------------------------
# frozen-LM pretraining (fixture recipe)


def pretrain_lm(
    lm: TinyCausalLM,
    vocab: Vocabulary,
    examples: list[dict],
    steps: int = 1500,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    caption_prob: float = 0.5,
) -> list[float]:
    """Teach the template grammar: next-token loss on instruction->diagnosis text.

    Each example dict carries note_ids, caption_ids, answer_ids. Half the
    sequences (per `caption_prob`) include the anomaly-caption section so the
    LM learns to exploit lab information present in its context.
    """
    gen = torch.Generator().manual_seed(seed)
    optimizer = AdamW(dict(lm.named_parameters()), lr)
    losses = []
    n = len(examples)
    for step in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen).tolist()
        seqs = []
        for i in idx:
            ex = examples[i]
            with_caption = torch.rand((), generator=gen).item() < caption_prob
            seqs.append(
                build_sequences(
                    vocab,
                    ex["note_ids"],
                    ex["caption_ids"] if with_caption else None,
                    ex["answer_ids"],
                )
            )
        batch = pad_id_batch(seqs)
        logits = lm(lm.embed(batch), attend_mask=batch != PAD_ID)
        loss = F.cross_entropy(
            logits[:, :-1].reshape(-1, logits.shape[-1]),
            batch[:, 1:].reshape(-1),
            ignore_index=PAD_ID,
        )
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(list(lm.parameters()), 1.0)
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


# ---------------------------------------------------------------------------
# fine-tuning and inference


@dataclass
class DiagnosisExample:
    patient_id: str
    token_ids: list[int]  # instruction + note + answer prefix (no answer)
    full_ids: list[int]  # token_ids + answer + EOS
    answer_start: int  # index of the first answer token within full_ids


def build_examples(
    corpus: TensorizedCorpus,
    records,
    vocab: Vocabulary,
    vocabulary: Sequence[str],
) -> list[DiagnosisExample]:
    out = []
    for i, record in enumerate(records):
        prompt_ids = build_sequences(vocab, corpus.note_ids[i])
        answer = answer_token_ids(vocab, record.labels, vocabulary)
        out.append(
            DiagnosisExample(
                patient_id=record.patient_id,
                token_ids=prompt_ids,
                full_ids=prompt_ids + answer + [EOS_ID],
                answer_start=len(prompt_ids),
            )
        )
    return out


def finetune_downstream(
    model: AlignmentModel,
    proj: PromptProjection,
    lm: TinyCausalLM,
    corpus: TensorizedCorpus,
    examples: list[DiagnosisExample],
    config: TrainConfig,
    use_prefix: bool = True,
    tune_alignment: bool = True,
) -> list[float]:
    """Minimize LM cross-entropy on the gold diagnosis tokens.

    Gradients reach the projection and (optionally) the alignment stack;
    never the frozen LM.
    """
    assert_frozen(lm)
    params = dict(proj.named_parameters())
    if tune_alignment:
        params.update({f"align.{n}": p for n, p in model.named_parameters() if p.requires_grad})
    optimizer = AdamW(params, config.learning_rate, config.weight_decay)
    losses = []
    n = len(examples)
    n_p = model.config.n_prompts
    for step in range(1, config.max_steps + 1):
        epoch, pos = divmod(step - 1, max(1, n // config.batch_size))
        batches = epoch_batches(n, config.batch_size, config.seed, epoch)
        batch = batches[pos % len(batches)]
        idx = torch.tensor(batch)
        token_batch = pad_id_batch([examples[i].full_ids for i in batch])
        tok_embeds = lm.embed(token_batch)
        attend = token_batch != PAD_ID
        if use_prefix:
            prompts = alignment.compute_prompt_embeddings(
                model, corpus.patches[idx], corpus.patch_pad[idx]
            )
            if not tune_alignment:
                prompts = prompts.detach()
            soft = proj(prompts)
            embeds = torch.cat([soft, tok_embeds], dim=1)
            attend = torch.cat(
                [torch.ones(len(batch), n_p, dtype=torch.bool), attend], dim=1
            )
            offset = n_p
        else:
            embeds = tok_embeds
            offset = 0
        logits = lm(embeds, attend_mask=attend)
        # score only the gold answer tokens (teacher forcing, shift by one)
        targets = torch.full_like(token_batch, PAD_ID)
        for row, i in enumerate(batch):
            start = examples[i].answer_start
            end = len(examples[i].full_ids)
            targets[row, start:end] = token_batch[row, start:end]
        loss = F.cross_entropy(
            logits[:, offset:-1].reshape(-1, logits.shape[-1]) if offset else logits[:, :-1].reshape(-1, logits.shape[-1]),
            targets[:, 1:].reshape(-1),
            ignore_index=PAD_ID,
        )
        optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_([p for p in params.values()], config.clip_norm)
        optimizer.step(lr_scale=warmup_scale(step, config.max_steps, config.warmup_fraction))
        losses.append(float(loss.detach()))
    assert_frozen(lm)
    return losses


def diagnose(
    model: AlignmentModel,
    proj: PromptProjection,
    lm: TinyCausalLM,
    corpus: TensorizedCorpus,
    example: DiagnosisExample,
    index: int,
    vocab: Vocabulary,
    vocabulary: Sequence[str],
    use_prefix: bool = True,
    max_new_tokens: int = 64,
) -> DiagnosisPrediction:
    """Greedy decoding of the diagnosis string for one record."""
    token_ids = torch.tensor([example.token_ids])
    with torch.no_grad():
        if use_prefix:
            prompts = alignment.compute_prompt_embeddings(
                model, corpus.patches[index : index + 1], corpus.patch_pad[index : index + 1]
            )
        else:
            prompts = None
        embeds = build_llm_input(lm, proj, prompts, token_ids)
        out_ids, truncated = greedy_decode(lm, embeds, EOS_ID, max_new_tokens)
    raw = vocab.decode(out_ids)
    parsed, dropped = parse_diagnosis_text(raw, vocabulary)
    return DiagnosisPrediction(
        patient_id=example.patient_id,
        raw_text=raw,
        parsed=parsed,
        truncated=truncated,
        dropped_fragments=dropped,
    )


# ---------------------------------------------------------------------------
# metrics


def evaluate(
    predictions: Sequence[DiagnosisLabelSet | frozenset | set],
    golds: Sequence[DiagnosisLabelSet | frozenset | set],
) -> dict:
    """Micro (pooled counts) and macro (unweighted per-label mean) P/R/F1."""
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")

    def as_set(x) -> frozenset:
        return x.labels if isinstance(x, DiagnosisLabelSet) else frozenset(x)

    preds = [as_set(p) for p in predictions]
    gold = [as_set(g) for g in golds]
    labels = sorted(set().union(*preds, *gold)) if preds else []
    tp = {lab: 0 for lab in labels}
    fp = {lab: 0 for lab in labels}
    fn = {lab: 0 for lab in labels}
    for p, g in zip(preds, gold):
        for lab in p | g:
            if lab in p and lab in g:
                tp[lab] += 1
            elif lab in p:
                fp[lab] += 1
            else:
                fn[lab] += 1

    def prf(tp_, fp_, fn_):
        precision = tp_ / (tp_ + fp_) if tp_ + fp_ else 0.0
        recall = tp_ / (tp_ + fn_) if tp_ + fn_ else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return precision, recall, f1

    micro = prf(sum(tp.values()), sum(fp.values()), sum(fn.values()))
    per_label = {lab: prf(tp[lab], fp[lab], fn[lab]) for lab in labels}
    if labels:
        macro = tuple(sum(score[i] for score in per_label.values()) / len(labels) for i in range(3))
    else:
        macro = (0.0, 0.0, 0.0)
    return {
        "micro": {"precision": micro[0], "recall": micro[1], "f1": micro[2]},
        "macro": {"precision": macro[0], "recall": macro[1], "f1": macro[2]},
        "per_label": {
            lab: {"precision": s[0], "recall": s[1], "f1": s[2]} for lab, s in per_label.items()
        },
    }
