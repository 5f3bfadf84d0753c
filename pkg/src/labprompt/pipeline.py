"""End-to-end desk-scale runs shared by the CLI and the study harnesses:
cohort -> captions -> pretraining -> retrieval probe -> frozen-LM
downstream fine-tuning -> diagnosis metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import alignment, diagnosis, trainer
from .corpus import (
    CohortConfig,
    PatientRecord,
    Vocabulary,
    generate_synthetic_cohort,
    load_phenotype_vocabulary,
    normalize_note,
)
from .lm import TinyCausalLM
from .model import AlignmentModel, ModelConfig, freeze
from .objectives import similarity_matrices
from .trainer import TensorizedCorpus, TrainConfig, attach_captions, tensorize_records


ARMS = ("full", "wo_lab", "wo_anomaly", "wo_contrast", "wo_match", "wo_gen")


def desk_model_config(vocab_size: int, cohort: CohortConfig, n_prompts: int = 24) -> ModelConfig:
    return ModelConfig(
        d_model=64,
        n_prompts=n_prompts,
        patch_len=8,
        max_len=cohort.series_len,
        n_layers=2,
        n_heads=4,
        vocab_size=vocab_size,
        n_variables=cohort.n_variables,
        downstream_hidden=64,
        lm_dim=64,
    )


def desk_train_config(seed: int, **overrides) -> TrainConfig:
    # lr scaled x100 from the reference 1e-5 for desk-scale convergence
    defaults = dict(learning_rate=1e-3, max_steps=1500, batch_size=8, seed=seed,
                    augment_resample=True)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def build_vocabulary(records: Sequence[PatientRecord], vocabulary: Sequence[str]) -> Vocabulary:
    """Shared token vocabulary over notes, captions, labels, and template text."""
    texts = [normalize_note(r.note.text) for r in records]
    texts += [r.caption if isinstance(r.caption, str) else r.caption.text
              for r in records if r.caption is not None]
    texts += list(vocabulary)
    texts += [
        diagnosis.INSTRUCTION_TEXT,
        diagnosis.CAPTION_SECTION_TEXT,
        diagnosis.ANSWER_PREFIX_TEXT,
        ", .",
    ]
    return Vocabulary.build(texts)


@dataclass
class StudySetup:
    """Fixed data + vocabulary shared across arms and seeds of one study."""

    cohort: CohortConfig
    train_records: list[PatientRecord]
    test_records: list[PatientRecord]
    vocab: Vocabulary
    model_config: ModelConfig
    phenotypes: list[str]
    train_corpus: TensorizedCorpus
    test_corpus: TensorizedCorpus


def prepare_study(
    cohort_seed: int = 7,
    cohort: CohortConfig | None = None,
    n_prompts: int = 24,
) -> StudySetup:
    """Train cohort plus a disjoint same-distribution test cohort; ranges and
    captions fit on training data only."""
    cohort = cohort or CohortConfig()
    phenotypes = load_phenotype_vocabulary()
    train_records, _ = generate_synthetic_cohort(cohort_seed, config=cohort, vocabulary=phenotypes)
    test_records, _ = generate_synthetic_cohort(cohort_seed + 1, config=cohort, vocabulary=phenotypes)
    mc_probe = ModelConfig(
        vocab_size=64, max_len=cohort.series_len, n_variables=cohort.n_variables,
        n_prompts=n_prompts,
    )
    ranges = attach_captions(train_records, config=mc_probe)
    attach_captions(test_records, ranges=ranges, config=mc_probe)
    vocab = build_vocabulary(train_records, phenotypes)
    model_config = desk_model_config(len(vocab), cohort, n_prompts=n_prompts)
    return StudySetup(
        cohort=cohort,
        train_records=train_records,
        test_records=test_records,
        vocab=vocab,
        model_config=model_config,
        phenotypes=phenotypes,
        train_corpus=tensorize_records(train_records, vocab, model_config),
        test_corpus=tensorize_records(test_records, vocab, model_config),
    )


def pretrain_arm(setup: StudySetup, config: TrainConfig, out_dir=None) -> AlignmentModel:
    torch.manual_seed(config.seed)
    model = AlignmentModel(setup.model_config)
    trainer.pretrain(setup.train_corpus, model, config, out_dir=out_dir,
                     extra_meta={"vocab": setup.vocab.to_json(),
                                 "model_config": setup.model_config.to_dict()})
    return model


@torch.no_grad()
def retrieval_recall_at_1(
    model: AlignmentModel, corpus: TensorizedCorpus, fuse_caption: bool = True
) -> float:
    """Text -> time-series recall@1 over the whole corpus as the gallery."""
    model.eval()
    notes, caps, patches, patch_pad = trainer.batch_tensors(corpus, range(len(corpus)))
    prompts = alignment.compute_prompt_embeddings(model, patches, patch_pad)
    e_m, m_mask, e_c, c_mask = alignment.encode_texts(model, notes, caps)
    if fuse_caption:
        e_f = alignment.fuse_text(e_m, m_mask, e_c, c_mask)
    else:
        e_f = alignment.fuse_text(e_m, m_mask, e_m[:, :0], m_mask[:, :0])
    g_f2x, _ = similarity_matrices(e_f, prompts)
    hits = (g_f2x.argmax(dim=1) == torch.arange(len(corpus))).float().mean()
    model.train()
    return float(hits)


def pretrain_frozen_lm(
    setup: StudySetup,
    steps: int = 1500,
    seed: int = 0,
    lr: float = 1e-3,
) -> TinyCausalLM:
    """Fixture recipe: teach a tiny decoder the instruction/diagnosis grammar
    on the training cohort, then freeze it."""
    torch.manual_seed(seed + 91)
    lm = TinyCausalLM(setup.model_config)
    examples = []
    for i, record in enumerate(setup.train_records):
        examples.append(
            {
                "note_ids": setup.train_corpus.note_ids[i],
                "caption_ids": setup.train_corpus.caption_ids[i],
                "answer_ids": diagnosis.answer_token_ids(
                    setup.vocab, record.labels, setup.phenotypes
                ),
            }
        )
    diagnosis.pretrain_lm(lm, setup.vocab, examples, steps=steps, lr=lr, seed=seed)
    freeze(lm)
    lm.eval()
    return lm


@dataclass
class DownstreamResult:
    metrics: dict
    predictions: list[diagnosis.DiagnosisPrediction] = field(default_factory=list)


def run_downstream(
    setup: StudySetup,
    model: AlignmentModel,
    lm: TinyCausalLM,
    seed: int,
    use_prefix: bool = True,
    finetune_steps: int = 800,
    tune_alignment: bool = True,
) -> DownstreamResult:
    """Fine-tune projection (+ alignment stack) against the frozen LM, then
    score greedy diagnoses on the test cohort."""
    torch.manual_seed(seed + 17)
    proj = diagnosis.PromptProjection(setup.model_config.d_model, setup.model_config.lm_dim)
    train_examples = diagnosis.build_examples(
        setup.train_corpus, setup.train_records, setup.vocab, setup.phenotypes
    )
    if use_prefix:
        config = TrainConfig(learning_rate=1e-3, max_steps=finetune_steps, batch_size=8, seed=seed)
        diagnosis.finetune_downstream(
            model, proj, lm, setup.train_corpus, train_examples, config,
            use_prefix=True, tune_alignment=tune_alignment,
        )
    test_examples = diagnosis.build_examples(
        setup.test_corpus, setup.test_records, setup.vocab, setup.phenotypes
    )
    model.eval()
    preds = [
        diagnosis.diagnose(
            model, proj, lm, setup.test_corpus, ex, i, setup.vocab, setup.phenotypes,
            use_prefix=use_prefix,
        )
        for i, ex in enumerate(test_examples)
    ]
    model.train()
    golds = [r.labels for r in setup.test_records]
    metrics = diagnosis.evaluate([p.parsed for p in preds], golds)
    return DownstreamResult(metrics=metrics, predictions=preds)


def arm_train_config(arm: str, seed: int, weights_ratio: str = "1:1:1", **overrides) -> TrainConfig:
    from .objectives import LossWeights

    w = LossWeights.from_ratio(weights_ratio)
    kw = dict(alpha=w.alpha, beta=w.beta, gamma=w.gamma)
    if arm == "wo_contrast":
        kw["alpha"] = 0.0
    elif arm == "wo_match":
        kw["beta"] = 0.0
    elif arm == "wo_gen":
        kw["gamma"] = 0.0
    elif arm == "wo_anomaly":
        kw["fuse_caption"] = False
    kw.update(overrides)
    return desk_train_config(seed, **kw)


def run_arm(
    setup: StudySetup,
    arm: str,
    seed: int,
    lm: TinyCausalLM,
    pretrain_steps: int = 1500,
    finetune_steps: int = 800,
    weights_ratio: str = "1:1:1",
) -> dict:
    """One (arm, seed) row: retrieval recall plus the six downstream scores."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    if arm == "wo_lab":
        # notes-only: no soft prefix, nothing tunable downstream
        ds = run_downstream(setup, AlignmentModel(setup.model_config), lm, seed, use_prefix=False)
        recall = float("nan")
    else:
        config = arm_train_config(arm, seed, weights_ratio, max_steps=pretrain_steps)
        model = pretrain_arm(setup, config)
        recall = retrieval_recall_at_1(
            model, setup.test_corpus, fuse_caption=config.fuse_caption
        )
        ds = run_downstream(setup, model, lm, seed, finetune_steps=finetune_steps)
    row = {"arm": arm, "seed": seed, "recall_at_1": recall}
    for scope in ("micro", "macro"):
        for metric in ("precision", "recall", "f1"):
            row[f"{scope}_{metric}"] = ds.metrics[scope][metric]
    return row
