"""Pretraining loop: batch assembly, the three-loss objective, AdamW with
linear warmup and decoupled weight decay, checkpointing, and a
finite-difference gradient checker.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import alignment, checkpoint, objectives
from .captions import detect_anomalies, fit_reference_ranges, render_caption
from .corpus import (
    PAD_ID,
    PatientRecord,
    Vocabulary,
    normalize_note,
    load_stopwords,
    parse_kv_config,
    patch_pad_mask,
    patchify,
    preprocess_series,
)
from .model import AlignmentModel, ModelConfig
from .objectives import LossBreakdown, LossWeights


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.05
    warmup_fraction: float = 0.10
    batch_size: int = 8
    max_steps: int = 2000
    seed: int = 0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    temperature: float = 1.0
    clip_norm: float = 1.0
    fuse_caption: bool = True  # False = the "without anomaly captions" arm
    checkpoint_every: int = 0  # 0 = final checkpoint only
    augment_noise: float = 0.0  # stddev of per-step noise on lab patches
    augment_resample: bool = False  # per-step redraw of in-range readings

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise TrainingError("warmup_fraction must be in [0, 1)")
        if self.batch_size < 2:
            raise TrainingError("hard-negative mining needs batch_size >= 2")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls(**parse_kv_config(path, cls))


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over named parameters."""

    def __init__(
        self,
        named_params: dict[str, torch.nn.Parameter],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = {n: p for n, p in named_params.items() if p.requires_grad}
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}

    @torch.no_grad()
    def step(self, lr_scale: float = 1.0) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1 - b1**self.step_count
        bias2 = 1 - b2**self.step_count
        lr = self.lr * lr_scale
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            p.mul_(1 - lr * self.weight_decay)
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m.mul_(b1).add_(grad, alpha=1 - b1)
            v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
            p.addcdiv_(m / bias1, (v / bias2).sqrt().add_(self.eps), value=-lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, tuple[np.ndarray, bool]]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = (self.exp_avg[name].cpu().numpy(), False)
            out[f"opt.v.{name}"] = (self.exp_avg_sq[name].cpu().numpy(), False)
        return out

    def load_state_tensors(self, tensors: dict[str, tuple[np.ndarray, bool]]) -> None:
        for name in self.params:
            self.exp_avg[name] = torch.from_numpy(tensors[f"opt.m.{name}"][0].copy())
            self.exp_avg_sq[name] = torch.from_numpy(tensors[f"opt.v.{name}"][0].copy())


def warmup_scale(step: int, max_steps: int, warmup_fraction: float) -> float:
    """Linear ramp from 0 over the first warmup_fraction of steps, then constant."""
    warmup_steps = int(round(max_steps * warmup_fraction))
    if warmup_steps <= 0 or step > warmup_steps:
        return 1.0
    return step / warmup_steps


# ---------------------------------------------------------------------------
# record tensorization


@dataclass
class TensorizedCorpus:
    patient_ids: list[str]
    note_ids: list[list[int]]
    caption_ids: list[list[int]]
    patches: torch.Tensor  # (n, P, patch_len, N_x) float32
    patch_pad: torch.Tensor  # (n, P) bool
    normal_mask: torch.Tensor | None = None  # (n, P, patch_len, N_x) bool, True = in-range reading

    def __len__(self) -> int:
        return len(self.patient_ids)


def attach_captions(records: Sequence[PatientRecord], ranges=None, config: ModelConfig | None = None):
    """Fit ranges on the records (unless supplied) and caption each one in place."""
    target_len = config.max_len if config else 1000
    patch_len = config.patch_len if config else 8
    processed = [preprocess_series(r.labs, target_len, patch_len) for r in records]
    if ranges is None:
        ranges = fit_reference_ranges(processed)
    for record, series in zip(records, processed):
        record.caption = render_caption(detect_anomalies(series, ranges))
    return ranges


def _robust_scale(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Center and scale each channel by its own median and IQR.

    Keeps encoder inputs at unit scale regardless of the lab's measurement
    units, without sharing statistics between records. Also returns a mask of
    in-range readings (within the record's own Tukey fences), which the
    trainer may resample as augmentation.
    """
    flat = patches.reshape(-1, patches.shape[-1])
    q1, med, q3 = np.quantile(flat, [0.25, 0.5, 0.75], axis=0)
    scale = np.maximum(q3 - q1, 1e-6)
    scaled = (patches - med) / scale
    lo, hi = q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)
    normal = (patches > lo) & (patches < hi)
    return scaled, normal


def tensorize_records(
    records: Sequence[PatientRecord],
    vocab: Vocabulary,
    config: ModelConfig,
    require_captions: bool = True,
) -> TensorizedCorpus:
    stop = load_stopwords()
    note_ids, caption_ids, all_patches, all_pad, all_normal = [], [], [], [], []
    for record in records:
        if record.caption is None and require_captions:
            raise TrainingError(f"{record.patient_id}: record has no caption; run the captioner first")
        if record.caption is None:
            cap_text = ""
        else:
            cap_text = record.caption if isinstance(record.caption, str) else record.caption.text
        note_ids.append(vocab.encode(normalize_note(record.note.text, stop)))
        caption_ids.append(vocab.encode(cap_text))
        series = preprocess_series(record.labs, config.max_len, config.patch_len)
        scaled, normal = _robust_scale(patchify(series, config.patch_len))
        all_patches.append(scaled)
        all_normal.append(normal)
        all_pad.append(patch_pad_mask(series, config.patch_len))
    return TensorizedCorpus(
        patient_ids=[r.patient_id for r in records],
        note_ids=note_ids,
        caption_ids=caption_ids,
        patches=torch.from_numpy(np.stack(all_patches)).float(),
        patch_pad=torch.from_numpy(np.stack(all_pad)),
        normal_mask=torch.from_numpy(np.stack(all_normal)),
    )


def pad_id_batch(seqs: list[list[int]]) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def batch_tensors(corpus: TensorizedCorpus, indices: Sequence[int]):
    notes = pad_id_batch([corpus.note_ids[i] for i in indices])
    caps = pad_id_batch([corpus.caption_ids[i] for i in indices])
    idx = torch.tensor(list(indices), dtype=torch.long)
    return notes, caps, corpus.patches[idx], corpus.patch_pad[idx]


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded shuffle per epoch; a trailing batch smaller than 2 is dropped."""
    rng = np.random.default_rng((seed + 1) * 1_000_003 + epoch)
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size].tolist() for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


# ---------------------------------------------------------------------------
# loss evaluation and training


def evaluate_batch_losses(
    model: AlignmentModel,
    notes: torch.Tensor,
    caps: torch.Tensor,
    patches: torch.Tensor,
    patch_pad: torch.Tensor,
    weights: LossWeights,
    temperature: float = 1.0,
    fuse_caption: bool = True,
):
    """Forward pass producing (total tensor, LossBreakdown)."""
    prompts = alignment.compute_prompt_embeddings(model, patches, patch_pad)
    e_m, m_mask, e_c, c_mask = alignment.encode_texts(model, notes, caps)
    if fuse_caption:
        e_f = alignment.fuse_text(e_m, m_mask, e_c, c_mask)
    else:
        e_f = alignment.fuse_text(e_m, m_mask, e_m[:, :0], m_mask[:, :0])
    g_f2x, g_x2f = objectives.similarity_matrices(e_f, prompts)
    zero = torch.zeros((), dtype=patches.dtype)
    contrast = (
        objectives.contrastive_loss(g_f2x, g_x2f, temperature=temperature)
        if weights.alpha > 0
        else zero
    )
    if weights.beta > 0:
        pairs = objectives.mine_hard_negatives(g_f2x, g_x2f)
        match = objectives.matching_loss(model, caps, patches, patch_pad, pairs)
    else:
        match = zero
    gen = objectives.generation_loss(model, caps, prompts) if weights.gamma > 0 else zero
    total = objectives.total_loss(contrast, match, gen, weights)
    breakdown = LossBreakdown(
        float(contrast.detach()), float(match.detach()), float(gen.detach()), float(total.detach())
    )
    return total, breakdown


def pretrain(
    corpus: TensorizedCorpus,
    model: AlignmentModel,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    optimizer: AdamW | None = None,
    start_step: int = 0,
    extra_meta: dict | None = None,
) -> tuple[list[dict], AdamW]:
    """Minimize the weighted three-loss objective; deterministic given the seed."""
    weights = config.loss_weights()
    if optimizer is None:
        optimizer = AdamW(
            dict(model.named_parameters()), config.learning_rate, config.weight_decay
        )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    per_epoch = epoch_batches(len(corpus), config.batch_size, config.seed, 0)
    if not per_epoch:
        raise TrainingError("corpus too small to form a batch of 2")
    batches_per_epoch = len(per_epoch)

    for step in range(start_step + 1, config.max_steps + 1):
        # key all per-step stochasticity (e.g. dropout) to the step number so
        # a resumed run replays the identical random stream
        torch.manual_seed((config.seed + 1) * 999_983 + step)
        epoch, pos = divmod(step - 1, batches_per_epoch)
        batch = epoch_batches(len(corpus), config.batch_size, config.seed, epoch)[pos]
        notes, caps, patches, patch_pad = batch_tensors(corpus, batch)
        if config.augment_resample or config.augment_noise > 0:
            # perturbations keyed to the step, not a shared RNG stream, so
            # resumed runs see the exact same augmented views
            gen = torch.Generator().manual_seed((config.seed + 1) * 7_654_321 + step)
            if config.augment_resample and corpus.normal_mask is not None:
                # redraw in-range readings from a unit uniform: out-of-range
                # structure is the only stable signal across views
                normal = corpus.normal_mask[torch.tensor(list(batch))]
                fresh = torch.rand(patches.shape, generator=gen) * 2.0 - 1.0
                patches = torch.where(normal, fresh, patches)
            if config.augment_noise > 0:
                patches = patches + config.augment_noise * torch.randn(
                    patches.shape, generator=gen
                )
        total, parts = evaluate_batch_losses(
            model, notes, caps, patches, patch_pad, weights,
            temperature=config.temperature, fuse_caption=config.fuse_caption,
        )
        if not torch.isfinite(total):
            dump = {"step": step, "patients": [corpus.patient_ids[i] for i in batch],
                    "losses": vars(parts)}
            if out_dir is not None:
                (out_dir / "diverged_batch.json").write_text(repr(dump))
            raise TrainingError(f"non-finite loss at step {step}: {dump}")
        optimizer.zero_grad()
        total.backward()
        if config.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for p in optimizer.params.values()], config.clip_norm
            )
        optimizer.step(lr_scale=warmup_scale(step, config.max_steps, config.warmup_fraction))
        metrics.append(
            {"step": step, "contrast": parts.contrast, "match": parts.match,
             "gen": parts.gen, "total": parts.total}
        )
        if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(model, optimizer, step, out_dir / f"step-{step:06d}.pmts",
                            config, extra_meta)

    if out_dir is not None:
        write_metrics_csv(metrics, out_dir / "metrics.csv")
        save_checkpoint(model, optimizer, config.max_steps, out_dir / "final.pmts",
                        config, extra_meta)
    return metrics, optimizer


def write_metrics_csv(metrics: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "contrast", "match", "gen", "total"])
        writer.writeheader()
        writer.writerows(metrics)


def save_checkpoint(
    model: torch.nn.Module,
    optimizer: AdamW | None,
    step: int,
    path: str | Path,
    config: TrainConfig | None = None,
    extra_meta: dict | None = None,
) -> None:
    tensors = checkpoint.module_tensors(model)
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    meta = {"step": step, "opt_step": optimizer.step_count if optimizer else 0}
    if config is not None:
        meta["train_config"] = {f.name: getattr(config, f.name) for f in fields(config)}
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save_container(path, tensors, meta)


def load_checkpoint(path: str | Path, model: torch.nn.Module, config: TrainConfig | None = None):
    """Restore parameters and optimizer state; returns (optimizer | None, meta)."""
    tensors, meta = checkpoint.load_container(path)
    model_tensors = {n: t for n, t in tensors.items() if not n.startswith("opt.")}
    checkpoint.load_into_module(model, model_tensors)
    optimizer = None
    if any(n.startswith("opt.") for n in tensors):
        cfg = config
        if cfg is None and "train_config" in meta:
            cfg = TrainConfig(**meta["train_config"])
        if cfg is not None:
            optimizer = AdamW(dict(model.named_parameters()), cfg.learning_rate, cfg.weight_decay)
            optimizer.load_state_tensors(tensors)
            optimizer.step_count = meta.get("opt_step", meta.get("step", 0))
    return optimizer, meta


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(model: torch.nn.Module, loss_fn, eps: float = 1e-4) -> dict[str, float]:
    """Max relative error between analytic and central finite-difference
    gradients for every non-frozen parameter. Model should be float64.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    loss.backward()
    analytic = {
        n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
        if p.requires_grad
    }
    report = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            flat = p.view(-1)
            grad = analytic[name].view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn(model))
                flat[i] = orig - eps
                lo = float(loss_fn(model))
                flat[i] = orig
                fd = (hi - lo) / (2 * eps)
                a = float(grad[i])
                # below 1e-2 the comparison is effectively absolute: the
                # h^2 truncation error of the central stencil dominates the
                # ratio for tiny gradients, while a real gradient bug still
                # shows up orders of magnitude above the bound
                err = abs(a - fd) / max(abs(a) + abs(fd), 1e-2)
                worst = max(worst, err)
            report[name] = worst
    return report


def tiny_gradcheck_model(seed: int = 0, dtype=torch.float64) -> tuple[AlignmentModel, dict]:
    """A D=8, N_p=2 model plus a fixed B=2 batch for gradient verification."""
    torch.manual_seed(seed)
    config = ModelConfig(
        d_model=8, n_prompts=2, patch_len=4, max_len=8, n_layers=1, n_heads=2,
        vocab_size=12, n_variables=2, downstream_hidden=8, max_tokens=16,
    )
    model = AlignmentModel(config).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    batch = {
        "notes": torch.tensor([[1, 4, 5, 2], [1, 6, 7, 2]]),
        "caps": torch.tensor([[1, 8, 9, 2, 0], [1, 10, 11, 4, 2]]),
        "patches": torch.randn(2, 2, 4, 2, generator=gen, dtype=dtype),
        "patch_pad": torch.tensor([[False, False], [False, True]]),
    }
    return model, batch


def gradcheck_report(eps: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Worst finite-difference relative error for each of the three losses."""
    results = {}
    for name, weights in [
        ("contrast", LossWeights(1, 0, 0)),
        ("match", LossWeights(0, 1, 0)),
        ("gen", LossWeights(0, 0, 1)),
    ]:
        model, batch = tiny_gradcheck_model(seed=seed)

        def loss_fn(m, _w=weights):
            total, _ = evaluate_batch_losses(
                m, batch["notes"], batch["caps"], batch["patches"], batch["patch_pad"], _w
            )
            return total

        report = grad_check(model, loss_fn, eps=eps)
        results[name] = max(report.values())
    return results
