"""Command-line entry point wiring the full pipeline into reproducible
commands, plus the ablation and sensitivity study runners.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np
import torch

from . import alignment, checkpoint, diagnosis, pipeline, reports, trainer
from .captions import ReferenceRanges, caption_records_jsonl, save_captions
from .corpus import (
    CohortConfig,
    Vocabulary,
    generate_synthetic_cohort,
    load_phenotype_vocabulary,
    load_records,
    parse_kv_config,
    preprocess_series,
    save_records,
)
from .manifest import RunManifest
from .model import AlignmentModel, ModelConfig, freeze
from .objectives import LossWeights
from .trainer import TrainConfig, gradcheck_report, tensorize_records


class PipelineFailure(click.ClickException):
    exit_code = 1


def _guard(fn):
    """Map pipeline errors to exit code 1 with a structured message."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:
            raise PipelineFailure(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


def _split_run_config(path) -> tuple[dict, dict]:
    """Route run.cfg keys between TrainConfig and ModelConfig fields."""
    train_keys = set(TrainConfig.__dataclass_fields__)
    model_keys = set(ModelConfig.__dataclass_fields__)

    class _Merged:
        __dataclass_fields__ = {
            **TrainConfig.__dataclass_fields__,
            **ModelConfig.__dataclass_fields__,
        }

    merged = parse_kv_config(path, _Merged)
    return (
        {k: v for k, v in merged.items() if k in train_keys},
        {k: v for k, v in merged.items() if k in model_keys},
    )


def _auto_target_len(records, patch_len: int, requested: int) -> int:
    if requested > 0:
        return requested
    longest = max(r.labs.length for r in records)
    return ((longest + patch_len - 1) // patch_len) * patch_len


@click.group()
def main():
    """Lab time-series prompt alignment and diagnosis toolkit."""


@main.command("gen-data")
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--n-patients", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guard
def gen_data(seed, n_patients, config_path, out_dir):
    """Generate a synthetic cohort and write train/test JSONL splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cohort = CohortConfig.from_file(config_path) if config_path else CohortConfig()
    manifest = RunManifest(
        out / "gen-data.manifest.json", "gen-data",
        {"cohort": vars(cohort), "n_patients": n_patients}, seed,
        inputs={"config": config_path} if config_path else None,
    )
    records, split = generate_synthetic_cohort(seed, n_patients=n_patients, config=cohort)
    by_id = {r.patient_id: r for r in records}
    save_records([by_id[i] for i in split["train"]], out / "train.jsonl")
    save_records([by_id[i] for i in split["test"]], out / "test.jsonl")
    manifest.finish(outputs={"train": out / "train.jsonl", "test": out / "test.jsonl"})
    click.echo(f"wrote {len(split['train'])} train / {len(split['test'])} test records to {out}")


@main.command("caption")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--ranges", "ranges_path", type=click.Path(), default=None,
              help="Ranges TSV; used if it exists, otherwise fit and written here.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--target-len", type=int, default=0, help="0 = round max length up to a patch multiple")
@click.option("--patch-len", type=int, default=8, show_default=True)
@_guard
def caption_cmd(in_path, ranges_path, out_path, target_len, patch_len):
    """Detect anomalies against reference ranges and render captions."""
    records = load_records(in_path)
    target_len = _auto_target_len(records, patch_len, target_len)
    manifest = RunManifest(
        Path(out_path).with_suffix(".manifest.json"), "caption",
        {"target_len": target_len, "patch_len": patch_len}, None, inputs={"records": in_path},
    )
    prep = lambda s: preprocess_series(s, target_len, patch_len)
    if ranges_path and Path(ranges_path).exists():
        ranges = ReferenceRanges.load_tsv(ranges_path)
    else:
        from .captions import fit_reference_ranges

        ranges = fit_reference_ranges(prep(r.labs) for r in records)
        if ranges_path:
            ranges.save_tsv(ranges_path)
    rows = caption_records_jsonl(records, ranges, prep)
    save_captions(rows, out_path)
    manifest.finish(outputs={"captions": out_path})
    click.echo(f"captioned {len(rows)} records -> {out_path}")


def _attach_caption_file(records, captions_path):
    by_id = {}
    with open(captions_path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                by_id[row["patient_id"]] = row["caption"]
    for record in records:
        if record.caption is None:
            record.caption = by_id.get(record.patient_id)


@main.command("pretrain")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--captions", "captions_path", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guard
def pretrain_cmd(data_path, captions_path, config_path, out_dir):
    """Run the three-loss alignment pretraining and write checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_records(data_path)
    if captions_path:
        _attach_caption_file(records, captions_path)
    if any(r.caption is None for r in records):
        raise PipelineFailure("records lack captions; run `labprompt caption` first")
    train_kv, model_kv = _split_run_config(config_path) if config_path else ({}, {})
    phenotypes = load_phenotype_vocabulary()
    vocab = pipeline.build_vocabulary(records, phenotypes)
    model_kv.setdefault("vocab_size", len(vocab))
    model_kv.setdefault("max_len", _auto_target_len(records, model_kv.get("patch_len", 8), 0))
    model_kv.setdefault("n_variables", records[0].labs.n_variables)
    mconfig = ModelConfig(**model_kv)
    tconfig = TrainConfig(**train_kv)
    inputs = {"data": data_path}
    if captions_path:
        inputs["captions"] = captions_path
    if config_path:
        inputs["config"] = config_path
    manifest = RunManifest(out / "pretrain.manifest.json", "pretrain",
                           {"train": vars(tconfig), "model": mconfig.to_dict()},
                           tconfig.seed, inputs=inputs)
    torch.manual_seed(tconfig.seed)
    model = AlignmentModel(mconfig)
    corpus = tensorize_records(records, vocab, mconfig)
    metrics, _ = trainer.pretrain(
        corpus, model, tconfig, out_dir=out,
        extra_meta={"vocab": vocab.to_json(), "model_config": mconfig.to_dict()},
    )
    reports.render_loss_curve(metrics, out / "loss_curve.png")
    manifest.finish(outputs={"checkpoint": out / "final.pmts", "metrics": out / "metrics.csv"})
    click.echo(f"final total loss {metrics[-1]['total']:.4f} after {len(metrics)} steps -> {out}")


def _load_alignment_checkpoint(path):
    tensors, meta = checkpoint.load_container(path)
    vocab = Vocabulary.from_json(meta["vocab"])
    mconfig = ModelConfig(**meta["model_config"])
    model = AlignmentModel(mconfig)
    model_tensors = {
        n.removeprefix("align."): t
        for n, t in tensors.items()
        if not n.startswith(("opt.", "proj.", "lm."))
    }
    checkpoint.load_into_module(model, model_tensors)
    return model, vocab, mconfig, tensors, meta


@main.command("embed")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@_guard
def embed_cmd(ckpt_path, in_path, out_path):
    """Dump per-patient prompt embeddings in the checkpoint container format."""
    model, vocab, mconfig, _, _ = _load_alignment_checkpoint(ckpt_path)
    records = load_records(in_path)
    manifest = RunManifest(Path(out_path).with_suffix(".manifest.json"), "embed", {}, None,
                           inputs={"checkpoint": ckpt_path, "records": in_path})
    corpus = tensorize_records(records, vocab, mconfig, require_captions=False)
    model.eval()
    with torch.no_grad():
        prompts = alignment.compute_prompt_embeddings(model, corpus.patches, corpus.patch_pad)
    tensors = {
        pid: (prompts[i].numpy(), False) for i, pid in enumerate(corpus.patient_ids)
    }
    checkpoint.save_container(out_path, tensors, meta={"patients": corpus.patient_ids})
    manifest.finish(outputs={"prompts": out_path})
    click.echo(f"wrote prompt embeddings for {len(records)} patients -> {out_path}")


@main.command("finetune")
@click.option("--data", "data_path", type=click.Path(exists=True), required=True)
@click.option("--captions", "captions_path", type=click.Path(exists=True), default=None)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--lm", "lm_path", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--projection-only", is_flag=True, help="Freeze the alignment stack too.")
@_guard
def finetune_cmd(data_path, captions_path, ckpt_path, lm_path, config_path, out_dir, projection_only):
    """Fine-tune the prompt projection (and alignment stack) against the frozen LM."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, vocab, mconfig, _, _ = _load_alignment_checkpoint(ckpt_path)
    lm = _load_lm(lm_path, mconfig)
    records = load_records(data_path)
    if captions_path:
        _attach_caption_file(records, captions_path)
    train_kv, _ = _split_run_config(config_path) if config_path else ({}, {})
    train_kv.setdefault("learning_rate", 1e-3)
    train_kv.setdefault("max_steps", 800)
    tconfig = TrainConfig(**train_kv)
    manifest = RunManifest(out / "finetune.manifest.json", "finetune",
                           {"train": vars(tconfig), "projection_only": projection_only},
                           tconfig.seed,
                           inputs={"data": data_path, "ckpt": ckpt_path, "lm": lm_path})
    phenotypes = load_phenotype_vocabulary()
    corpus = tensorize_records(records, vocab, mconfig, require_captions=False)
    examples = diagnosis.build_examples(corpus, records, vocab, phenotypes)
    torch.manual_seed(tconfig.seed)
    proj = diagnosis.PromptProjection(mconfig.d_model, mconfig.lm_dim)
    losses = diagnosis.finetune_downstream(
        model, proj, lm, corpus, examples, tconfig,
        tune_alignment=not projection_only,
    )
    tensors = {f"align.{n}": t for n, t in checkpoint.module_tensors(model).items()}
    tensors.update({f"proj.{n}": t for n, t in checkpoint.module_tensors(proj).items()})
    checkpoint.save_container(
        out / "finetuned.pmts", tensors,
        meta={"vocab": vocab.to_json(), "model_config": mconfig.to_dict(),
              "final_loss": losses[-1]},
    )
    manifest.finish(outputs={"checkpoint": out / "finetuned.pmts"})
    click.echo(f"final fine-tuning loss {losses[-1]:.4f} -> {out / 'finetuned.pmts'}")


def _load_lm(lm_path, mconfig) -> "object":
    from .lm import TinyCausalLM

    tensors, meta = checkpoint.load_container(lm_path)
    lm_config = ModelConfig(**meta["model_config"]) if "model_config" in meta else mconfig
    lm = TinyCausalLM(lm_config, max_positions=meta.get("max_positions", 384))
    checkpoint.load_into_module(lm, tensors)
    freeze(lm)
    lm.eval()
    return lm


@main.command("diagnose")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True,
              help="Fine-tuned checkpoint (alignment + projection).")
@click.option("--lm", "lm_path", type=click.Path(exists=True), required=True)
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--no-prefix", is_flag=True, help="Notes-only ablation input.")
@_guard
def diagnose_cmd(ckpt_path, lm_path, in_path, out_path, no_prefix):
    """Greedy-decode diagnoses for each record and write prediction JSONL."""
    tensors, meta = checkpoint.load_container(ckpt_path)
    vocab = Vocabulary.from_json(meta["vocab"])
    mconfig = ModelConfig(**meta["model_config"])
    model = AlignmentModel(mconfig)
    checkpoint.load_into_module(
        model, {n.removeprefix("align."): t for n, t in tensors.items() if n.startswith("align.")}
    )
    proj = diagnosis.PromptProjection(mconfig.d_model, mconfig.lm_dim)
    proj_tensors = {n.removeprefix("proj."): t for n, t in tensors.items() if n.startswith("proj.")}
    if proj_tensors:
        checkpoint.load_into_module(proj, proj_tensors)
    lm = _load_lm(lm_path, mconfig)
    records = load_records(in_path)
    manifest = RunManifest(Path(out_path).with_suffix(".manifest.json"), "diagnose",
                           {"no_prefix": no_prefix}, None,
                           inputs={"ckpt": ckpt_path, "lm": lm_path, "records": in_path})
    phenotypes = load_phenotype_vocabulary()
    corpus = tensorize_records(records, vocab, mconfig, require_captions=False)
    examples = diagnosis.build_examples(corpus, records, vocab, phenotypes)
    model.eval()
    with open(out_path, "w") as fh:
        for i, ex in enumerate(examples):
            pred = diagnosis.diagnose(
                model, proj, lm, corpus, ex, i, vocab, phenotypes, use_prefix=not no_prefix
            )
            fh.write(json.dumps({"patient_id": pred.patient_id, "raw": pred.raw_text,
                                 "labels": sorted(pred.parsed.labels)}) + "\n")
    manifest.finish(outputs={"predictions": out_path})
    click.echo(f"diagnosed {len(examples)} records -> {out_path}")


@main.command("eval")
@click.option("--pred", "pred_path", type=click.Path(exists=True), required=True)
@click.option("--gold", "gold_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@_guard
def eval_cmd(pred_path, gold_path, out_path):
    """Score predictions: micro/macro P/R/F1 plus per-label breakdown."""
    preds = {}
    with open(pred_path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                preds[row["patient_id"]] = frozenset(row["labels"])
    golds = load_records(gold_path)
    manifest = RunManifest(Path(out_path).with_suffix(".manifest.json"), "eval", {}, None,
                           inputs={"pred": pred_path, "gold": gold_path})
    pred_sets = [preds.get(r.patient_id, frozenset()) for r in golds]
    report = diagnosis.evaluate(pred_sets, [r.labels for r in golds])
    Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    manifest.finish(outputs={"report": out_path})
    click.echo(json.dumps({"micro": report["micro"], "macro": report["macro"]}, indent=2))


@main.command("gradcheck")
@click.option("--eps", type=float, default=1e-4, show_default=True)
@_guard
def gradcheck_cmd(eps):
    """Verify analytic gradients of the three losses against finite differences."""
    results = gradcheck_report(eps=eps)
    ok = True
    for name, err in results.items():
        status = "PASS" if err < 1e-3 else "FAIL"
        ok = ok and err < 1e-3
        click.echo(f"{name:10s} max relative error {err:.3e}  [{status}]")
    if not ok:
        raise PipelineFailure("gradient check failed")


def _study_options(fn):
    fn = click.option("--workdir", type=click.Path(), required=True)(fn)
    fn = click.option("--seeds", default="1,2,3", show_default=True)(fn)
    fn = click.option("--cohort-seed", type=int, default=7, show_default=True)(fn)
    fn = click.option("--pretrain-steps", type=int, default=1500, show_default=True)(fn)
    fn = click.option("--finetune-steps", type=int, default=800, show_default=True)(fn)
    return fn


@main.command("ablate")
@_study_options
@_guard
def ablate_cmd(workdir, seeds, cohort_seed, pretrain_steps, finetune_steps):
    """Run the six study arms per seed and report all metrics."""
    out = Path(workdir)
    out.mkdir(parents=True, exist_ok=True)
    seed_list = [int(s) for s in seeds.split(",")]
    manifest = RunManifest(out / "ablate.manifest.json", "ablate",
                           {"seeds": seed_list, "pretrain_steps": pretrain_steps,
                            "finetune_steps": finetune_steps}, cohort_seed)
    setup = pipeline.prepare_study(cohort_seed=cohort_seed)
    lm = pipeline.pretrain_frozen_lm(setup)
    rows = []
    for arm in pipeline.ARMS:
        for seed in seed_list:
            row = pipeline.run_arm(setup, arm, seed, lm,
                                   pretrain_steps=pretrain_steps,
                                   finetune_steps=finetune_steps)
            rows.append(row)
            click.echo(f"{arm} seed={seed}: micro F1 {row['micro_f1']:.3f}")
    reports.write_rows_csv(rows, out / "ablation.csv")
    (out / "ablation.txt").write_text(reports.format_table(rows))
    reports.render_ablation_figure(rows, out / "ablation.png")
    manifest.finish(outputs={"csv": out / "ablation.csv", "figure": out / "ablation.png"})
    click.echo(reports.format_table(rows))


@main.command("sweep")
@click.option("--axis", type=click.Choice(["prompt_length", "loss_ratio"]), required=True)
@click.option("--values", default=None,
              help="Grid; defaults: 12,24,36 or 1:1:1,1:2:2,1:2:1")
@_study_options
@_guard
def sweep_cmd(axis, values, workdir, seeds, cohort_seed, pretrain_steps, finetune_steps):
    """Sensitivity sweep over prompt length or loss-weight ratios."""
    out = Path(workdir)
    out.mkdir(parents=True, exist_ok=True)
    seed_list = [int(s) for s in seeds.split(",")]
    if values is None:
        values = "12,24,36" if axis == "prompt_length" else "1:1:1,1:2:2,1:2:1"
    grid = values.split(",")
    manifest = RunManifest(out / "sweep.manifest.json", "sweep",
                           {"axis": axis, "values": grid, "seeds": seed_list}, cohort_seed)
    rows = []
    for value in grid:
        if axis == "prompt_length":
            setup = pipeline.prepare_study(cohort_seed=cohort_seed, n_prompts=int(value))
            ratio = "1:1:1"
        else:
            LossWeights.from_ratio(value)  # validate
            setup = pipeline.prepare_study(cohort_seed=cohort_seed)
            ratio = value
        lm = pipeline.pretrain_frozen_lm(setup)
        for seed in seed_list:
            row = pipeline.run_arm(setup, "full", seed, lm,
                                   pretrain_steps=pretrain_steps,
                                   finetune_steps=finetune_steps,
                                   weights_ratio=ratio)
            row = {axis: value, **row}
            rows.append(row)
            click.echo(f"{axis}={value} seed={seed}: micro F1 {row['micro_f1']:.3f}")
    reports.write_rows_csv(rows, out / "sweep.csv")
    (out / "sweep.txt").write_text(reports.format_table(rows))
    reports.render_sweep_figure(rows, axis, out / "sweep.png")
    manifest.finish(outputs={"csv": out / "sweep.csv", "figure": out / "sweep.png"})
    click.echo(reports.format_table(rows))


if __name__ == "__main__":
    main()
