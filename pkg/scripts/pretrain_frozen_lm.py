#!/usr/bin/env python3
"""Fixture recipe for the frozen downstream language model.

Teaches a tiny decoder the instruction -> "Diagnosed Results:" grammar on a
training cohort, mixing the lab-caption section into half the contexts so the
model learns to condition on lab information. The result is saved frozen; the
diagnosis pipeline never updates it.

Usage:
    python scripts/pretrain_frozen_lm.py --ckpt pre/final.pmts \
        --data data/train.jsonl --captions captions.jsonl --out lm.pmts
"""

from __future__ import annotations

import argparse
import json


import torch

from labprompt import checkpoint, diagnosis
from labprompt.corpus import Vocabulary, load_phenotype_vocabulary, load_records
from labprompt.lm import TinyCausalLM
from labprompt.model import ModelConfig, freeze
from labprompt.trainer import tensorize_records


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ckpt", required=True, help="alignment checkpoint supplying vocab/config")
    parser.add_argument("--data", required=True, help="training records JSONL")
    parser.add_argument("--captions", default=None, help="captions JSONL to merge in")
    parser.add_argument("--out", required=True)
    parser.add_argument("--steps", type=int, default=1500)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    _, meta = checkpoint.load_container(args.ckpt)
    vocab = Vocabulary.from_json(meta["vocab"])
    config = ModelConfig(**meta["model_config"])

    records = load_records(args.data)
    if args.captions:
        by_id = {}
        with open(args.captions) as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    by_id[row["patient_id"]] = row["caption"]
        for record in records:
            if record.caption is None:
                record.caption = by_id.get(record.patient_id)

    phenotypes = load_phenotype_vocabulary()
    corpus = tensorize_records(records, vocab, config, require_captions=False)
    examples = []
    for i, record in enumerate(records):
        examples.append(
            {
                "note_ids": corpus.note_ids[i],
                "caption_ids": corpus.caption_ids[i],
                "answer_ids": diagnosis.answer_token_ids(vocab, record.labels, phenotypes),
            }
        )

    torch.manual_seed(args.seed + 91)
    lm = TinyCausalLM(config)
    losses = diagnosis.pretrain_lm(lm, vocab, examples, steps=args.steps, lr=args.lr, seed=args.seed)
    freeze(lm)
    lm.eval()

    checkpoint.save_container(
        args.out,
        checkpoint.module_tensors(lm),
        meta={"model_config": config.to_dict(), "max_positions": lm.max_positions,
              "final_loss": losses[-1]},
    )
    print(f"final LM loss {losses[-1]:.4f} -> {args.out}")


if __name__ == "__main__":
    main()
