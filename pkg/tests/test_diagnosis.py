import random

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from labprompt.corpus import (
    BOS_ID,
    EOS_ID,
    DiagnosisLabelSet,
    Vocabulary,
    load_phenotype_vocabulary,
)
from labprompt.diagnosis import (
    ANSWER_PREFIX_DISPLAY,
    ANSWER_PREFIX_TEXT,
    CAPTION_SECTION_TEXT,
    INSTRUCTION_TEXT,
    answer_token_ids,
    build_sequences,
    evaluate,
    parse_diagnosis_text,
    render_diagnosis,
)
from labprompt.lm import TinyCausalLM, assert_frozen, greedy_decode, lm_parameter_hash
from labprompt.model import ModelConfig, freeze

PHENOTYPES = load_phenotype_vocabulary()


class TestRenderParse:
    def test_render_orders_by_vocabulary(self):
        vocab = ["Fever", "Shock", "Septicemia (except in labor)"]
        labels = DiagnosisLabelSet(frozenset(["Shock", "Fever"]))
        assert render_diagnosis(labels, vocab) == "Diagnosed Results: Fever, Shock."

    def test_render_empty(self):
        assert render_diagnosis(DiagnosisLabelSet(frozenset()), PHENOTYPES) == "Diagnosed Results:."

    def test_parenthesized_label_with_comma_survives(self):
        vocab = ["Septicemia (except in labor)", "Shock"]
        text = "Diagnosed Results: Septicemia (except in labor), Shock."
        labels, dropped = parse_diagnosis_text(text, vocab)
        assert labels.labels == frozenset(vocab)
        assert dropped == 0

    def test_unknown_fragments_counted_not_kept(self):
        labels, dropped = parse_diagnosis_text(
            "Diagnosed Results: Shock, Rickets.", ["Shock"]
        )
        assert labels.labels == frozenset(["Shock"])
        assert dropped == 1

    def test_empty_text(self):
        labels, dropped = parse_diagnosis_text("", PHENOTYPES)
        assert labels.labels == frozenset() and dropped == 0

    def test_prefix_only(self):
        labels, dropped = parse_diagnosis_text("Diagnosed Results:.", PHENOTYPES)
        assert labels.labels == frozenset() and dropped == 0

    def test_case_and_spacing_insensitive(self):
        labels, _ = parse_diagnosis_text("diagnosed results :  shock .", ["Shock"])
        assert labels.labels == frozenset(["Shock"])

    @given(st.permutations(range(len(PHENOTYPES))), st.integers(0, len(PHENOTYPES)))
    @settings(max_examples=50, deadline=None)
    def test_roundtrip_any_subset(self, perm, k):
        chosen = frozenset(PHENOTYPES[i] for i in perm[:k])
        text = render_diagnosis(DiagnosisLabelSet(chosen), PHENOTYPES)
        labels, dropped = parse_diagnosis_text(text, PHENOTYPES)
        assert labels.labels == chosen
        assert dropped == 0


class TestSequences:
    def vocab(self):
        return Vocabulary.build(
            [INSTRUCTION_TEXT, CAPTION_SECTION_TEXT, ANSWER_PREFIX_TEXT,
             "patient stable overnight", "glucose is higher than normal two times",
             ", ."] + list(PHENOTYPES)
        )

    def test_training_sequence_layout(self):
        vocab = self.vocab()
        note = vocab.encode("patient stable overnight")
        cap = vocab.encode("glucose is higher than normal two times")
        labels = DiagnosisLabelSet(frozenset([PHENOTYPES[0]]))
        ans = answer_token_ids(vocab, labels, PHENOTYPES)
        ids = build_sequences(vocab, note, cap, ans)
        assert ids[0] == BOS_ID and ids[-1] == EOS_ID
        # compare in token space: detokenization collapses " :" to ":"
        def toks(section):
            return vocab.encode(section, add_special=False)

        body = [i for i in ids if i not in (BOS_ID, EOS_ID)]
        assert body[: len(toks(INSTRUCTION_TEXT))] == toks(INSTRUCTION_TEXT)
        for section in (CAPTION_SECTION_TEXT, ANSWER_PREFIX_TEXT):
            sec = toks(section)
            assert any(body[i : i + len(sec)] == sec for i in range(len(body)))

    def test_inference_sequence_ends_at_answer_prefix(self):
        vocab = self.vocab()
        note = vocab.encode("patient stable overnight")
        ids = build_sequences(vocab, note)
        suffix = vocab.encode(ANSWER_PREFIX_TEXT, add_special=False)
        assert ids[-len(suffix):] == suffix
        assert EOS_ID not in ids

    def test_answer_tokens_roundtrip_through_parse(self):
        vocab = self.vocab()
        labels = DiagnosisLabelSet(frozenset(PHENOTYPES[:3]))
        ids = answer_token_ids(vocab, labels, PHENOTYPES)
        parsed, dropped = parse_diagnosis_text(vocab.decode(ids), PHENOTYPES)
        assert parsed.labels == labels.labels and dropped == 0


class TestEvaluate:
    def test_worked_example(self):
        # two patients, gold {A} and {A, B}; predictions {A, B} and {A}:
        # pooled tp=3 fp=1 fn=1 -> micro P=R=F1=3/4... use the canonical
        # single-pair case instead: gold {A, B}, prediction {B, C}.
        metrics = evaluate([{"B", "C"}], [{"A", "B"}])
        assert metrics["micro"]["precision"] == pytest.approx(0.5)
        assert metrics["micro"]["recall"] == pytest.approx(0.5)
        assert metrics["micro"]["f1"] == pytest.approx(0.5)

    def test_micro_two_thirds_macro_half(self):
        # gold {A}, prediction {A, B}: tp=1 fp=1 fn=0
        # micro: P=1/2, R=1 -> F1=2/3; per-label A F1=1, B F1=0 -> macro 0.5
        metrics = evaluate([{"A", "B"}], [{"A"}])
        assert metrics["micro"]["f1"] == pytest.approx(2 / 3, abs=1e-12)
        assert metrics["macro"]["f1"] == pytest.approx(0.5, abs=1e-12)

    def test_perfect_predictions(self):
        golds = [{"A"}, {"B", "C"}, set()]
        metrics = evaluate(golds, golds)
        assert metrics["micro"]["f1"] == 1.0
        assert metrics["macro"]["f1"] == 1.0

    def test_harmonic_identity_random_sets(self):
        rng = random.Random(0)
        universe = [f"L{i}" for i in range(6)]
        for _ in range(100):
            n = rng.randint(1, 8)
            preds = [set(rng.sample(universe, rng.randint(0, 4))) for _ in range(n)]
            golds = [set(rng.sample(universe, rng.randint(0, 4))) for _ in range(n)]
            m = evaluate(preds, golds)["micro"]
            p, r, f1 = m["precision"], m["recall"], m["f1"]
            expected = 2 * p * r / (p + r) if p + r else 0.0
            assert abs(f1 - expected) <= 1e-9

    def test_order_invariance(self):
        preds = [{"A"}, {"B"}, {"A", "B"}]
        golds = [{"A", "B"}, {"B"}, set()]
        base = evaluate(preds, golds)
        perm = [2, 0, 1]
        shuffled = evaluate([preds[i] for i in perm], [golds[i] for i in perm])
        assert base == shuffled

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            evaluate([{"A"}], [])

    def test_micro_pools_counts_across_patients(self):
        # patient 1: tp=1; patient 2: fp=1, fn=1 -> micro P = R = 1/2
        metrics = evaluate([{"A"}, {"B"}], [{"A"}, {"C"}])
        assert metrics["micro"]["precision"] == pytest.approx(0.5)
        assert metrics["micro"]["recall"] == pytest.approx(0.5)


def lm_config():
    return ModelConfig(
        d_model=8, n_prompts=2, patch_len=4, max_len=16, n_layers=1, n_heads=2,
        vocab_size=16, n_variables=3, downstream_hidden=8, max_tokens=32,
        lm_dim=16, lm_layers=1, lm_heads=2,
    )


class TestFrozenLM:
    def test_hash_stable_and_sensitive(self):
        torch.manual_seed(0)
        lm = TinyCausalLM(lm_config(), max_positions=32)
        h1 = lm_parameter_hash(lm)
        assert h1 == lm_parameter_hash(lm)
        with torch.no_grad():
            lm.head.bias += 1e-6
        assert lm_parameter_hash(lm) != h1

    def test_assert_frozen(self):
        torch.manual_seed(0)
        lm = TinyCausalLM(lm_config(), max_positions=32)
        with pytest.raises(RuntimeError):
            assert_frozen(lm)
        freeze(lm)
        assert_frozen(lm)

    def test_greedy_decode_deterministic(self):
        torch.manual_seed(0)
        lm = TinyCausalLM(lm_config(), max_positions=32)
        freeze(lm)
        prefix = torch.randn(1, 3, 16, generator=torch.Generator().manual_seed(1))
        a = greedy_decode(lm, prefix, EOS_ID, max_new_tokens=8)
        b = greedy_decode(lm, prefix, EOS_ID, max_new_tokens=8)
        assert a == b

    def test_greedy_decode_truncation_flag(self):
        torch.manual_seed(0)
        lm = TinyCausalLM(lm_config(), max_positions=64)
        freeze(lm)
        prefix = torch.randn(1, 3, 16, generator=torch.Generator().manual_seed(1))
        out, truncated = greedy_decode(lm, prefix, eos_id=-1, max_new_tokens=5)
        assert truncated and len(out) == 5

    def test_sequence_length_cap_enforced(self):
        torch.manual_seed(0)
        lm = TinyCausalLM(lm_config(), max_positions=4)
        with pytest.raises(ValueError):
            lm(torch.randn(1, 5, 16))

    def test_causal_future_independence(self):
        torch.manual_seed(0)
        lm = TinyCausalLM(lm_config(), max_positions=32)
        x = torch.randn(1, 6, 16, generator=torch.Generator().manual_seed(2))
        y = x.clone()
        y[:, -1] += 10.0
        a = lm(x)
        b = lm(y)
        assert torch.allclose(a[:, :-1], b[:, :-1], atol=1e-6)
