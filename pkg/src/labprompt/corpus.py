"""Patient records, cohort generation, and lab time-series preprocessing.

Covers JSONL ingestion, nearest-value imputation, padding to a fixed
length, non-overlapping patching, note normalization, and a synthetic
cohort generator with planted lab anomalies that determine the labels.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

# lowercase words (hyphen compounds kept whole), digit runs, single punctuation
_TOKEN_RE = re.compile(r"[a-z]+(?:-[a-z]+)*|[0-9]+|[^\sa-z0-9]")

# Channel names mirror the common ICU benchmark variables; synthetic
# cohorts with more channels fall back to generic names.
DEFAULT_VARIABLE_NAMES = [
    "diastolic blood pressure",
    "fraction inspired oxygen",
    "glucose",
    "heart rate",
    "mean blood pressure",
    "oxygen saturation",
    "respiratory rate",
    "systolic blood pressure",
    "temperature",
    "weight",
    "ph",
]


class CorpusError(ValueError):
    """Raised for malformed records, schema violations, or bad preprocessing input."""


def load_phenotype_vocabulary(path: str | Path | None = None) -> list[str]:
    """Label vocabulary, one phenotype per line; default list ships with the package."""
    if path is None:
        text = resources.files("labprompt.data").joinpath("phenotypes.txt").read_text()
    else:
        text = Path(path).read_text()
    labels = [line.strip() for line in text.splitlines() if line.strip()]
    if len(labels) != len(set(labels)):
        raise CorpusError("phenotype vocabulary contains duplicates")
    return labels


def load_stopwords() -> frozenset[str]:
    text = resources.files("labprompt.data").joinpath("stopwords.txt").read_text()
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize_note(text: str, stopwords: frozenset[str] | None = None) -> str:
    """Lowercase, drop digit tokens and stopwords."""
    if stopwords is None:
        stopwords = load_stopwords()
    kept = [t for t in tokenize(text) if not t.isdigit() and t not in stopwords]
    return " ".join(kept)


class Vocabulary:
    """Corpus-built token vocabulary with reserved pad/bos/eos/unk ids."""

    def __init__(self, tokens: Iterable[str]):
        self.id_to_token = list(RESERVED_TOKENS)
        seen = set(self.id_to_token)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.id_to_token.append(tok)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        def gen():
            for text in texts:
                yield from tokenize(text)

        return cls(gen())

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str, add_special: bool = True) -> list[int]:
        ids = [self.token_to_id.get(t, UNK_ID) for t in tokenize(text)]
        if add_special:
            return [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        toks = [
            self.id_to_token[i]
            for i in ids
            if i not in (PAD_ID, BOS_ID, EOS_ID) and 0 <= i < len(self.id_to_token)
        ]
        out = ""
        for tok in toks:
            if out and (tok.isalnum() or tok in "(\""):
                out += " "
            out += tok
        return out

    def to_json(self) -> list[str]:
        return list(self.id_to_token)

    @classmethod
    def from_json(cls, id_to_token: Sequence[str]) -> "Vocabulary":
        vocab = cls.__new__(cls)
        vocab.id_to_token = list(id_to_token)
        vocab.token_to_id = {t: i for i, t in enumerate(vocab.id_to_token)}
        return vocab


@dataclass
class LabSeries:
    """One patient's multivariate lab time series with an observation mask."""

    patient_id: str
    variable_names: list[str]
    timestamps: np.ndarray  # (L,) hours since admission, strictly increasing
    values: np.ndarray  # (L, N_x)
    present_mask: np.ndarray  # (L, N_x) bool, True = observed
    pad_mask: np.ndarray | None = None  # (L,) bool, True = appended padding row

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.present_mask = np.asarray(self.present_mask, dtype=bool)
        if self.pad_mask is not None:
            self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        L, n = self.values.shape
        if L < 1:
            raise CorpusError(f"{self.patient_id}: empty series")
        if n != len(self.variable_names):
            raise CorpusError(f"{self.patient_id}: value rows do not match variable count")
        if self.timestamps.shape != (L,) or self.present_mask.shape != (L, n):
            raise CorpusError(f"{self.patient_id}: misaligned series shapes")
        if np.any(np.diff(self.timestamps) <= 0):
            raise CorpusError(f"{self.patient_id}: timestamps not strictly increasing")
        if not np.all(np.isfinite(self.values[self.present_mask])):
            raise CorpusError(f"{self.patient_id}: non-finite observed value")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_variables(self) -> int:
        return self.values.shape[1]

    def effective_pad_mask(self) -> np.ndarray:
        if self.pad_mask is None:
            return np.zeros(self.length, dtype=bool)
        return self.pad_mask


@dataclass
class MedicalNote:
    patient_id: str
    text: str
    token_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.text:
            raise CorpusError(f"{self.patient_id}: empty note text")


@dataclass
class DiagnosisLabelSet:
    labels: frozenset[str]

    @classmethod
    def from_list(cls, labels: Iterable[str], vocabulary: Sequence[str]) -> "DiagnosisLabelSet":
        known = set(vocabulary)
        labels = list(labels)
        for lab in labels:
            if lab not in known:
                raise CorpusError(f"unknown label {lab!r}")
        return cls(frozenset(labels))


@dataclass
class PatientRecord:
    note: MedicalNote
    labs: LabSeries
    labels: DiagnosisLabelSet
    caption: "object | None" = None  # AnomalyCaption, attached by the captioner

    def __post_init__(self):
        if self.note.patient_id != self.labs.patient_id:
            raise CorpusError("patient_id mismatch inside record")

    @property
    def patient_id(self) -> str:
        return self.labs.patient_id


def load_records(path: str | Path, vocabulary: Sequence[str] | None = None) -> list[PatientRecord]:
    """Parse a JSONL cohort file, one patient per line; see the record schema in the README."""
    if vocabulary is None:
        vocabulary = load_phenotype_vocabulary()
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                records.append(_record_from_json(raw, vocabulary))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return records


def _record_from_json(raw: dict, vocabulary: Sequence[str]) -> PatientRecord:
    pid = raw["patient_id"]
    lab = raw["lab"]
    values = np.array(
        [[np.nan if v is None else float(v) for v in row] for row in lab["values"]],
        dtype=np.float64,
    )
    present = ~np.isnan(values)
    caption = raw.get("caption")
    series = LabSeries(
        patient_id=pid,
        variable_names=list(lab["variables"]),
        timestamps=np.asarray(lab["timestamps"], dtype=np.float64),
        values=np.where(present, values, 0.0),
        present_mask=present,
    )
    record = PatientRecord(
        note=MedicalNote(patient_id=pid, text=raw["note"]),
        labs=series,
        labels=DiagnosisLabelSet.from_list(raw.get("labels", []), vocabulary),
    )
    record.caption = caption
    return record


def record_to_json(record: PatientRecord) -> dict:
    values = [
        [record.labs.values[i, j] if record.labs.present_mask[i, j] else None
         for j in range(record.labs.n_variables)]
        for i in range(record.labs.length)
    ]
    out = {
        "patient_id": record.patient_id,
        "note": record.note.text,
        "lab": {
            "variables": record.labs.variable_names,
            "timestamps": record.labs.timestamps.tolist(),
            "values": values,
        },
        "labels": sorted(record.labels.labels),
    }
    if record.caption is not None:
        out["caption"] = record.caption if isinstance(record.caption, str) else record.caption.text
    return out


def save_records(records: Iterable[PatientRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record)) + "\n")


# ---------------------------------------------------------------------------
# preprocessing


def impute_missing(series: LabSeries) -> LabSeries:
    """Fill missing cells with the temporally nearest observed value per variable.

    Distance ties break toward the earlier timestamp.
    """
    values = series.values.copy()
    for j, name in enumerate(series.variable_names):
        obs = np.flatnonzero(series.present_mask[:, j])
        if obs.size == 0:
            raise CorpusError(f"variable {name!r} has no observed values to impute from")
        missing = np.flatnonzero(~series.present_mask[:, j])
        if missing.size == 0:
            continue
        dist = np.abs(series.timestamps[missing, None] - series.timestamps[None, obs])
        # argmin takes the first minimum; obs is sorted, so ties go to the earlier donor
        donor = obs[np.argmin(dist, axis=1)]
        values[missing, j] = values[donor, j]
    return replace(
        series,
        values=values,
        present_mask=np.ones_like(series.present_mask),
    )


def pad_series(series: LabSeries, target_len: int) -> LabSeries:
    """Extend to target_len by repeating the final row; appended rows get pad_mask True."""
    L = series.length
    if L > target_len:
        raise CorpusError(f"series length {L} exceeds target length {target_len}; window it first")
    if not np.all(series.present_mask):
        raise CorpusError("pad_series expects an imputed series")
    extra = target_len - L
    pad_mask = np.concatenate([series.effective_pad_mask(), np.ones(extra, dtype=bool)])
    if extra == 0:
        return replace(series, pad_mask=pad_mask)
    last_t = series.timestamps[-1]
    new_ts = np.concatenate([series.timestamps, last_t + np.arange(1, extra + 1)])
    new_vals = np.concatenate([series.values, np.repeat(series.values[-1:], extra, axis=0)])
    return replace(
        series,
        timestamps=new_ts,
        values=new_vals,
        present_mask=np.ones((target_len, series.n_variables), dtype=bool),
        pad_mask=pad_mask,
    )


def patchify(series: LabSeries, patch_len: int) -> np.ndarray:
    """Split into contiguous non-overlapping patches, shape (L/patch_len, patch_len, N_x)."""
    L, n = series.values.shape
    if L % patch_len != 0:
        raise CorpusError(f"length {L} not divisible by patch length {patch_len}")
    return series.values.reshape(L // patch_len, patch_len, n)


def patch_pad_mask(series: LabSeries, patch_len: int) -> np.ndarray:
    """True for patches made entirely of padding rows; shape (L/patch_len,)."""
    pad = series.effective_pad_mask()
    return pad.reshape(-1, patch_len).all(axis=1)


def preprocess_series(series: LabSeries, target_len: int, patch_len: int) -> LabSeries:
    return pad_series(impute_missing(series), target_len)


# ---------------------------------------------------------------------------
# synthetic cohort


@dataclass
class CohortConfig:
    n_patients: int = 64
    n_variables: int = 8
    series_len: int = 96
    anomaly_rate: float = 0.35
    label_rule: str = "high"  # "high": high channel k => phenotype k; "any": any anomaly
    seed: int = 0
    missing_rate: float = 0.1
    note_hit_rate: float = 0.6  # chance a true label's phrase appears in the note
    note_noise_rate: float = 0.12  # chance a distractor phrase appears

    @classmethod
    def from_file(cls, path: str | Path) -> "CohortConfig":
        return cls(**parse_kv_config(path, cls))


def parse_kv_config(path: str | Path, cls) -> dict:
    """Parse line-oriented `key = value` text, coercing to the dataclass field types."""
    types = {f_.name: f_.type for f_ in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CorpusError(f"{path}:{lineno}: expected `key = value`")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise CorpusError(f"{path}:{lineno}: unknown key {key!r}")
        ftype = str(types[key])
        if "int" in ftype:
            out[key] = int(value)
        elif "float" in ftype:
            out[key] = float(value)
        elif "bool" in ftype:
            out[key] = value.lower() in ("1", "true", "yes")
        else:
            out[key] = value
    return out


# Paraphrase phrases per channel: correlated with labels but disjoint from
# caption wording, so the two modalities carry distinct signal.
_NOTE_PHRASES = [
    "renal insufficiency oliguria",
    "cerebral ischemia deficit",
    "chest pain troponin elevation",
    "irregular rhythm palpitations",
    "kidney function decline",
    "airway obstruction wheezing",
    "postoperative complication course",
    "conduction delay block",
    "volume overload orthopnea",
    "coronary plaque burden",
    "glycemic control poor",
]

_FILLER_WORDS = (
    "patient admitted course stable ward review morning team noted exam "
    "plan continue monitoring discharge home follow clinic"
).split()


def synthetic_variable_names(n_variables: int) -> list[str]:
    names = DEFAULT_VARIABLE_NAMES[:n_variables]
    names += [f"lab channel {k}" for k in range(len(names), n_variables)]
    return names


def note_phrase_for_channel(k: int) -> str:
    if k < len(_NOTE_PHRASES):
        return _NOTE_PHRASES[k]
    return f"marker {chr(ord('a') + k % 26)} derangement"


def generate_synthetic_cohort(
    seed: int,
    n_patients: int | None = None,
    config: CohortConfig | None = None,
    vocabulary: Sequence[str] | None = None,
) -> tuple[list[PatientRecord], dict[str, list[str]]]:
    """Deterministic cohort with planted anomalies.

    Channel k driven above its normal band => phenotype k (label_rule "high";
    "any" also counts low excursions). Notes carry noisy paraphrase phrases
    for the true labels. Returns (records, {"train": ids, "test": ids}) split 4:1.
    """
    config = config or CohortConfig()
    if n_patients is None:
        n_patients = config.n_patients
    if n_patients < 1:
        raise CorpusError("n_patients must be >= 1")
    if vocabulary is None:
        vocabulary = load_phenotype_vocabulary()
    if config.n_variables > len(vocabulary):
        raise CorpusError("more channels than phenotype labels")
    rng = np.random.default_rng(seed)
    names = synthetic_variable_names(config.n_variables)
    L, n = config.series_len, config.n_variables
    mu = 50.0 + 10.0 * np.arange(n)
    sigma = 2.0 + 0.5 * np.arange(n)

    records = []
    for p in range(n_patients):
        pid = f"synth-{seed}-{p:04d}"
        # uniform baseline keeps every quiet reading inside the Tukey fences
        values = mu + sigma * rng.uniform(-1.0, 1.0, size=(L, n))
        anomalous = np.zeros((n,), dtype=np.int64)  # 0 normal, +1 high, -1 low
        counts = np.zeros((n,), dtype=np.int64)
        planted = np.zeros((L, n), dtype=bool)
        for k in range(n):
            if rng.random() >= config.anomaly_rate:
                continue
            direction = 1 if rng.random() < 0.65 else -1
            # a sustained excursion: one contiguous run covering 1/8 to 1/5
            # of the series, so the abnormal regime spans whole patches
            run = int(rng.integers(max(2, L // 8), max(3, L // 5) + 1))
            start = int(rng.integers(0, L - run + 1))
            steps = np.arange(start, start + run)
            values[steps, k] = mu[k] + direction * (6.0 + 2.0 * rng.random(run)) * sigma[k]
            anomalous[k] = direction
            counts[k] = run
            planted[steps, k] = True

        present = rng.random((L, n)) >= config.missing_rate
        present |= planted  # planted excursions stay observed
        for k in range(n):  # each variable needs at least one donor
            if not present[:, k].any():
                present[int(rng.integers(L)), k] = True

        if config.label_rule == "any":
            label_idx = [k for k in range(n) if anomalous[k] != 0]
        else:
            label_idx = [k for k in range(n) if anomalous[k] > 0]
        labels = DiagnosisLabelSet(frozenset(vocabulary[k] for k in label_idx))

        phrases = []
        for k in range(n):
            hit = k in label_idx and rng.random() < config.note_hit_rate
            noise = k not in label_idx and rng.random() < config.note_noise_rate
            if hit or noise:
                phrases.append(note_phrase_for_channel(k))
        filler = rng.choice(_FILLER_WORDS, size=6, replace=True).tolist()
        words = filler[:3] + phrases + filler[3:]
        note = MedicalNote(patient_id=pid, text=" ".join(words))

        series = LabSeries(
            patient_id=pid,
            variable_names=names,
            timestamps=np.arange(L, dtype=np.float64),
            values=np.where(present, values, 0.0),
            present_mask=present,
        )
        records.append(PatientRecord(note=note, labs=series, labels=labels))

    n_train = max(1, (4 * n_patients) // 5)
    split = {
        "train": [r.patient_id for r in records[:n_train]],
        "test": [r.patient_id for r in records[n_train:]],
    }
    return records, split
