"""IQR anomaly detection and template captioning for lab series.

Per-variable Tukey fences [Q1 - 1.5*IQR, Q3 + 1.5*IQR] are fit on pooled
training values; excursion counts are rendered through four fixed clause
templates with counts spelled out as English words.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import LabSeries

IQR_MULTIPLIER = 1.5


class CaptionError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceRanges:
    variable_names: tuple[str, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    provenance: str = "fit_corpus"

    def __post_init__(self):
        if not (len(self.variable_names) == len(self.lower) == len(self.upper)):
            raise CaptionError("misaligned range table")
        for name, lo, hi in zip(self.variable_names, self.lower, self.upper):
            if not lo < hi:
                raise CaptionError(f"variable {name!r}: lower bound must be below upper bound")

    def bounds(self, name: str) -> tuple[float, float]:
        try:
            i = self.variable_names.index(name)
        except ValueError:
            raise CaptionError(f"variable {name!r} missing from reference ranges") from None
        return self.lower[i], self.upper[i]

    def save_tsv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("variable\tlower\tupper\n")
            for name, lo, hi in zip(self.variable_names, self.lower, self.upper):
                fh.write(f"{name}\t{lo!r}\t{hi!r}\n")

    @classmethod
    def load_tsv(cls, path: str | Path) -> "ReferenceRanges":
        names, lowers, uppers = [], [], []
        lines = Path(path).read_text().splitlines()
        for line in lines[1:]:
            if not line.strip():
                continue
            name, lo, hi = line.split("\t")
            names.append(name)
            lowers.append(float(lo))
            uppers.append(float(hi))
        return cls(tuple(names), tuple(lowers), tuple(uppers), provenance="supplied")


@dataclass(frozen=True)
class AnomalyReport:
    """Per-variable counts of readings above/below the reference range."""

    variable_names: tuple[str, ...]
    above: tuple[int, ...]
    below: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.variable_names) == len(self.above) == len(self.below)):
            raise CaptionError("misaligned anomaly report")
        if any(a < 0 for a in self.above) or any(b < 0 for b in self.below):
            raise CaptionError("negative anomaly count")


@dataclass(frozen=True)
class AnomalyCaption:
    text: str
    source_report: AnomalyReport
    token_ids: tuple[int, ...] = ()


def fit_reference_ranges(training_series: Iterable[LabSeries]) -> ReferenceRanges:
    """Pool observed, non-padded values per variable and compute Tukey fences.

    Quantiles use linear interpolation on the sorted pool. A degenerate
    IQR of 0 is widened to +-eps so constant channels read as normal.
    """
    pools: dict[str, list[np.ndarray]] = {}
    order: list[str] = []
    for series in training_series:
        keep = series.present_mask & ~series.effective_pad_mask()[:, None]
        for j, name in enumerate(series.variable_names):
            if name not in pools:
                pools[name] = []
                order.append(name)
            pools[name].append(series.values[keep[:, j], j])
    lowers, uppers = [], []
    for name in order:
        pool = np.concatenate(pools[name]) if pools[name] else np.array([])
        if pool.size < 4:
            raise CaptionError(f"variable {name!r}: need >= 4 observations to fit, got {pool.size}")
        q1, q3 = np.quantile(pool, [0.25, 0.75])
        iqr = q3 - q1
        if iqr == 0.0:
            eps = max(1e-6, 1e-3 * abs(float(np.median(pool))))
            lowers.append(float(q1) - eps)
            uppers.append(float(q3) + eps)
        else:
            lowers.append(float(q1 - IQR_MULTIPLIER * iqr))
            uppers.append(float(q3 + IQR_MULTIPLIER * iqr))
    return ReferenceRanges(tuple(order), tuple(lowers), tuple(uppers))


def detect_anomalies(series: LabSeries, ranges: ReferenceRanges) -> AnomalyReport:
    """Count strict excursions per variable over non-padded steps."""
    keep = ~series.effective_pad_mask()
    above, below = [], []
    for j, name in enumerate(series.variable_names):
        lo, hi = ranges.bounds(name)
        col = series.values[keep, j]
        above.append(int(np.sum(col > hi)))
        below.append(int(np.sum(col < lo)))
    return AnomalyReport(tuple(series.variable_names), tuple(above), tuple(below))


_ONES = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
    "nine", "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen",
    "sixteen", "seventeen", "eighteen", "nineteen",
]
_TENS = ["", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety"]


def number_to_words(n: int) -> str:
    """English cardinal for 1..9999, hyphenating tens-units compounds."""
    if not 1 <= n <= 9999:
        raise CaptionError(f"count {n} outside the supported range 1..9999")
    if n >= 1000:
        rest = n % 1000
        head = _ONES[n // 1000] + " thousand"
        return head if rest == 0 else f"{head} {number_to_words(rest)}"
    if n >= 100:
        rest = n % 100
        head = _ONES[n // 100] + " hundred"
        return head if rest == 0 else f"{head} {number_to_words(rest)}"
    if n >= 20:
        return _TENS[n // 10] + ("" if n % 10 == 0 else "-" + _ONES[n % 10])
    return _ONES[n]


_WORD_TO_NUM: dict[str, int] = {}
for _i in range(1, 20):
    _WORD_TO_NUM[number_to_words(_i)] = _i
for _t in range(20, 100):
    _WORD_TO_NUM[number_to_words(_t)] = _t


def words_to_number(words: str) -> int:
    total = current = 0
    for part in words.split(" "):
        if part == "thousand":
            total += current * 1000
            current = 0
        elif part == "hundred":
            current *= 100
        else:
            if part not in _WORD_TO_NUM:
                raise CaptionError(f"unrecognized number word {part!r}")
            current += _WORD_TO_NUM[part]
    return total + current


def render_clause(name: str, above: int, below: int) -> str:
    if above == 0 and below == 0:
        return f"{name} is normal all the time"
    if above > 0 and below == 0:
        return f"{name} is higher than normal {number_to_words(above)} times"
    if above == 0 and below > 0:
        return f"{name} is lower than normal {number_to_words(below)} times"
    return (
        f"{name} is higher than normal {number_to_words(above)} times"
        f" and lower than normal {number_to_words(below)} times"
    )


def render_caption(report: AnomalyReport) -> AnomalyCaption:
    """One clause per variable in declaration order, joined by ", "."""
    if not report.variable_names:
        raise CaptionError("report covers no variables")
    clauses = [
        render_clause(name, a, b)
        for name, a, b in zip(report.variable_names, report.above, report.below)
    ]
    return AnomalyCaption(text=", ".join(clauses), source_report=report)


_CLAUSE_RE = re.compile(
    r"^(?P<name>.+?) is (?:"
    r"normal all the time"
    r"|higher than normal (?P<above>[a-z -]+?) times"
    r"(?: and lower than normal (?P<below_both>[a-z -]+?) times)?"
    r"|lower than normal (?P<below>[a-z -]+?) times"
    r")$"
)


def parse_caption(text: str) -> AnomalyReport:
    """Inverse of render_caption on well-formed captions."""
    names, above, below = [], [], []
    for clause in text.split(", "):
        m = _CLAUSE_RE.match(clause)
        if m is None:
            raise CaptionError(f"clause does not match any template: {clause!r}")
        names.append(m.group("name"))
        a = m.group("above")
        b = m.group("below_both") or m.group("below")
        above.append(words_to_number(a) if a else 0)
        below.append(words_to_number(b) if b else 0)
    return AnomalyReport(tuple(names), tuple(above), tuple(below))


def caption_records_jsonl(records, ranges: ReferenceRanges, preprocess) -> list[dict]:
    """Caption each record (after `preprocess(series)`) into the output JSONL schema."""
    rows = []
    for record in records:
        report = detect_anomalies(preprocess(record.labs), ranges)
        caption = render_caption(report)
        rows.append(
            {
                "patient_id": record.patient_id,
                "caption": caption.text,
                "report": {
                    name: [a, b]
                    for name, a, b in zip(report.variable_names, report.above, report.below)
                },
            }
        )
    return rows


def save_captions(rows: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
