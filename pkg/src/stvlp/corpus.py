"""Corpus ingestion: study manifests, chronological sequences, tokenization.

A corpus directory holds a pipe-delimited manifest, one PGM per view, one
report text file per study, and a vocabulary file. The manifest row format
is::

    patient_id|study_id|order_key|frontal|lateral|report

with paths relative to the manifest's directory and an empty lateral field
meaning the study has no lateral view.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgm import read_pgm

MANIFEST_FIELDS = 6

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest rows."""


@dataclass(frozen=True)
class StudyRecord:
    patient_id: str
    study_id: str
    order_key: str  # lexicographically sortable timestamp string
    frontal_path: str
    lateral_path: str  # empty string when the study has no lateral view
    report_path: str

    @property
    def has_lateral(self) -> bool:
        return self.lateral_path != ""


@dataclass(frozen=True)
class SequenceRecord:
    sequence_id: str
    patient_id: str
    study_ids: tuple[str, ...]

    @property
    def length(self) -> int:
        return len(self.study_ids)


@dataclass
class RawPair:
    """One image/report training pair, pixel arrays in [0, 1]."""

    study_id: str
    frontal: np.ndarray
    lateral: np.ndarray  # zeros when has_lateral is False
    has_lateral: bool
    tokens: np.ndarray  # int64, length max_text_len, starts with the CLS id
    pad_mask: np.ndarray  # bool, True at padded positions


def ingest_manifest(path: str | Path) -> list[StudyRecord]:
    """Parse a manifest file into study records, preserving file order.

    Raises ManifestError (with the 1-based line number) on rows with the
    wrong field count, empty mandatory fields, or duplicate
    (patient_id, study_id) keys.
    """
    records: list[StudyRecord] = []
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("|")
            if len(parts) != MANIFEST_FIELDS:
                raise ManifestError(
                    f"{path}:{lineno}: expected {MANIFEST_FIELDS} fields, got {len(parts)}"
                )
            patient_id, study_id, order_key, frontal, lateral, report = (
                p.strip() for p in parts
            )
            for name, value in (
                ("patient_id", patient_id),
                ("study_id", study_id),
                ("order_key", order_key),
                ("frontal", frontal),
                ("report", report),
            ):
                if not value:
                    raise ManifestError(f"{path}:{lineno}: empty {name} field")
            key = (patient_id, study_id)
            if key in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate study {key}")
            seen.add(key)
            records.append(
                StudyRecord(patient_id, study_id, order_key, frontal, lateral, report)
            )
    return records


def build_sequences(records: list[StudyRecord], target_len: int = 4) -> list[SequenceRecord]:
    """Chunk each patient's chronologically sorted studies into sequences.

    Per patient: sort by (order_key, study_id), emit floor(n / target_len)
    full-length sequences greedily from the start, then one length-1
    sequence per remaining study. Output is ordered by patient id, then by
    position in time, so the result is a pure function of the input set.
    """
    if target_len < 1:
        raise ValueError(f"target_len must be >= 1, got {target_len}")
    by_patient: dict[str, list[StudyRecord]] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)

    sequences: list[SequenceRecord] = []
    for patient_id in sorted(by_patient):
        studies = sorted(by_patient[patient_id], key=lambda r: (r.order_key, r.study_id))
        n_full = len(studies) // target_len
        chunk_index = 0
        for i in range(n_full):
            chunk = studies[i * target_len : (i + 1) * target_len]
            sequences.append(
                SequenceRecord(
                    sequence_id=f"{patient_id}-s{chunk_index:02d}",
                    patient_id=patient_id,
                    study_ids=tuple(s.study_id for s in chunk),
                )
            )
            chunk_index += 1
        for leftover in studies[n_full * target_len :]:
            sequences.append(
                SequenceRecord(
                    sequence_id=f"{patient_id}-s{chunk_index:02d}",
                    patient_id=patient_id,
                    study_ids=(leftover.study_id,),
                )
            )
            chunk_index += 1
    return sequences


def write_sequence_manifest(path: str | Path, sequences: list[SequenceRecord]) -> None:
    """Write sequences as `sequence_id|patient_id|study_ids(comma-joined)|length` rows."""
    lines = [
        f"{s.sequence_id}|{s.patient_id}|{','.join(s.study_ids)}|{s.length}"
        for s in sequences
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_sequence_manifest(path: str | Path) -> list[SequenceRecord]:
    sequences: list[SequenceRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            seq_id, patient_id, ids_joined, length = parts
            study_ids = tuple(ids_joined.split(","))
            if len(study_ids) != int(length):
                raise ManifestError(
                    f"{path}:{lineno}: length field {length} != {len(study_ids)} ids"
                )
            sequences.append(SequenceRecord(seq_id, patient_id, study_ids))
    return sequences


class Vocabulary:
    """Whitespace tokenizer over a fixed word list (one token per line)."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for special in SPECIAL_TOKENS:
            if special not in tokens:
                raise ValueError(f"vocabulary is missing {special}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self.index[PAD_TOKEN]
        self.unk_id = self.index[UNK_TOKEN]
        self.cls_id = self.index[CLS_TOKEN]
        self.sep_id = self.index[SEP_TOKEN]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([w for w in words if w])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def encode(self, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Map text to (ids, pad_mask), CLS-first, truncated/padded to max_len.

        Unknown words map to the UNK id. pad_mask is True exactly at the
        padded tail positions.
        """
        ids = [self.index.get(w, self.unk_id) for w in text.split()]
        if not ids or ids[0] != self.cls_id:
            ids = [self.cls_id] + ids
        ids = ids[:max_len]
        n_real = len(ids)
        ids = ids + [self.pad_id] * (max_len - n_real)
        pad_mask = np.arange(max_len) >= n_real
        return np.asarray(ids, dtype=np.int64), pad_mask


def load_pair(
    record: StudyRecord,
    base_dir: str | Path,
    vocab: Vocabulary,
    max_text_len: int,
) -> RawPair:
    """Load one study's views and tokenized report.

    A missing lateral view becomes a zero image with has_lateral False, so
    downstream code sees fixed shapes.
    """
    base = Path(base_dir)
    frontal = read_pgm(base / record.frontal_path)
    if record.has_lateral:
        lateral = read_pgm(base / record.lateral_path)
        if lateral.shape != frontal.shape:
            raise ValueError(
                f"{record.study_id}: view shape mismatch {frontal.shape} vs {lateral.shape}"
            )
    else:
        lateral = np.zeros_like(frontal)
    report = (base / record.report_path).read_text(encoding="utf-8").strip()
    tokens, pad_mask = vocab.encode(report, max_text_len)
    return RawPair(
        study_id=record.study_id,
        frontal=frontal,
        lateral=lateral,
        has_lateral=record.has_lateral,
        tokens=tokens,
        pad_mask=pad_mask,
    )


@dataclass
class Corpus:
    """A fully loaded corpus directory."""

    base_dir: Path
    records: list[StudyRecord]
    vocab: Vocabulary
    target_len: int = 4
    by_study: dict[str, StudyRecord] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.by_study = {r.study_id: r for r in self.records}

    @property
    def image_size(self) -> int:
        first = read_pgm(self.base_dir / self.records[0].frontal_path)
        return first.shape[0]

    def sequences(self) -> list[SequenceRecord]:
        return build_sequences(self.records, self.target_len)

    def pair(self, study_id: str, max_text_len: int) -> RawPair:
        return load_pair(self.by_study[study_id], self.base_dir, self.vocab, max_text_len)


def load_corpus(
    corpus_dir: str | Path,
    manifest_name: str = "manifest.psv",
    target_len: int | None = None,
) -> Corpus:
    """Open a corpus directory (manifest + vocab, and optionally genspec.json)."""
    base = Path(corpus_dir)
    records = ingest_manifest(base / manifest_name)
    if not records:
        raise ManifestError(f"{base / manifest_name}: manifest is empty")
    vocab = Vocabulary.load(base / "vocab.txt")
    if target_len is None:
        genspec = base / "genspec.json"
        if genspec.exists():
            import json

            target_len = int(json.loads(genspec.read_text())["seq_len"])
        else:
            target_len = 4
    return Corpus(base_dir=base, records=records, vocab=vocab, target_len=target_len)
