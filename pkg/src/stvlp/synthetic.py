"""Deterministic synthetic corpus of paired two-view images and reports.

Each patient carries a scalar severity trajectory. Per visit we render:

  frontal   a centered blob whose intensity and radius step through 4
            coarse severity levels (the same granularity the report's
            finding word uses), at a fixed planar position
  lateral   a blob whose intensity tracks severity continuously and whose
            vertical cell (upper or lower) shows a depth level that appears
            nowhere in the frontal view

So the frontal view and the report agree at bucket resolution, while
fine-grained severity (what the trend labels are made of) is only readable
from the lateral view. Reports follow a fixed template over a small closed
vocabulary:

    [CLS] finding <bucket-word> depth <half-word> trend <trend-word> [SEP]

The depth word names the lateral view's cell outright, and most non-stable
transitions cross a bucket boundary, so within one sequence the studies whose
reports agree on both finding and depth words are mainly stable neighbours
plus the occasional within-bucket change: telling those apart requires the
trend wording itself.

Generation is reproducible byte-for-byte: every patient draws from its own
seed-derived stream, so corpora are also prefix-stable when n_patients
grows.
"""

from __future__ import annotations

import datetime
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import SPECIAL_TOKENS, SequenceRecord, Vocabulary
from .pgm import write_pgm

# Severity delta below which consecutive studies count as stable.
EPS_TREND = 0.05

# Most non-stable transitions step into the adjacent severity bucket, so the
# report's finding word moves with them; the rest change severity by at least
# the same margin while staying inside their bucket, visible only in the
# lateral view's continuous intensity.
BUCKET_CROSS_FRACTION = 0.85

IMPROVING = "improving"
STABLE = "stable"
WORSENING = "worsening"
NO_TREND = "none"  # first visit has no predecessor
TREND_CLASSES = (IMPROVING, STABLE, WORSENING)

BUCKET_WORDS = ("minimal", "mild", "moderate", "severe")

# The report's depth word and the lateral view's vertical cell carry the
# same two-level signal.
DEPTH_WORDS = ("upper", "lower")

TREND_SYNONYMS: dict[str, tuple[str, ...]] = {
    IMPROVING: ("improving", "resolving", "clearing"),
    STABLE: ("stable", "unchanged", "persistent"),
    WORSENING: ("worsening", "increasing", "progressing"),
    NO_TREND: ("baseline", "initial", "index"),
}

DEFAULT_VOCAB = (
    list(SPECIAL_TOKENS)
    + ["finding", "depth", "trend"]
    + list(BUCKET_WORDS)
    + list(DEPTH_WORDS)
    + [w for trend in (IMPROVING, STABLE, WORSENING, NO_TREND) for w in TREND_SYNONYMS[trend]]
)

WORD_TO_TREND = {w: t for t, words in TREND_SYNONYMS.items() for w in words}


@dataclass
class GenSpec:
    n_patients: int = 200
    seq_len: int = 4
    image_size: int = 32
    singleton_fraction: float = 0.1
    n_sentence_pairs: int = 200


@dataclass(frozen=True)
class LatentState:
    severity: float  # in [0, 1]
    depth: float  # in [0, 1], rendered only laterally
    trend: str  # trend vs the previous visit, NO_TREND at the first


def trend_from_delta(delta: float, dead_band: float = EPS_TREND) -> str:
    if delta > dead_band:
        return WORSENING
    if delta < -dead_band:
        return IMPROVING
    return STABLE


def severity_bucket(severity: float) -> int:
    return min(len(BUCKET_WORDS) - 1, int(severity * len(BUCKET_WORDS)))


def _blob(size: int, cx: float, cy: float, radius: float, intensity: float,
          background: float = 0.06) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    edge = 1.0 / (1.0 + np.exp((dist - radius) / 0.8))  # soft rim, ~1.6 px wide
    return np.clip(background + intensity * edge, 0.0, 1.0)


def render_frontal(severity: float, size: int) -> np.ndarray:
    """Frontal view: severity at bucket resolution, fixed position, no depth."""
    level = (severity_bucket(severity) + 0.5) / len(BUCKET_WORDS)
    radius = size * (0.12 + 0.20 * level)
    intensity = 0.30 + 0.60 * level
    return _blob(size, cx=0.50 * size, cy=0.42 * size, radius=radius, intensity=intensity)


def render_lateral(severity: float, depth: float, size: int) -> np.ndarray:
    """Lateral view: continuous severity as intensity, depth as which of two
    vertical cells holds the blob (the same two levels the report's depth
    word distinguishes)."""
    cy = (0.30 if depth < 0.5 else 0.70) * size
    intensity = 0.25 + 0.70 * severity
    return _blob(size, cx=0.50 * size, cy=cy, radius=0.18 * size, intensity=intensity)


def depth_word(depth: float) -> str:
    return DEPTH_WORDS[0] if depth < 0.5 else DEPTH_WORDS[1]


def render_report(severity: float, trend_word: str, depth: float) -> str:
    bucket = BUCKET_WORDS[severity_bucket(severity)]
    return f"[CLS] finding {bucket} depth {depth_word(depth)} trend {trend_word} [SEP]"


def _sample_trajectory(rng: np.random.Generator, n_visits: int) -> list[LatentState]:
    """Severity walk with mixed improving/stable/worsening transitions.

    Most non-stable transitions land in the adjacent severity bucket, so the
    change is visible at the report's finding-word resolution; a minority
    move at least as far while staying inside their bucket, so only the
    lateral view's continuous intensity records them. Stable visits stay well
    inside the dead band. The recorded trend is recomputed from the realized
    deltas so labels stay consistent with what the images actually show.
    Depth advances with the visit index through disjoint jittered bands.
    """
    width = 1.0 / len(BUCKET_WORDS)

    def depth_at(t: int) -> float:
        return (t + float(rng.uniform(0.02, 0.98))) / float(n_visits)

    severity = float(rng.uniform(0.15, 0.85))
    states = [LatentState(severity, depth_at(0), NO_TREND)]
    for t in range(1, n_visits):
        bucket = severity_bucket(severity)
        lo_b, hi_b = bucket * width + 0.02, (bucket + 1) * width - 0.02
        kinds = [k for k, allowed in ((0, bucket > 0), (1, True), (2, bucket + 1 < len(BUCKET_WORDS))) if allowed]
        probs = np.array([{0: 0.37, 1: 0.26, 2: 0.37}[k] for k in kinds])
        kind = int(rng.choice(kinds, p=probs / probs.sum()))
        cross = bool(rng.uniform() < BUCKET_CROSS_FRACTION)
        if kind == 1:
            new_severity = float(np.clip(severity + rng.uniform(-0.03, 0.03), 0.02, 0.98))
        elif kind == 0:
            if not cross and severity - 0.08 >= lo_b:
                new_severity = float(rng.uniform(lo_b, severity - 0.08))
            else:
                lo = (bucket - 1) * width + 0.02
                hi = min(bucket * width - 0.02, severity - 0.08)
                new_severity = float(rng.uniform(lo, hi))
        else:
            if not cross and severity + 0.08 <= hi_b:
                new_severity = float(rng.uniform(severity + 0.08, hi_b))
            else:
                lo = max((bucket + 1) * width + 0.02, severity + 0.08)
                hi = (bucket + 2) * width - 0.02
                new_severity = float(rng.uniform(lo, hi))
        trend = trend_from_delta(new_severity - severity)
        severity = new_severity
        states.append(LatentState(severity, depth_at(t), trend))
    return states


def _visit_dates(rng: np.random.Generator, n_visits: int) -> list[str]:
    base = datetime.datetime(2024, 1, 1, 8, 0) + datetime.timedelta(
        days=int(rng.integers(0, 300)), hours=int(rng.integers(0, 10))
    )
    dates = []
    current = base
    for _ in range(n_visits):
        dates.append(current.isoformat(timespec="minutes"))
        current += datetime.timedelta(days=int(rng.integers(7, 35)), hours=int(rng.integers(0, 8)))
    return dates


def generate_corpus(spec: GenSpec, out_dir: str | Path, seed: int) -> dict:
    """Write a complete corpus directory; returns summary counts.

    Layout: manifest.psv, vocab.txt, labels.psv, genspec.json, images/,
    reports/, sentence_pairs.psv, prompts.psv. Byte-identical across runs
    with the same (spec, seed).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)

    vocab = Vocabulary(DEFAULT_VOCAB)
    vocab.save(out / "vocab.txt")

    n_singles = int(round(spec.n_patients * spec.singleton_fraction))
    manifest_rows: list[str] = []
    label_rows: list[str] = []
    all_reports: list[tuple[str, str]] = []  # (report text, trend) for pair building
    n_studies = 0

    for p_idx in range(spec.n_patients):
        rng = np.random.default_rng([seed, p_idx])
        patient_id = f"p{p_idx:04d}"
        n_visits = 1 if p_idx < n_singles else spec.seq_len
        states = _sample_trajectory(rng, n_visits)
        dates = _visit_dates(rng, n_visits)
        # Trend synonyms are drawn in a random order and the first phrasing
        # not already used in this sequence wins, so repeated (bucket, trend)
        # states still read differently without the word choice leaking the
        # visit index. The first visit draws from its own no-predecessor list.
        seen_reports: set[str] = set()
        for t, state in enumerate(states):
            study_id = f"{patient_id}v{t:02d}"
            frontal_rel = f"images/{study_id}_f.pgm"
            lateral_rel = f"images/{study_id}_l.pgm"
            report_rel = f"reports/{study_id}.txt"
            write_pgm(out / frontal_rel, render_frontal(state.severity, spec.image_size))
            write_pgm(out / lateral_rel, render_lateral(state.severity, state.depth, spec.image_size))
            synonyms = TREND_SYNONYMS[state.trend]
            order = [int(i) for i in rng.permutation(len(synonyms))]
            report = next(
                (
                    cand
                    for i in order
                    if (cand := render_report(state.severity, synonyms[i], state.depth)) not in seen_reports
                ),
                render_report(state.severity, synonyms[order[0]], state.depth),
            )
            seen_reports.add(report)
            (out / report_rel).write_text(report + "\n", encoding="utf-8")
            manifest_rows.append(
                f"{patient_id}|{study_id}|{dates[t]}|{frontal_rel}|{lateral_rel}|{report_rel}"
            )
            label_rows.append(f"{study_id}|{state.severity:.6f}|{state.trend}")
            if state.trend != NO_TREND:
                all_reports.append((report, state.trend))
            n_studies += 1

    (out / "manifest.psv").write_text("\n".join(manifest_rows) + "\n", encoding="utf-8")
    (out / "labels.psv").write_text("\n".join(label_rows) + "\n", encoding="utf-8")
    (out / "genspec.json").write_text(
        json.dumps({**asdict(spec), "seed": seed}, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )

    pairs = build_sentence_pairs(all_reports, spec.n_sentence_pairs, np.random.default_rng([seed, 10**6]))
    (out / "sentence_pairs.psv").write_text(
        "\n".join(f"{a}|{b}|{label}" for a, b, label in pairs) + "\n", encoding="utf-8"
    )
    (out / "prompts.psv").write_text(
        "\n".join(f"{cls}|{text}" for cls, text in build_zeroshot_prompts()) + "\n",
        encoding="utf-8",
    )

    return {
        "n_patients": spec.n_patients,
        "n_studies": n_studies,
        "n_singletons": n_singles,
        "n_sentence_pairs": len(pairs),
    }


def build_sentence_pairs(
    reports: list[tuple[str, str]], n_pairs: int, rng: np.random.Generator
) -> list[tuple[str, str, str]]:
    """Single-word swap pairs: same-meaning synonym = paraphrase, cross-trend
    swap = contradiction. Labels alternate so the set is balanced."""
    if not reports:
        return []
    pairs: list[tuple[str, str, str]] = []
    for i in range(n_pairs):
        report, trend = reports[int(rng.integers(len(reports)))]
        words = report.split()
        trend_word = words[-2]  # template: ... trend <word> [SEP]
        if i % 2 == 0:
            alternatives = [w for w in TREND_SYNONYMS[trend] if w != trend_word]
            replacement = str(rng.choice(alternatives))
            label = "paraphrase"
        else:
            other_trends = [t for t in TREND_CLASSES if t != trend]
            other = other_trends[int(rng.integers(len(other_trends)))]
            replacement = str(rng.choice(TREND_SYNONYMS[other]))
            label = "contradiction"
        swapped = words[:-2] + [replacement, words[-1]]
        pairs.append((report, " ".join(swapped), label))
    return pairs


def build_zeroshot_prompts() -> list[tuple[str, str]]:
    """Fixed prompt set: 4 high-severity (pos) and 4 low-severity (neg) texts."""
    pos = [
        "[CLS] finding severe trend worsening [SEP]",
        "[CLS] finding severe trend stable [SEP]",
        "[CLS] finding moderate trend worsening [SEP]",
        "[CLS] finding severe trend increasing [SEP]",
    ]
    neg = [
        "[CLS] finding minimal trend improving [SEP]",
        "[CLS] finding minimal trend stable [SEP]",
        "[CLS] finding mild trend improving [SEP]",
        "[CLS] finding minimal trend resolving [SEP]",
    ]
    return [("pos", p) for p in pos] + [("neg", n) for n in neg]


def read_labels(path: str | Path) -> dict[str, tuple[float, str]]:
    """Parse labels.psv into {study_id: (severity, trend)}."""
    labels: dict[str, tuple[float, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            study_id, severity, trend = parts
            if trend not in TREND_CLASSES and trend != NO_TREND:
                raise ValueError(f"{path}:{lineno}: unknown trend {trend!r}")
            labels[study_id] = (float(severity), trend)
    return labels


def label_progression(
    seq: SequenceRecord,
    labels: dict[str, tuple[float, str]],
    dead_band: float = EPS_TREND,
) -> list[str]:
    """Trend class for each consecutive (prior, current) study pair.

    Recomputed from recorded severities with the dead-band rule, so it works
    for any labels mapping, not only generator output. Returns length-1
    fewer entries than the sequence.
    """
    for study_id in seq.study_ids:
        if study_id not in labels:
            raise KeyError(f"sequence {seq.sequence_id}: study {study_id} missing from labels")
    severities = [labels[s][0] for s in seq.study_ids]
    return [
        trend_from_delta(curr - prev, dead_band)
        for prev, curr in zip(severities, severities[1:])
    ]
