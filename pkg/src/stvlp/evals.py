"""Downstream probes over trained checkpoints, plus report emission.

Probes never fine-tune the encoders: they read frozen features.

  temporal probe   concatenate the image globals of consecutive studies,
                   classify the trend between them with a linear SVM under
                   k-fold cross-validation, repeated over 3 fold seeds
  sentence probe   cosine similarity between paired report variants,
                   ranked (AUROC) and thresholded (threshold picked by
                   10-fold cross-validated accuracy, applied to the set)
  zero-shot        class prototypes are the mean text embedding of 4
                   prompts per class; images classify to the nearer
                   prototype by cosine
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import Corpus, load_corpus
from .svm import LinearSVM, kfold_indices
from .synthetic import TREND_CLASSES, label_progression, read_labels
from .temporal import beta_rows
from .trainer import PairStore, PretrainModel, load_model

PROBE_SEEDS = 3


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    auroc: float | None = None
    f1: float | None = None
    accuracy_std: float = 0.0
    per_class: dict[str, float] = field(default_factory=dict)
    folds: int = 0
    seed: int = 0


# --- ranking metrics --------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-statistic AUROC; ties count half. None if a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def f1_score(labels: np.ndarray, preds: np.ndarray) -> float:
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# --- probe core -------------------------------------------------------------


def probe_features(
    features: np.ndarray,
    labels: np.ndarray,
    class_names: list[str],
    folds: int,
    seed: int,
    task: str,
    n_seeds: int = PROBE_SEEDS,
) -> ProbeResult:
    """k-fold cross-validated linear classification of frozen features.

    Features are standardized with training-fold statistics. Folds whose
    training split misses a class are skipped with a warning. Accuracy is
    the mean over fold seeds (std recorded alongside); per-class entries
    are recalls pooled over every test fold.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    seed_accs: list[float] = []
    pooled_true: list[np.ndarray] = []
    pooled_pred: list[np.ndarray] = []
    for s in range(n_seeds):
        fold_accs: list[float] = []
        for train_idx, test_idx in kfold_indices(len(y), folds, seed + s):
            if len(np.unique(y[train_idx])) < len(class_names):
                warnings.warn(f"{task}: fold missing a class in training split, skipped")
                continue
            mean = x[train_idx].mean(axis=0)
            std = x[train_idx].std(axis=0)
            std[std < 1e-12] = 1.0
            clf = LinearSVM().fit((x[train_idx] - mean) / std, y[train_idx])
            pred = clf.predict((x[test_idx] - mean) / std)
            fold_accs.append(float((pred == y[test_idx]).mean()))
            pooled_true.append(y[test_idx])
            pooled_pred.append(pred)
        if fold_accs:
            seed_accs.append(float(np.mean(fold_accs)))
    if not seed_accs:
        raise ValueError(f"{task}: every fold was skipped")
    true_all = np.concatenate(pooled_true)
    pred_all = np.concatenate(pooled_pred)
    per_class = {
        name: float((pred_all[true_all == k] == k).mean()) if (true_all == k).any() else float("nan")
        for k, name in enumerate(class_names)
    }
    return ProbeResult(
        task=task,
        accuracy=float(np.mean(seed_accs)),
        accuracy_std=float(np.std(seed_accs)),
        per_class=per_class,
        folds=folds,
        seed=seed,
    )


# --- feature extraction -----------------------------------------------------


def _study_globals(model: PretrainModel, store: PairStore, corpus: Corpus) -> dict[str, np.ndarray]:
    """Image global feature per study id, computed without gradients."""
    out: dict[str, np.ndarray] = {}
    records = corpus.records
    with torch.no_grad():
        for i in range(0, len(records), 64):
            chunk = records[i : i + 64]
            ids = [r.study_id for r in chunk]
            batch = store.batch([_singleton_sequence(sid) for sid in ids])
            xg, _ = model.image_encoder(batch.frontal, batch.lateral)
            for sid, vec in zip(ids, xg):
                out[sid] = vec.numpy().copy()
    return out


def _singleton_sequence(study_id: str):
    from .corpus import SequenceRecord

    return SequenceRecord(sequence_id=study_id, patient_id="", study_ids=(study_id,))


def trend_pair_features(
    model: PretrainModel, corpus: Corpus, labels_path: str | Path
) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated (prior, current) image globals with trend class labels."""
    store = PairStore(corpus, model.cfg.max_text_len)
    globals_by_study = _study_globals(model, store, corpus)
    labels = read_labels(labels_path)
    class_index = {name: k for k, name in enumerate(TREND_CLASSES)}
    feats: list[np.ndarray] = []
    targets: list[int] = []
    for seq in corpus.sequences():
        if seq.length < 2:
            continue
        trends = label_progression(seq, labels)
        for t, trend in enumerate(trends):
            prev_id, curr_id = seq.study_ids[t], seq.study_ids[t + 1]
            feats.append(np.concatenate([globals_by_study[prev_id], globals_by_study[curr_id]]))
            targets.append(class_index[trend])
    if not feats:
        raise ValueError("corpus has no multi-study sequences to probe")
    return np.stack(feats), np.asarray(targets, dtype=np.int64)


def temporal_probe(
    checkpoint_path: str | Path,
    corpus_dir: str | Path,
    folds: int,
    seed: int = 0,
) -> ProbeResult:
    """Linear separability of trend classes in frozen consecutive-pair features."""
    model, _, _, _ = load_model(checkpoint_path)
    model.eval()
    corpus = load_corpus(corpus_dir)
    feats, targets = trend_pair_features(model, corpus, Path(corpus_dir) / "labels.psv")
    return probe_features(
        feats, targets, list(TREND_CLASSES), folds=folds, seed=seed, task="temporal_probe"
    )


# --- sentence similarity ----------------------------------------------------


def read_sentence_pairs(path: str | Path) -> list[tuple[str, str, str]]:
    pairs: list[tuple[str, str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 3 or parts[2] not in ("paraphrase", "contradiction"):
                raise ValueError(f"{path}:{lineno}: bad sentence pair row")
            pairs.append((parts[0], parts[1], parts[2]))
    return pairs


def _encode_texts(model: PretrainModel, vocab, texts: list[str]) -> np.ndarray:
    w = model.cfg.max_text_len
    ids, masks = zip(*(vocab.encode(t, w) for t in texts))
    tokens = torch.from_numpy(np.stack(ids))
    pad = torch.from_numpy(np.stack(masks))
    with torch.no_grad():
        rg, _ = model.text_encoder(tokens, pad)
    return rg.numpy()


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    num = (a * b).sum(axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    den[den < 1e-12] = 1e-12
    return num / den


def cv_threshold(scores: np.ndarray, labels: np.ndarray, folds: int, seed: int) -> float:
    """Similarity cutoff maximizing mean validation accuracy over k folds.

    Candidates are midpoints between adjacent distinct scores (plus outer
    sentinels); ties resolve to the smallest candidate.
    """
    uniq = np.unique(scores)
    if len(uniq) == 1:
        return float(uniq[0])
    mids = (uniq[:-1] + uniq[1:]) / 2
    candidates = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
    best_thr, best_acc = candidates[0], -1.0
    splits = kfold_indices(len(labels), folds, seed)
    for thr in candidates:
        accs = [
            float(((scores[test] >= thr).astype(int) == labels[test]).mean())
            for _, test in splits
        ]
        acc = float(np.mean(accs))
        if acc > best_acc + 1e-12:
            best_acc, best_thr = acc, float(thr)
    return best_thr


def sentence_similarity_eval(
    checkpoint_path: str | Path,
    pairs: list[tuple[str, str, str]],
    folds: int = 10,
    seed: int = 0,
) -> ProbeResult:
    """Paraphrase-vs-contradiction discrimination by text-global cosine."""
    if not pairs:
        raise ValueError("no sentence pairs provided")
    model, _, vocab, _ = load_model(checkpoint_path)
    model.eval()
    first = _encode_texts(model, vocab, [p[0] for p in pairs])
    second = _encode_texts(model, vocab, [p[1] for p in pairs])
    scores = _cosine(first, second)
    labels = np.array([1 if p[2] == "paraphrase" else 0 for p in pairs], dtype=np.int64)
    thr = cv_threshold(scores, labels, folds=min(folds, len(pairs)), seed=seed)
    preds = (scores >= thr).astype(np.int64)
    per_class = {
        "paraphrase": float((preds[labels == 1] == 1).mean()) if (labels == 1).any() else float("nan"),
        "contradiction": float((preds[labels == 0] == 0).mean()) if (labels == 0).any() else float("nan"),
    }
    return ProbeResult(
        task="sentence_similarity",
        accuracy=float((preds == labels).mean()),
        auroc=auroc(scores, labels),
        f1=f1_score(labels, preds),
        per_class=per_class,
        folds=folds,
        seed=seed,
    )


# --- zero-shot --------------------------------------------------------------


def read_prompts(path: str | Path) -> dict[str, list[str]]:
    prompts: dict[str, list[str]] = {"pos": [], "neg": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cls, _, text = line.partition("|")
            if cls not in prompts or not text:
                raise ValueError(f"{path}:{lineno}: bad prompt row")
            prompts[cls].append(text)
    if not prompts["pos"] or not prompts["neg"]:
        raise ValueError(f"{path}: need both pos and neg prompts")
    return prompts


def zeroshot_eval(
    checkpoint_path: str | Path,
    corpus_dir: str | Path,
    prompts_path: str | Path,
    severity_threshold: float = 0.5,
) -> ProbeResult:
    """Severity classification against mean-prompt class prototypes."""
    model, _, vocab, _ = load_model(checkpoint_path)
    model.eval()
    corpus = load_corpus(corpus_dir)
    prompts = read_prompts(prompts_path)
    proto_pos = _encode_texts(model, vocab, prompts["pos"]).mean(axis=0)
    proto_neg = _encode_texts(model, vocab, prompts["neg"]).mean(axis=0)

    store = PairStore(corpus, model.cfg.max_text_len)
    globals_by_study = _study_globals(model, store, corpus)
    labels_map = read_labels(Path(corpus_dir) / "labels.psv")
    study_ids = [r.study_id for r in corpus.records]
    feats = np.stack([globals_by_study[s] for s in study_ids])
    y = np.array(
        [1 if labels_map[s][0] > severity_threshold else 0 for s in study_ids], dtype=np.int64
    )
    sim_pos = _cosine(feats, np.broadcast_to(proto_pos, feats.shape))
    sim_neg = _cosine(feats, np.broadcast_to(proto_neg, feats.shape))
    preds = (sim_pos > sim_neg).astype(np.int64)
    per_class = {
        "pos": float((preds[y == 1] == 1).mean()) if (y == 1).any() else float("nan"),
        "neg": float((preds[y == 0] == 0).mean()) if (y == 0).any() else float("nan"),
    }
    return ProbeResult(
        task="zeroshot",
        accuracy=float((preds == y).mean()),
        auroc=auroc(sim_pos - sim_neg, y),
        f1=f1_score(y, preds),
        per_class=per_class,
        folds=0,
        seed=0,
    )


# --- diagnostics and report emission ----------------------------------------


def dump_beta_csv(
    checkpoint_path: str | Path, corpus_dir: str | Path, out_path: str | Path
) -> int:
    """Write each multi-study sequence's cycle return distributions.

    Columns: direction, gt_index (1-based), mu, betas (semicolon-joined).
    Returns the row count.
    """
    model, cfg, _, _ = load_model(checkpoint_path)
    model.eval()
    corpus = load_corpus(corpus_dir)
    store = PairStore(corpus, model.cfg.max_text_len)
    tparams = cfg.temporal_params()
    rows: list[str] = []
    with torch.no_grad():
        for seq in corpus.sequences():
            if seq.length < 2:
                continue
            batch = store.batch([seq])
            xg, _ = model.image_encoder(batch.frontal, batch.lateral)
            rg, _ = model.text_encoder(batch.tokens, batch.pad_mask)
            for direction, gt, betas in beta_rows(xg, rg, tparams):
                mu = sum(b * (z + 1) for z, b in enumerate(betas))
                joined = ";".join(repr(b) for b in betas)
                rows.append(f"{direction},{gt},{mu!r},{joined}")
    Path(out_path).write_text(
        "direction,gt_index,mu,betas\n" + "\n".join(rows) + "\n", encoding="utf-8"
    )
    return len(rows)


def save_probe_csv(result: ProbeResult, path: str | Path) -> None:
    per_class = ";".join(f"{k}={v:.6f}" for k, v in sorted(result.per_class.items()))
    auroc_s = "" if result.auroc is None else f"{result.auroc:.6f}"
    f1_s = "" if result.f1 is None else f"{result.f1:.6f}"
    body = (
        "task,accuracy,accuracy_std,auroc,f1,folds,seed,per_class\n"
        f"{result.task},{result.accuracy:.6f},{result.accuracy_std:.6f},"
        f"{auroc_s},{f1_s},{result.folds},{result.seed},{per_class}\n"
    )
    Path(path).write_text(body, encoding="utf-8")


def load_probe_csv(path: str | Path) -> ProbeResult:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 2:
        raise ValueError(f"{path}: empty probe csv")
    fields = lines[1].split(",")
    task, acc, acc_std, auroc_s, f1_s, folds, seed, per_class_s = fields
    per_class = {}
    if per_class_s:
        for item in per_class_s.split(";"):
            key, _, value = item.partition("=")
            per_class[key] = float(value)
    return ProbeResult(
        task=task,
        accuracy=float(acc),
        accuracy_std=float(acc_std),
        auroc=float(auroc_s) if auroc_s else None,
        f1=float(f1_s) if f1_s else None,
        per_class=per_class,
        folds=int(folds),
        seed=int(seed),
    )


def beta_histograms(
    mu_by_gt: dict[int, list[float]], n_steps: int, bin_width: float = 0.25
) -> list[tuple[int, float, float, int]]:
    """Histogram of cycle-return means per ground-truth start index."""
    edges = np.arange(0.5, n_steps + 0.5 + bin_width / 2, bin_width)
    rows: list[tuple[int, float, float, int]] = []
    for gt in sorted(mu_by_gt):
        counts, _ = np.histogram(np.asarray(mu_by_gt[gt]), bins=edges)
        for left, count in zip(edges[:-1], counts):
            rows.append((gt, round(float(left), 4), round(float(left + bin_width), 4), int(count)))
    return rows


def emit_report(in_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Collect probe CSVs (and the optional beta dump) into report files.

    Writes results.csv, summary.txt, and beta_hist.csv (when a dump is
    present). Output bytes are a pure function of the inputs.
    """
    src = Path(in_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    results = [load_probe_csv(p) for p in sorted(src.glob("probe_*.csv"))]
    lines = ["task,accuracy,accuracy_std,auroc,f1,folds,seed,per_class"]
    for r in results:
        per_class = ";".join(f"{k}={v:.6f}" for k, v in sorted(r.per_class.items()))
        auroc_s = "" if r.auroc is None else f"{r.auroc:.6f}"
        f1_s = "" if r.f1 is None else f"{r.f1:.6f}"
        lines.append(
            f"{r.task},{r.accuracy:.6f},{r.accuracy_std:.6f},{auroc_s},{f1_s},"
            f"{r.folds},{r.seed},{per_class}"
        )
    results_path = out / "results.csv"
    results_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written.append(results_path)

    summary = [f"{'task':<22}{'accuracy':>10}{'std':>8}{'auroc':>8}{'f1':>8}"]
    for r in results:
        auroc_s = "-" if r.auroc is None else f"{r.auroc:.4f}"
        f1_s = "-" if r.f1 is None else f"{r.f1:.4f}"
        summary.append(
            f"{r.task:<22}{r.accuracy:>10.4f}{r.accuracy_std:>8.4f}{auroc_s:>8}{f1_s:>8}"
        )
    summary_path = out / "summary.txt"
    summary_path.write_text("\n".join(summary) + "\n", encoding="utf-8")
    written.append(summary_path)

    dump = src / "beta_dump.csv"
    if dump.exists():
        mu_by_gt: dict[int, list[float]] = {}
        n_steps = 0
        for line in dump.read_text(encoding="utf-8").splitlines()[1:]:
            if not line:
                continue
            _, gt, mu, betas = line.split(",")
            mu_by_gt.setdefault(int(gt), []).append(float(mu))
            n_steps = max(n_steps, len(betas.split(";")))
        hist_lines = ["gt_index,bin_left,bin_right,count"]
        for gt, left, right, count in beta_histograms(mu_by_gt, n_steps):
            hist_lines.append(f"{gt},{left},{right},{count}")
        hist_path = out / "beta_hist.csv"
        hist_path.write_text("\n".join(hist_lines) + "\n", encoding="utf-8")
        written.append(hist_path)
    return written
