"""Training loop: batch composition, combined loss, optimization, grad checks.

Batches are composed at sequence granularity: an epoch shuffles the pool of
sequences (full-length and singleton alike) and chunks it, so mixed batches
arise naturally. The alignment losses consume every pair in the batch;
the cycle losses consume only sequences with at least two studies.

The combined objective is

    total = global + lambda1 * (token_local + patch_local) + lambda2 * cycle

and every step appends one row to metrics.csv with the header

    step,global,vla,tla,fmc_i,rmr_i,fmc_t,rmr_t,total,lr,cycle_back_acc

Runs with the same config and corpus reproduce that file byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import Tensor, nn

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import Corpus, SequenceRecord, Vocabulary, load_corpus
from .encoders import EncoderConfig, ImageEncoder, TextEncoder
from .spatial import PairWeighter, global_alignment_loss, local_alignment_loss
from .temporal import TemporalParams, cycle_back_accuracy, temporal_loss

METRICS_HEADER = "step,global,vla,tla,fmc_i,rmr_i,fmc_t,rmr_t,total,lr,cycle_back_acc"


class DivergenceError(RuntimeError):
    """Raised when a loss component stops being finite."""


@dataclass
class TrainConfig:
    lr: float = 4e-5
    init_lr: float = 1e-8  # warmup starting point
    weight_decay: float = 0.05
    warmup_epochs: int = 1
    epochs: int = 10
    batch_sequences: int = 8
    lambda1: float = 1.0  # weight of the local alignment losses
    lambda2: float = 1.0  # weight of the cycle-consistency losses
    tau1: float = 0.07  # global alignment temperature
    tau2: float = 0.1  # local alignment temperature
    delta: float = 2.0  # regression trust radius
    lambda_reg: float = 0.001  # log-variance regularizer weight
    sigma_floor: float = 1e-6
    distance_mode: str = "squared_euclidean"
    similarity: str = "dot"
    grad_clip: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 0  # extra checkpoint cadence in steps, 0 = final only
    seed: int = 0

    def temporal_params(self) -> TemporalParams:
        return TemporalParams(
            delta=self.delta,
            lambda_reg=self.lambda_reg,
            sigma_floor=self.sigma_floor,
            distance_mode=self.distance_mode,
        )


@dataclass
class LossBreakdown:
    global_loss: float
    vla: float  # token-side local alignment
    tla: float  # patch-side local alignment
    fmc_image: float
    rmr_image: float
    fmc_text: float
    rmr_text: float
    total: float
    cycle_back: float = float("nan")  # batch-level diagnostic, not a loss

    def components(self) -> dict[str, float]:
        return {
            "global": self.global_loss,
            "vla": self.vla,
            "tla": self.tla,
            "fmc_i": self.fmc_image,
            "rmr_i": self.rmr_image,
            "fmc_t": self.fmc_text,
            "rmr_t": self.rmr_text,
        }


class PretrainModel(nn.Module):
    """Both encoders plus the learned local-weighting parameters."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.token_weighter = PairWeighter(cfg.proj_dim)
        self.patch_weighter = PairWeighter(cfg.proj_dim)
        self.double()


@dataclass
class Batch:
    frontal: Tensor  # (P, S, S)
    lateral: Tensor  # (P, S, S), zeros where has_lateral is False
    has_lateral: Tensor  # (P,) bool
    tokens: Tensor  # (P, W) int64
    pad_mask: Tensor  # (P, W) bool
    seq_slices: list[tuple[int, int]] = field(default_factory=list)  # (start, length)

    @property
    def n_pairs(self) -> int:
        return self.frontal.shape[0]


class PairStore:
    """All study tensors of a corpus, loaded once."""

    def __init__(self, corpus: Corpus, max_text_len: int):
        self.corpus = corpus
        self.max_text_len = max_text_len
        self._cache: dict[str, tuple[Tensor, Tensor, bool, Tensor, Tensor]] = {}
        for record in corpus.records:
            pair = corpus.pair(record.study_id, max_text_len)
            self._cache[record.study_id] = (
                torch.from_numpy(pair.frontal),
                torch.from_numpy(pair.lateral),
                pair.has_lateral,
                torch.from_numpy(pair.tokens),
                torch.from_numpy(pair.pad_mask),
            )

    def batch(self, sequences: list[SequenceRecord]) -> Batch:
        frontal, lateral, has_lat, tokens, pads = [], [], [], [], []
        slices: list[tuple[int, int]] = []
        cursor = 0
        for seq in sequences:
            slices.append((cursor, seq.length))
            for study_id in seq.study_ids:
                f, l, h, t, p = self._cache[study_id]
                frontal.append(f)
                lateral.append(l)
                has_lat.append(h)
                tokens.append(t)
                pads.append(p)
                cursor += 1
        return Batch(
            frontal=torch.stack(frontal),
            lateral=torch.stack(lateral),
            has_lateral=torch.tensor(has_lat, dtype=torch.bool),
            tokens=torch.stack(tokens),
            pad_mask=torch.stack(pads),
            seq_slices=slices,
        )


def compose_batches(
    sequences: list[SequenceRecord], batch_sequences: int, rng: np.random.Generator
) -> list[list[SequenceRecord]]:
    """One epoch's batches: shuffle the sequence pool, chunk without
    replacement; the final short chunk is kept."""
    if batch_sequences < 1:
        raise ValueError(f"batch_sequences must be >= 1, got {batch_sequences}")
    order = rng.permutation(len(sequences))
    return [
        [sequences[j] for j in order[i : i + batch_sequences]]
        for i in range(0, len(order), batch_sequences)
    ]


def forward_features(
    model: PretrainModel, batch: Batch
) -> tuple[Tensor, Tensor, list[Tensor], list[Tensor]]:
    """Encode a batch into globals plus per-pair local feature lists.

    Local lists already exclude padded token rows and, for studies without
    a lateral view, the lateral patch rows.
    """
    xg, patches = model.image_encoder(batch.frontal, batch.lateral)
    rg, token_feats = model.text_encoder(batch.tokens, batch.pad_mask)
    n_p = model.cfg.n_patches
    image_locals = [
        patches[i] if bool(batch.has_lateral[i]) else patches[i, :n_p]
        for i in range(batch.n_pairs)
    ]
    text_locals = [token_feats[i][~batch.pad_mask[i]] for i in range(batch.n_pairs)]
    return xg, rg, image_locals, text_locals


def total_loss(
    model: PretrainModel, batch: Batch, cfg: TrainConfig
) -> tuple[LossBreakdown, Tensor]:
    """Combined objective over one batch; raises DivergenceError on
    non-finite components (diagnostic names the component)."""
    xg, rg, image_locals, text_locals = forward_features(model, batch)
    g_loss = global_alignment_loss(xg, rg, cfg.tau1, cfg.similarity)
    vla, tla = local_alignment_loss(
        image_locals, text_locals, model.token_weighter, model.patch_weighter,
        cfg.tau2, cfg.similarity,
    )
    tparams = cfg.temporal_params()
    temporal_seqs = [(s, n) for s, n in batch.seq_slices if n >= 2]
    zero = torch.zeros((), dtype=xg.dtype)
    fmc_i = rmr_i = fmc_t = rmr_t = zero
    accs: list[float] = []
    if temporal_seqs:
        parts = []
        for start, n in temporal_seqs:
            br = temporal_loss(xg[start : start + n], rg[start : start + n], tparams)
            parts.append(br)
            accs.append(cycle_back_accuracy(xg[start : start + n], rg[start : start + n], tparams))
        count = len(parts)
        fmc_i = sum(p.fmc_image for p in parts) / count
        rmr_i = sum(p.rmr_image for p in parts) / count
        fmc_t = sum(p.fmc_text for p in parts) / count
        rmr_t = sum(p.rmr_text for p in parts) / count
    total = g_loss + cfg.lambda1 * (vla + tla) + cfg.lambda2 * (fmc_i + rmr_i + fmc_t + rmr_t)
    breakdown = LossBreakdown(
        global_loss=float(g_loss.detach()),
        vla=float(vla.detach()),
        tla=float(tla.detach()),
        fmc_image=float(fmc_i.detach()),
        rmr_image=float(rmr_i.detach()),
        fmc_text=float(fmc_t.detach()),
        rmr_text=float(rmr_t.detach()),
        total=float(total.detach()),
        cycle_back=float(np.mean(accs)) if accs else float("nan"),
    )
    for name, value in {**breakdown.components(), "total": breakdown.total}.items():
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss component {name!r}: {value}")
    return breakdown, total


def lr_at_step(
    step: int, total_steps: int, warmup_steps: int, lr: float, init_lr: float
) -> float:
    """Linear warmup from init_lr to lr, then cosine decay to zero.

    Strictly increasing over the warmup steps, never increasing after.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return init_lr + (lr - init_lr) * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _fmt(value: float) -> str:
    return repr(value)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    steps: int
    final: LossBreakdown | None


def model_state_arrays(model: PretrainModel) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in model.state_dict().items()}


def save_model(path: str | Path, model: PretrainModel, cfg: TrainConfig,
               vocab: Vocabulary, step: int) -> None:
    meta = {
        "encoder_config": asdict(model.cfg),
        "train_config": asdict(cfg),
        "vocab": vocab.tokens,
        "step": step,
    }
    save_checkpoint(path, model_state_arrays(model), meta)


def load_model(path: str | Path) -> tuple[PretrainModel, TrainConfig, Vocabulary, dict]:
    meta, arrays = load_checkpoint(path)
    enc_cfg = EncoderConfig(**meta["encoder_config"])
    model = PretrainModel(enc_cfg)
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.load_state_dict(state)
    cfg = TrainConfig(**meta["train_config"])
    return model, cfg, Vocabulary(meta["vocab"]), meta


def train(
    cfg: TrainConfig,
    corpus: Corpus | str | Path,
    out_dir: str | Path,
    enc_cfg: EncoderConfig | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run the optimization loop over a corpus directory.

    Writes metrics.csv and checkpoint_final.stvc into out_dir (plus
    checkpoint_step*.stvc at the configured cadence). On divergence the
    last good parameters are saved before the error propagates.
    """
    torch.set_num_threads(1)  # fixed reduction order, reproducible logs
    if not isinstance(corpus, Corpus):
        corpus = load_corpus(corpus)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if enc_cfg is None:
        enc_cfg = EncoderConfig(image_size=corpus.image_size, vocab_size=len(corpus.vocab))

    torch.manual_seed(cfg.seed)
    model = PretrainModel(enc_cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    store = PairStore(corpus, enc_cfg.max_text_len)
    sequences = corpus.sequences()
    steps_per_epoch = max(1, math.ceil(len(sequences) / cfg.batch_sequences))
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)

    metrics_path = out / "metrics.csv"
    final_path = out / "checkpoint_final.stvc"
    step = 0
    last: LossBreakdown | None = None
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        metrics.write(METRICS_HEADER + "\n")
        for _epoch in range(cfg.epochs):
            for group in compose_batches(sequences, cfg.batch_sequences, rng):
                lr = lr_at_step(step, total_steps, warmup_steps, cfg.lr, cfg.init_lr)
                for param_group in optimizer.param_groups:
                    param_group["lr"] = lr
                batch = store.batch(group)
                try:
                    breakdown, loss = total_loss(model, batch, cfg)
                except DivergenceError:
                    save_model(final_path, model, cfg, corpus.vocab, step)
                    raise
                optimizer.zero_grad()
                loss.backward()
                if cfg.grad_clip > 0:
                    nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                row = [str(step)] + [
                    _fmt(v)
                    for v in (
                        breakdown.global_loss, breakdown.vla, breakdown.tla,
                        breakdown.fmc_image, breakdown.rmr_image,
                        breakdown.fmc_text, breakdown.rmr_text, breakdown.total,
                    )
                ] + [_fmt(lr), _fmt(breakdown.cycle_back)]
                metrics.write(",".join(row) + "\n")
                step += 1
                last = breakdown
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_model(out / f"checkpoint_step{step:06d}.stvc", model, cfg,
                               corpus.vocab, step)
                if log_fn and step % 50 == 0:
                    log_fn(
                        f"step {step}/{total_steps} total={breakdown.total:.4f} "
                        f"cycle_back={breakdown.cycle_back:.3f}"
                    )
    save_model(final_path, model, cfg, corpus.vocab, step)
    return TrainResult(checkpoint_path=final_path, metrics_path=metrics_path,
                       steps=step, final=last)


def corpus_cycle_back_accuracy(
    model: PretrainModel, store: PairStore, sequences: list[SequenceRecord],
    tparams: TemporalParams,
) -> float:
    """Mean per-sequence cycle-back accuracy over all multi-study sequences."""
    multi = [s for s in sequences if s.length >= 2]
    if not multi:
        raise ValueError("no multi-study sequences in corpus")
    accs = []
    with torch.no_grad():
        for seq in multi:
            batch = store.batch([seq])
            xg, _ = model.image_encoder(batch.frontal, batch.lateral)
            rg, _ = model.text_encoder(batch.tokens, batch.pad_mask)
            accs.append(cycle_back_accuracy(xg, rg, tparams))
    return float(np.mean(accs))


# --- gradient checking ----------------------------------------------------

GRAD_CHECK_LOSSES = ("global", "local", "fmc", "rmr", "total")


@dataclass
class GradCheckResult:
    loss_name: str
    max_rel_err: float
    worst_param: str
    n_elements: int


def _local_fixture_modules(dim: int, gen: torch.Generator) -> tuple[PairWeighter, PairWeighter]:
    token_w = PairWeighter(dim).double()
    patch_w = PairWeighter(dim).double()
    for module in (token_w, patch_w):
        for p in module.parameters():
            with torch.no_grad():
                p.add_(0.2 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return token_w, patch_w


def _build_grad_fixture(
    loss_name: str, seed: int
) -> tuple[dict[str, Tensor], Callable[[], Tensor]]:
    """Leaf tensors plus a closure recomputing the selected loss from them.

    Sizes follow the reference fixtures: d=8, n=4 pairs, W=4 token rows,
    M=6 patch rows.
    """
    d, n, w_rows, m_rows = 8, 4, 4, 6
    gen = torch.Generator().manual_seed(seed)

    def randn(*shape: int) -> Tensor:
        return (0.6 * torch.randn(*shape, generator=gen, dtype=torch.float64)).requires_grad_(True)

    cfg = TrainConfig()
    tparams = cfg.temporal_params()
    leaves: dict[str, Tensor] = {}

    if loss_name == "global":
        leaves["image_globals"] = randn(n, d)
        leaves["text_globals"] = randn(n, d)
        closure = lambda: global_alignment_loss(
            leaves["image_globals"], leaves["text_globals"], cfg.tau1
        )
    elif loss_name in ("fmc", "rmr"):
        leaves["image_globals"] = randn(n, d)
        leaves["text_globals"] = randn(n, d)

        def closure() -> Tensor:
            br = temporal_loss(leaves["image_globals"], leaves["text_globals"], tparams)
            if loss_name == "fmc":
                return br.fmc_image + br.fmc_text
            return br.rmr_image + br.rmr_text

    elif loss_name == "local":
        leaves["patches"] = randn(m_rows, d)
        leaves["tokens"] = randn(w_rows, d)
        token_w, patch_w = _local_fixture_modules(d, gen)
        for name, p in token_w.named_parameters():
            leaves[f"token_weighter.{name}"] = p
        for name, p in patch_w.named_parameters():
            leaves[f"patch_weighter.{name}"] = p

        def closure() -> Tensor:
            vla, tla = local_alignment_loss(
                [leaves["patches"]], [leaves["tokens"]], token_w, patch_w, cfg.tau2
            )
            return vla + tla

    elif loss_name == "total":
        leaves["image_globals"] = randn(n, d)
        leaves["text_globals"] = randn(n, d)
        for i in range(n):
            leaves[f"patches{i}"] = randn(m_rows, d)
            leaves[f"tokens{i}"] = randn(w_rows, d)
        token_w, patch_w = _local_fixture_modules(d, gen)
        for name, p in token_w.named_parameters():
            leaves[f"token_weighter.{name}"] = p
        for name, p in patch_w.named_parameters():
            leaves[f"patch_weighter.{name}"] = p

        def closure() -> Tensor:
            g = global_alignment_loss(leaves["image_globals"], leaves["text_globals"], cfg.tau1)
            vla, tla = local_alignment_loss(
                [leaves[f"patches{i}"] for i in range(n)],
                [leaves[f"tokens{i}"] for i in range(n)],
                token_w, patch_w, cfg.tau2,
            )
            br = temporal_loss(leaves["image_globals"], leaves["text_globals"], tparams)
            return g + cfg.lambda1 * (vla + tla) + cfg.lambda2 * br.total

    else:
        raise ValueError(f"unknown loss {loss_name!r}; choose from {GRAD_CHECK_LOSSES}")
    return leaves, closure


def grad_check(loss_name: str, seed: int = 0, eps: float = 1e-5) -> GradCheckResult:
    """Compare backward-pass gradients against central finite differences.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-3); the result
    carries the maximum and where it occurred.
    """
    leaves, closure = _build_grad_fixture(loss_name, seed)
    loss = closure()
    analytic = torch.autograd.grad(loss, list(leaves.values()))
    max_rel, worst, count = 0.0, "", 0
    for (name, leaf), grad in zip(leaves.items(), analytic):
        flat = leaf.detach().reshape(-1)
        grad_flat = grad.reshape(-1)
        for idx in range(flat.numel()):
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + eps
                f_plus = float(closure())
                flat[idx] = original - eps
                f_minus = float(closure())
                flat[idx] = original
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(grad_flat[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            count += 1
            if rel > max_rel:
                max_rel, worst = rel, f"{name}[{idx}]"
    return GradCheckResult(loss_name=loss_name, max_rel_err=max_rel,
                           worst_param=worst, n_elements=count)
