"""Bidirectional cycle-consistency losses over a study sequence.

Given per-study image globals X = (x_1..x_n) and text globals R =
(r_1..r_n), a cycle starts at x_t, forms a soft nearest neighbor over R,
and comes back as a distribution beta over X. Two losses score the cycle:

  matching    cross-entropy pinning the forward soft-neighbor weights to
              the starting index
  regression  the return distribution's mean must land on the starting
              timestep, scored quadratically inside a trust radius (scaled
              by the distribution's variance, with a log-variance
              regularizer) and linearly outside it

Both are computed for image-started and text-started cycles and summed
over all starting positions. Timestep values on the regression axis are
1..n; function arguments index positions 0-based.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
from torch import Tensor

DISTANCE_MODES = ("squared_euclidean", "neg_dot")
LOG_CLAMP = 1e-12


@dataclass
class TemporalParams:
    delta: float = 2.0  # trust radius separating the quadratic and linear branches
    lambda_reg: float = 0.001  # weight of the log-variance regularizer
    sigma_floor: float = 1e-6  # lower clamp on the return distribution's variance
    distance_mode: str = "squared_euclidean"

    def __post_init__(self) -> None:
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"unknown distance_mode {self.distance_mode!r}")
        if self.delta <= 0 or self.sigma_floor <= 0:
            raise ValueError("delta and sigma_floor must be positive")


def pairwise_distance(a: Tensor, b: Tensor, mode: str) -> Tensor:
    """(n, d) x (m, d) -> (n, m) values whose negation feeds the softmax.

    squared_euclidean is the default; neg_dot treats the raw inner product
    as the distance (so similar vectors get LOW weight — kept selectable
    for comparison, not used by default).
    """
    if mode == "squared_euclidean":
        return (a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(-1)
    if mode == "neg_dot":
        return a @ b.T
    raise ValueError(f"unknown distance_mode {mode!r}")


def soft_nn(query: Tensor, refs: Tensor, params: TemporalParams) -> tuple[Tensor, Tensor]:
    """Soft nearest neighbor of one query among refs.

    Returns (attended (d,), weights (n,)) with weights =
    softmax(-distance(query, refs)).
    """
    dist = pairwise_distance(query.unsqueeze(0), refs, params.distance_mode)[0]
    weights = torch.softmax(-dist, dim=0)
    return weights @ refs, weights


def fmc_loss(alpha: Tensor, t: int) -> Tensor:
    """Cross-entropy of the soft-neighbor weights against one-hot at t."""
    if not 0 <= t < alpha.shape[0]:
        raise ValueError(f"position {t} out of range for n={alpha.shape[0]}")
    a_t = alpha[t]
    if float(a_t) < LOG_CLAMP:
        warnings.warn(f"matching weight {float(a_t):.3e} clamped to {LOG_CLAMP}")
        a_t = torch.clamp(a_t, min=LOG_CLAMP)
    return -torch.log(a_t)


def reverse_distribution(attended: Tensor, refs: Tensor, params: TemporalParams) -> Tensor:
    """Return distribution of the cycle: softmax(-distance(attended, refs))."""
    dist = pairwise_distance(attended.unsqueeze(0), refs, params.distance_mode)[0]
    return torch.softmax(-dist, dim=0)


def rmr_loss(beta: Tensor, t: int, params: TemporalParams) -> Tensor:
    """Score how well the return distribution regresses the start position.

    t is the 0-based position; the regression target is t + 1 on the 1..n
    timestep axis. Inside the trust radius the squared error is scaled by
    the distribution's variance plus a log-sigma regularizer; outside, the
    penalty grows linearly.
    """
    n = beta.shape[0]
    if not 0 <= t < n:
        raise ValueError(f"position {t} out of range for n={n}")
    steps = torch.arange(1, n + 1, dtype=beta.dtype, device=beta.device)
    mu = beta @ steps
    var = torch.clamp(beta @ (steps - mu).pow(2), min=params.sigma_floor)
    err = torch.abs((t + 1) - mu)
    quadratic = err.pow(2) / var + params.lambda_reg * 0.5 * torch.log(var)
    linear = params.delta * err - 0.5 * params.delta**2
    return torch.where(err <= params.delta, quadratic, linear)


@dataclass
class TemporalBreakdown:
    fmc_image: Tensor  # image-started matching loss, summed over positions
    rmr_image: Tensor
    fmc_text: Tensor
    rmr_text: Tensor

    @property
    def total(self) -> Tensor:
        return self.fmc_image + self.rmr_image + self.fmc_text + self.rmr_text


def _one_direction(
    starts: Tensor, refs: Tensor, params: TemporalParams
) -> tuple[Tensor, Tensor, Tensor]:
    """All cycles starting from `starts` through `refs` and back.

    Returns (fmc_sum, rmr_sum, return_distributions (n, n)); row t of the
    matrix is the cycle's return distribution for start position t.
    """
    n = starts.shape[0]
    alphas = torch.softmax(-pairwise_distance(starts, refs, params.distance_mode), dim=1)
    diag = torch.diagonal(alphas)
    if bool((diag < LOG_CLAMP).any()):
        warnings.warn("matching weights below clamp threshold in sequence loss")
    fmc = -torch.log(torch.clamp(diag, min=LOG_CLAMP)).sum()

    attended = alphas @ refs  # (n, d)
    betas = torch.softmax(-pairwise_distance(attended, starts, params.distance_mode), dim=1)
    steps = torch.arange(1, n + 1, dtype=starts.dtype, device=starts.device)
    mu = betas @ steps  # (n,)
    var = torch.clamp((betas * (steps.unsqueeze(0) - mu.unsqueeze(1)).pow(2)).sum(1),
                      min=params.sigma_floor)
    err = torch.abs(steps - mu)  # target for row t is the value t + 1
    quadratic = err.pow(2) / var + params.lambda_reg * 0.5 * torch.log(var)
    linear = params.delta * err - 0.5 * params.delta**2
    rmr = torch.where(err <= params.delta, quadratic, linear).sum()
    return fmc, rmr, betas


def temporal_loss(
    image_globals: Tensor, text_globals: Tensor, params: TemporalParams
) -> TemporalBreakdown:
    """Both cycle directions over one sequence of n >= 1 aligned pairs."""
    if image_globals.shape != text_globals.shape or image_globals.ndim != 2:
        raise ValueError(
            f"expected matching (n, d) sequences, got {tuple(image_globals.shape)} "
            f"and {tuple(text_globals.shape)}"
        )
    fmc_i, rmr_i, _ = _one_direction(image_globals, text_globals, params)
    fmc_t, rmr_t, _ = _one_direction(text_globals, image_globals, params)
    return TemporalBreakdown(fmc_image=fmc_i, rmr_image=rmr_i, fmc_text=fmc_t, rmr_text=rmr_t)


def cycle_back_accuracy(
    image_globals: Tensor, text_globals: Tensor, params: TemporalParams
) -> float:
    """Fraction of cycles whose return distribution peaks at the start.

    Ties resolve to the lowest index (numpy argmax), both directions
    counted. Chance level for near-uniform distributions is 1/n.
    """
    with torch.no_grad():
        _, _, beta_img = _one_direction(image_globals, text_globals, params)
        _, _, beta_txt = _one_direction(text_globals, image_globals, params)
    hits = 0
    n = image_globals.shape[0]
    for betas in (beta_img, beta_txt):
        peaks = betas.cpu().numpy().argmax(axis=1)  # first max on ties
        hits += int((peaks == range(n)).sum())
    return hits / (2 * n)


def beta_rows(
    image_globals: Tensor, text_globals: Tensor, params: TemporalParams
) -> list[tuple[str, int, list[float]]]:
    """Per-cycle return distributions for diagnostics.

    Rows are (direction, start position 1-based, beta values); consumed by
    the report writer's histogram builder.
    """
    with torch.no_grad():
        _, _, beta_img = _one_direction(image_globals, text_globals, params)
        _, _, beta_txt = _one_direction(text_globals, image_globals, params)
    rows: list[tuple[str, int, list[float]]] = []
    for name, betas in (("image", beta_img), ("text", beta_txt)):
        for t, row in enumerate(betas):
            rows.append((name, t + 1, [float(v) for v in row]))
    return rows
