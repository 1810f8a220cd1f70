"""Cross-modal alignment losses over one batch of image/text pairs.

Two levels:

  global  symmetric InfoNCE between per-study image and text globals, all
          pairs in the batch pooled as negatives
  local   per pair, each text token attends over patch features to build an
          attended visual vector, which is contrasted against the token
          family in both directions; per-token losses are combined by a
          learned softmax weighting driven by the elementwise product of
          token and attended features. The patch side mirrors the whole
          construction with its own weighting parameters.

Similarity is the raw dot product by default; a config switch normalizes
features first (cosine) for ablations. The attention inside the local loss
always uses plain dot products.
"""

from __future__ import annotations

import math
import warnings

import torch
from torch import Tensor, nn

SIMILARITY_MODES = ("dot", "cosine")


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _maybe_normalize(x: Tensor, similarity: str) -> Tensor:
    if similarity == "dot":
        return x
    if similarity == "cosine":
        return torch.nn.functional.normalize(x, dim=-1)
    raise ValueError(f"unknown similarity mode {similarity!r}")


def global_alignment_loss(
    image_globals: Tensor,
    text_globals: Tensor,
    tau: float,
    similarity: str = "dot",
) -> Tensor:
    """Mean of the image-to-text and text-to-image InfoNCE directions.

    Row i of each argument is one positive pair; every other row in the
    batch serves as a negative. A single pair gives loss 0.
    """
    _check_tau(tau)
    if image_globals.shape != text_globals.shape or image_globals.ndim != 2:
        raise ValueError(
            f"expected matching (N, d) features, got {tuple(image_globals.shape)} "
            f"and {tuple(text_globals.shape)}"
        )
    if image_globals.shape[0] < 1:
        raise ValueError("global alignment needs at least one pair")
    xi = _maybe_normalize(image_globals, similarity)
    ri = _maybe_normalize(text_globals, similarity)
    logits = xi @ ri.T / tau  # (N, N), diagonal positive
    diag = torch.diagonal(logits)
    v2t = torch.logsumexp(logits, dim=1) - diag
    t2v = torch.logsumexp(logits, dim=0) - diag
    return 0.5 * (v2t.mean() + t2v.mean())


def soft_attend(queries: Tensor, keys: Tensor) -> tuple[Tensor, Tensor]:
    """Each query builds a convex combination of keys.

    weights = softmax(queries @ keys.T) row-wise (no temperature), attended
    = weights @ keys. queries (J, d), keys (M, d) -> ((J, d), (J, M)).
    """
    if queries.ndim == 1:
        attended, weights = soft_attend(queries.unsqueeze(0), keys)
        return attended[0], weights[0]
    weights = torch.softmax(queries @ keys.T, dim=-1)
    return weights @ keys, weights


class PairWeighter(nn.Module):
    """Learned softmax weighting over a family of fused token features.

    Given O with rows o_j (the elementwise product of a token feature and
    its attended counterpart), scores are a scaled bilinear form between
    the mean row and each row: softmax_j((mean(O) Wq) . (o_j Wk) / sqrt(d)).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.wq = nn.Parameter(torch.eye(dim))
        self.wk = nn.Parameter(torch.eye(dim))

    def forward(self, fused: Tensor) -> Tensor:
        d = fused.shape[-1]
        query = fused.mean(dim=0) @ self.wq  # (d,)
        keys = fused @ self.wk  # (J, d)
        scores = keys @ query / math.sqrt(d)
        return torch.softmax(scores, dim=0)


def _one_sided_local(
    queries: Tensor,
    keys: Tensor,
    weighter: PairWeighter,
    tau: float,
    similarity: str,
) -> Tensor:
    """Weighted bidirectional contrast between queries and their attended keys.

    For each query row q_j: a_j = soft_attend(q_j, keys). Direction one
    contrasts a_j against the query family (positive at j), direction two
    contrasts q_j against the attended family. Per-row sums are combined
    with the learned weighting over the fused features q_j * a_j.
    """
    attended, _ = soft_attend(queries, keys)  # (J, d)
    qn = _maybe_normalize(queries, similarity)
    an = _maybe_normalize(attended, similarity)
    logits_att_vs_query = an @ qn.T / tau  # (J, J): sim(a_j, q_c)
    logits_query_vs_att = qn @ an.T / tau  # (J, J): sim(q_j, a_c)
    l_one = torch.logsumexp(logits_att_vs_query, dim=1) - torch.diagonal(logits_att_vs_query)
    l_two = torch.logsumexp(logits_query_vs_att, dim=1) - torch.diagonal(logits_query_vs_att)
    weights = weighter(queries * attended)
    return (weights * (l_one + l_two)).sum()


def local_alignment_loss(
    image_locals: list[Tensor],
    text_locals: list[Tensor],
    token_weighter: PairWeighter,
    patch_weighter: PairWeighter,
    tau: float,
    similarity: str = "dot",
) -> tuple[Tensor, Tensor]:
    """Token-side and patch-side local losses, each averaged over pairs.

    image_locals[i] is (M_i, d) with padded/absent rows already removed;
    text_locals[i] is (W_i, d) likewise. Pairs where either side is empty
    are skipped with a warning.
    """
    _check_tau(tau)
    if len(image_locals) != len(text_locals):
        raise ValueError("image_locals and text_locals must pair up")
    token_terms: list[Tensor] = []
    patch_terms: list[Tensor] = []
    for i, (patches, tokens) in enumerate(zip(image_locals, text_locals)):
        if patches.shape[0] == 0 or tokens.shape[0] == 0:
            warnings.warn(f"local alignment: pair {i} has an empty side, skipping")
            continue
        token_terms.append(_one_sided_local(tokens, patches, token_weighter, tau, similarity))
        patch_terms.append(_one_sided_local(patches, tokens, patch_weighter, tau, similarity))
    if not token_terms:
        zero = torch.zeros((), dtype=token_weighter.wq.dtype, device=token_weighter.wq.device)
        return zero, zero.clone()
    return torch.stack(token_terms).mean(), torch.stack(patch_terms).mean()
