"""Cell masking and the inference attention stack over the pair matrix.

The stack is a transformer-style encoder whose self-attention is replaced by
a four-mode variant: for a query cell (A, B), each mode builds one candidate
per bridge index k by pairing two cells that share k, reduces the pair to
head width with an affine map, appends the query cell itself, and attends
over the resulting candidate set.

Modes (candidate pair per bridge k):
  1: (X[A, k], X[k, B])    A->k plus k->B
  2: (X[A, k], X[B, k])    A->k plus B->k
  3: (X[k, A], X[B, k])    k->A plus B->k
  4: (X[k, A], X[k, B])    k->A plus k->B
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .encoder import PairMatrix, activation

NUM_MODES = 4


@dataclass(frozen=True)
class MaskPlan:
    """Off-diagonal cells selected for masking; deterministic in the seed."""

    cells: tuple[tuple[int, int], ...]
    rate: float
    seed: int


def sample_mask(num_entities: int, rate: float, seed: int) -> MaskPlan:
    """Uniform sample, without replacement, of round(rate * N_e * (N_e - 1))
    off-diagonal cells."""
    if not (0.0 <= rate <= 1.0):
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    if num_entities < 1:
        raise ValueError("num_entities must be >= 1")
    off_diag = [(s, o) for s in range(num_entities) for o in range(num_entities) if s != o]
    count = int(round(rate * len(off_diag)))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(off_diag), size=count, replace=False) if count else []
    cells = tuple(sorted(off_diag[int(i)] for i in chosen))
    return MaskPlan(cells=cells, rate=rate, seed=seed)


class MaskVector(nn.Module):
    """Learned feature vector substituted into masked cells."""

    def __init__(self, pair_dim: int):
        super().__init__()
        self.vector = nn.Parameter(torch.zeros(pair_dim))
        nn.init.normal_(self.vector, std=0.02)


def apply_mask(matrix: PairMatrix, plan: MaskPlan, mask_vector: Tensor | MaskVector) -> PairMatrix:
    """Copy of the matrix with planned cells replaced by the mask vector."""
    vector = mask_vector.vector if isinstance(mask_vector, MaskVector) else mask_vector
    n = matrix.num_entities
    values = matrix.values.clone()
    bitmap = matrix.mask.clone()
    for s, o in plan.cells:
        if s == o:
            raise ValueError(f"mask plan contains diagonal cell ({s}, {o})")
        if not (0 <= s < n and 0 <= o < n):
            raise ValueError(f"mask plan cell ({s}, {o}) out of bounds for {n} entities")
    if plan.cells:
        rows = torch.tensor([c[0] for c in plan.cells])
        cols = torch.tensor([c[1] for c in plan.cells])
        values[rows, cols] = vector.to(values.dtype)
        bitmap[rows, cols] = True
    return PairMatrix(values=values, mask=bitmap, diagonal_excluded=matrix.diagonal_excluded)


# ---------------------------------------------------------------------------
# Four-mode attention
# ---------------------------------------------------------------------------


def _bridge_pairs(x: Tensor, mode: int) -> Tensor:
    """(N, N, N, 2*dh) tensor of candidate pairs; index order (A, B, k)."""
    n = x.shape[0]
    xt = x.transpose(0, 1)  # xt[i, j] == x[j, i]
    a_to_k = x.unsqueeze(1).expand(n, n, n, -1)  # [A, B, k] -> x[A, k]
    k_to_b = xt.unsqueeze(0).expand(n, n, n, -1)  # [A, B, k] -> x[k, B]
    b_to_k = x.unsqueeze(0).expand(n, n, n, -1)  # [A, B, k] -> x[B, k]
    k_to_a = xt.unsqueeze(1).expand(n, n, n, -1)  # [A, B, k] -> x[k, A]
    if mode == 1:
        left, right = a_to_k, k_to_b
    elif mode == 2:
        left, right = a_to_k, b_to_k
    elif mode == 3:
        left, right = k_to_a, b_to_k
    elif mode == 4:
        left, right = k_to_a, k_to_b
    else:
        raise ValueError(f"inference mode must be 1..4, got {mode}")
    return torch.cat([left, right], dim=-1)


def imsa_head(
    x: Tensor,
    mode: int,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    reduce_weight: Tensor,
    reduce_bias: Tensor,
    return_attention: bool = False,
) -> Tensor | tuple[Tensor, Tensor]:
    """One inference head on an (N, N, dh) channel slice.

    Per query cell, the candidate set is the N bridge reductions followed by
    the query cell itself (N + 1 candidates in total).
    """
    head_dim = x.shape[-1]
    reduced = _bridge_pairs(x, mode) @ reduce_weight.T + reduce_bias  # (N, N, N, dh)
    candidates = torch.cat([reduced, x.unsqueeze(2)], dim=2)  # (N, N, N + 1, dh)
    q = x @ w_q
    k = candidates @ w_k
    v = candidates @ w_v
    scores = (q.unsqueeze(2) * k).sum(-1) / math.sqrt(head_dim)
    attn = torch.softmax(scores, dim=-1)
    out = (attn.unsqueeze(-1) * v).sum(dim=2)
    if return_attention:
        return out, attn
    return out


def plain_msa_head(
    x: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    return_attention: bool = False,
) -> Tensor | tuple[Tensor, Tensor]:
    """Ordinary self-attention over all N*N cells (ablation wiring)."""
    n, _, head_dim = x.shape
    flat = x.reshape(n * n, head_dim)
    q = flat @ w_q
    k = flat @ w_k
    v = flat @ w_v
    scores = q @ k.T / math.sqrt(head_dim)
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ v).reshape(n, n, head_dim)
    if return_attention:
        return out, attn
    return out


class InferenceLayer(nn.Module):
    """Transformer-style encoder layer with mode-structured attention.

    Channels split into 4 * heads_per_mode contiguous slices (mode-major);
    each slice runs one head of its mode.  Head outputs are concatenated,
    mixed, and followed by the usual residual / layer-norm / feed-forward
    wiring (post-norm).  ``plain_msa`` swaps in ordinary cell self-attention
    with identical parameter shapes.
    """

    def __init__(
        self,
        pair_dim: int,
        heads_per_mode: int = 1,
        ffn_expansion: int = 4,
        act: str = "gelu",
        plain_msa: bool = False,
    ):
        super().__init__()
        n_heads = NUM_MODES * heads_per_mode
        if pair_dim % n_heads != 0:
            raise ValueError(
                f"pair dim {pair_dim} must be divisible by {n_heads} "
                f"(4 modes x {heads_per_mode} heads per mode)"
            )
        self.n_heads = n_heads
        self.heads_per_mode = heads_per_mode
        self.head_dim = pair_dim // n_heads
        self.plain_msa = plain_msa
        dh = self.head_dim
        self.w_q = nn.Parameter(torch.empty(n_heads, dh, dh))
        self.w_k = nn.Parameter(torch.empty(n_heads, dh, dh))
        self.w_v = nn.Parameter(torch.empty(n_heads, dh, dh))
        self.reduce_weight = nn.Parameter(torch.empty(n_heads, dh, 2 * dh))
        self.reduce_bias = nn.Parameter(torch.zeros(n_heads, dh))
        for p in (self.w_q, self.w_k, self.w_v, self.reduce_weight):
            nn.init.xavier_uniform_(p)
        self.mixer = nn.Linear(pair_dim, pair_dim)
        self.norm1 = nn.LayerNorm(pair_dim)
        self.ffn = nn.Sequential(
            nn.Linear(pair_dim, ffn_expansion * pair_dim),
            activation(act),
            nn.Linear(ffn_expansion * pair_dim, pair_dim),
        )
        self.norm2 = nn.LayerNorm(pair_dim)

    def head_mode(self, head: int) -> int:
        return head // self.heads_per_mode + 1

    def attention(self, x: Tensor) -> Tensor:
        """All heads in one batched pass over a (..., N, N, d) input;
        numerically identical to running imsa_head / plain_msa_head per
        channel slice."""
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        batch, n = x.shape[0], x.shape[1]
        xh = x.view(batch, n, n, self.n_heads, self.head_dim).permute(0, 3, 1, 2, 4)
        if self.plain_msa:
            flat = xh.reshape(batch, self.n_heads, n * n, self.head_dim)
            q = torch.einsum("ghnd,hde->ghne", flat, self.w_q)
            k = torch.einsum("ghnd,hde->ghne", flat, self.w_k)
            v = torch.einsum("ghnd,hde->ghne", flat, self.w_v)
            scores = torch.einsum("ghqe,ghke->ghqk", q, k) / math.sqrt(self.head_dim)
            out = torch.einsum("ghqk,ghke->ghqe", torch.softmax(scores, dim=-1), v)
            out = out.reshape(batch, self.n_heads, n, n, self.head_dim)
        else:
            xt = xh.transpose(2, 3)  # xt[g, h, i, j] == xh[g, h, j, i]
            per = self.heads_per_mode
            groups = []
            for mode in range(1, NUM_MODES + 1):
                piece = xh[:, (mode - 1) * per : mode * per]
                piece_t = xt[:, (mode - 1) * per : mode * per]
                a_to_k = piece.unsqueeze(3).expand(-1, -1, n, n, n, -1)
                k_to_b = piece_t.unsqueeze(2).expand(-1, -1, n, n, n, -1)
                b_to_k = piece.unsqueeze(2).expand(-1, -1, n, n, n, -1)
                k_to_a = piece_t.unsqueeze(3).expand(-1, -1, n, n, n, -1)
                left, right = {
                    1: (a_to_k, k_to_b),
                    2: (a_to_k, b_to_k),
                    3: (k_to_a, b_to_k),
                    4: (k_to_a, k_to_b),
                }[mode]
                groups.append(torch.cat([left, right], dim=-1))
            pairs = torch.cat(groups, dim=1)  # (B, H, N, N, N, 2*dh)
            reduced = torch.einsum("ghabkd,hed->ghabke", pairs, self.reduce_weight)
            reduced = reduced + self.reduce_bias[None, :, None, None, None, :]
            cands = torch.cat([reduced, xh.unsqueeze(4)], dim=4)  # (B, H, N, N, N+1, dh)
            q = torch.einsum("ghabd,hde->ghabe", xh, self.w_q)
            k = torch.einsum("ghabkd,hde->ghabke", cands, self.w_k)
            v = torch.einsum("ghabkd,hde->ghabke", cands, self.w_v)
            scores = torch.einsum("ghabe,ghabke->ghabk", q, k) / math.sqrt(self.head_dim)
            out = torch.einsum("ghabk,ghabke->ghabe", torch.softmax(scores, dim=-1), v)
        out = out.permute(0, 2, 3, 1, 4).reshape(batch, n, n, -1)
        return out.squeeze(0) if squeeze else out

    def forward(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.mixer(self.attention(x)))
        x = self.norm2(x + self.ffn(x))
        return x


class InferenceStack(nn.Module):
    """Sequential inference layers (untied weights); depth 0 is the identity.

    Accepts a PairMatrix, an (N, N, d) tensor, or a batched (B, N, N, d)
    tensor (batch entries are independent).
    """

    def __init__(
        self,
        pair_dim: int,
        depth: int = 3,
        heads_per_mode: int = 1,
        ffn_expansion: int = 4,
        act: str = "gelu",
        plain_msa: bool = False,
    ):
        super().__init__()
        if depth < 0:
            raise ValueError("depth must be >= 0")
        self.layers = nn.ModuleList(
            InferenceLayer(pair_dim, heads_per_mode, ffn_expansion, act, plain_msa)
            for _ in range(depth)
        )

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, matrix: PairMatrix | Tensor) -> Tensor:
        x = matrix.values if isinstance(matrix, PairMatrix) else matrix
        for layer in self.layers:
            x = layer(x)
        return x
