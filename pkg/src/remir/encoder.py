"""Trainable context encoder and the pipeline to the entity-pair matrix.

A small transformer encoder (token embedding + sinusoidal positions +
post-norm self-attention layers) stands in for a pretrained language model.
It exposes what the downstream pipeline needs: per-token states, the
head-averaged attention map of the final layer, and the document state
(row 0, the start token).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .corpus import MarkedDocument

_ACTIVATIONS = {
    "gelu": nn.GELU(),
    "silu": nn.SiLU(),
    "tanh": nn.Tanh(),
}


def activation(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}") from None


@dataclass
class EncoderOutput:
    token_states: Tensor  # (L, h)
    token_attention: Tensor  # (L, L), rows sum to 1; head-averaged, last layer
    doc_state: Tensor  # (h,), equals token_states[0]


@dataclass
class EntityStates:
    entity_embed: Tensor  # (N_e, h)
    entity_attention: Tensor  # (N_e, L), rows sum to 1


@dataclass
class PairMatrix:
    """Entity-pair feature matrix; cell (s, o) describes the ordered pair.

    ``mask[s, o]`` is True for cells whose features were replaced by the
    learned mask vector.  Diagonal cells are always zero and excluded.
    """

    values: Tensor  # (N_e, N_e, d)
    mask: Tensor  # (N_e, N_e) bool
    diagonal_excluded: bool = True

    @property
    def num_entities(self) -> int:
        return self.values.shape[0]

    def valid_cells(self) -> Tensor:
        n = self.num_entities
        return ~torch.eye(n, dtype=torch.bool, device=self.values.device)


_POSITION_CACHE: dict[tuple[int, int, torch.dtype], Tensor] = {}


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype) -> Tensor:
    cached = _POSITION_CACHE.get((length, dim, dtype))
    if cached is not None:
        return cached
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    enc = torch.zeros(length, dim, dtype=dtype)
    enc[:, 0::2] = torch.sin(position * div)
    enc[:, 1::2] = torch.cos(position * div[: dim // 2])
    _POSITION_CACHE[(length, dim, dtype)] = enc
    return enc


class SelfAttention(nn.Module):
    """Multi-head self-attention that also returns head-averaged weights."""

    def __init__(self, hidden: int, heads: int):
        super().__init__()
        if hidden % heads != 0:
            raise ValueError(f"hidden size {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        length = x.shape[0]
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(length, self.heads, self.head_dim).transpose(0, 1)
        k = k.view(length, self.heads, self.head_dim).transpose(0, 1)
        v = v.view(length, self.heads, self.head_dim).transpose(0, 1)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        probs = torch.softmax(scores, dim=-1)  # (heads, L, L)
        out = (probs @ v).transpose(0, 1).reshape(length, -1)
        return self.proj(out), probs.mean(dim=0)


class EncoderLayer(nn.Module):
    def __init__(self, hidden: int, heads: int, ffn_expansion: int, act: str):
        super().__init__()
        self.attn = SelfAttention(hidden, heads)
        self.norm1 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(
            nn.Linear(hidden, ffn_expansion * hidden),
            activation(act),
            nn.Linear(ffn_expansion * hidden, hidden),
        )
        self.norm2 = nn.LayerNorm(hidden)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        attn_out, probs = self.attn(x)
        x = self.norm1(x + attn_out)
        x = self.norm2(x + self.ffn(x))
        return x, probs


class MiniEncoder(nn.Module):
    """Token encoder producing states, a final-layer attention map, and the
    document state at position 0."""

    def __init__(
        self,
        vocab_size: int,
        hidden: int = 128,
        layers: int = 2,
        heads: int = 4,
        ffn_expansion: int = 4,
        act: str = "gelu",
    ):
        super().__init__()
        self.hidden = hidden
        self.embed = nn.Embedding(vocab_size, hidden)
        self.layers = nn.ModuleList(
            EncoderLayer(hidden, heads, ffn_expansion, act) for _ in range(layers)
        )

    def forward(self, token_ids: Tensor) -> EncoderOutput:
        x = self.embed(token_ids)
        x = x + sinusoidal_positions(x.shape[0], self.hidden, x.dtype).to(x.device)
        probs = torch.eye(x.shape[0], dtype=x.dtype, device=x.device)
        for layer in self.layers:
            x, probs = layer(x)
        return EncoderOutput(token_states=x, token_attention=probs, doc_state=x[0])


# ---------------------------------------------------------------------------
# Mention and entity representations
# ---------------------------------------------------------------------------


def mention_repr(enc: EncoderOutput, marked: MarkedDocument, entity: int, mention: int) -> Tensor:
    """Average of the opening- and closing-marker states of one mention."""
    open_pos, close_pos = marked.marker_positions[entity][mention]
    return (enc.token_states[open_pos] + enc.token_states[close_pos]) / 2


def entity_pool(mention_reprs: Tensor) -> Tensor:
    """Coordinatewise log-sum-exp over a (num_mentions, h) stack; smooth max."""
    if mention_reprs.ndim != 2 or mention_reprs.shape[0] == 0:
        raise ValueError("entity_pool expects a nonempty (num_mentions, h) stack")
    return torch.logsumexp(mention_reprs, dim=0)


def entity_attention(enc: EncoderOutput, marked: MarkedDocument, entity: int) -> Tensor:
    """Token-attention row of an entity: opening-marker rows averaged over its
    mentions, renormalized to sum to 1."""
    opens = [open_pos for open_pos, _ in marked.marker_positions[entity]]
    if not opens:
        raise ValueError(f"entity {entity} has no surviving mentions")
    row = enc.token_attention[opens].mean(dim=0)
    return row / row.sum()


def entity_states(enc: EncoderOutput, marked: MarkedDocument) -> EntityStates:
    """Batched equivalent of entity_pool / entity_attention over all entities."""
    spans = []
    opens: list[int] = []
    closes: list[int] = []
    for per_entity in marked.marker_positions:
        if not per_entity:
            raise ValueError("entity with no surviving mentions")
        start = len(opens)
        for open_pos, close_pos in per_entity:
            opens.append(open_pos)
            closes.append(close_pos)
        spans.append((start, len(opens)))
    reprs = (enc.token_states[opens] + enc.token_states[closes]) / 2
    attn_rows = enc.token_attention[opens]
    embeds = torch.stack([torch.logsumexp(reprs[a:b], dim=0) for a, b in spans])
    rows = torch.stack([attn_rows[a:b].mean(dim=0) for a, b in spans])
    rows = rows / rows.sum(dim=-1, keepdim=True)
    return EntityStates(entity_embed=embeds, entity_attention=rows)


def pair_context(enc: EncoderOutput, attn_s: Tensor, attn_o: Tensor) -> Tensor:
    """Context vector of a pair: token states weighted by
    softmax(attn_s * attn_o)."""
    weights = torch.softmax(attn_s * attn_o, dim=-1)
    return enc.token_states.T @ weights


class PairMatrixBuilder(nn.Module):
    """Maps entity states to the (N_e, N_e, d) pair matrix.

    Each ordered pair (s, o) concatenates its entity states with the document
    state and the pair context, projects the head and tail sides separately,
    and feeds the pair through a two-layer feed-forward map.  Diagonal cells
    are zeroed and flagged excluded.
    """

    def __init__(self, hidden: int, pair_in_width: int = 128, pair_dim: int = 256, act: str = "gelu"):
        super().__init__()
        self.head_proj = nn.Linear(3 * hidden, pair_in_width, bias=False)
        self.tail_proj = nn.Linear(3 * hidden, pair_in_width, bias=False)
        self.ffn = nn.Sequential(
            nn.Linear(2 * pair_in_width, pair_dim),
            activation(act),
            nn.Linear(pair_dim, pair_dim),
        )
        self.pair_dim = pair_dim

    def forward(self, states: EntityStates, enc: EncoderOutput) -> PairMatrix:
        n = states.entity_embed.shape[0]
        attn = states.entity_attention
        weights = torch.softmax(attn.unsqueeze(1) * attn.unsqueeze(0), dim=-1)  # (N, N, L)
        context = weights @ enc.token_states  # (N, N, h)
        doc = enc.doc_state.expand(n, n, -1)
        head_in = torch.cat([states.entity_embed.unsqueeze(1).expand(n, n, -1), doc, context], dim=-1)
        tail_in = torch.cat([states.entity_embed.unsqueeze(0).expand(n, n, -1), doc, context], dim=-1)
        pair = torch.cat([self.head_proj(head_in), self.tail_proj(tail_in)], dim=-1)
        values = self.ffn(pair)
        offdiag = 1.0 - torch.eye(n, dtype=values.dtype, device=values.device)
        values = values * offdiag.unsqueeze(-1)
        return PairMatrix(
            values=values,
            mask=torch.zeros(n, n, dtype=torch.bool, device=values.device),
        )
