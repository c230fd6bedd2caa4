"""Encoder pipeline: token states, pooling, pair context, pair matrix."""

import math

import numpy as np
import pytest
import torch

from remir.corpus import Document, SynthConfig, Vocabulary, generate_synthetic, insert_markers
from remir.encoder import (
    EncoderOutput,
    EntityStates,
    MiniEncoder,
    PairMatrixBuilder,
    entity_attention,
    entity_pool,
    entity_states,
    mention_repr,
    pair_context,
)
from tests.test_corpus import make_doc

torch.set_num_threads(1)


def small_encoder(vocab_size=50, hidden=16, layers=2, heads=2, seed=0):
    torch.manual_seed(seed)
    return MiniEncoder(vocab_size, hidden=hidden, layers=layers, heads=heads)


def fake_enc(states: torch.Tensor, attention: torch.Tensor | None = None) -> EncoderOutput:
    length = states.shape[0]
    if attention is None:
        attention = torch.full((length, length), 1.0 / length, dtype=states.dtype)
    return EncoderOutput(token_states=states, token_attention=attention, doc_state=states[0])


class FakeMarked:
    def __init__(self, marker_positions):
        self.marker_positions = marker_positions


class TestEncode:
    def test_shapes_and_row_normalization(self):
        enc = small_encoder()
        out = enc(torch.tensor([1, 2, 3, 4, 5]))
        assert out.token_states.shape == (5, 16)
        assert out.token_attention.shape == (5, 5)
        assert torch.allclose(out.token_attention.sum(-1), torch.ones(5), atol=1e-5)

    def test_doc_state_is_row_zero(self):
        enc = small_encoder()
        out = enc(torch.tensor([3, 1, 4]))
        assert torch.equal(out.doc_state, out.token_states[0])

    def test_deterministic(self):
        enc = small_encoder()
        ids = torch.tensor([7, 8, 9, 2])
        a = enc(ids)
        b = enc(ids)
        assert torch.equal(a.token_states, b.token_states)
        assert torch.equal(a.token_attention, b.token_attention)

    def test_single_token_attention_is_one(self):
        enc = small_encoder()
        out = enc(torch.tensor([1]))
        assert torch.allclose(out.token_attention, torch.ones(1, 1))


class TestMentionRepr:
    def test_equal_rows_give_same_vector(self):
        states = torch.zeros(4, 2)
        states[1] = torch.tensor([5.0, -3.0])
        states[3] = torch.tensor([5.0, -3.0])
        marked = FakeMarked((((1, 3),),))
        out = mention_repr(fake_enc(states), marked, 0, 0)
        assert torch.equal(out, torch.tensor([5.0, -3.0]))

    def test_arithmetic_mean(self):
        states = torch.tensor([[9.0, 9.0], [0.0, 2.0], [2.0, 0.0]])
        marked = FakeMarked((((1, 2),),))
        out = mention_repr(fake_enc(states), marked, 0, 0)
        assert torch.equal(out, torch.tensor([1.0, 1.0]))

    def test_matches_row_mean_fuzz(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            states = torch.tensor(rng.normal(size=(6, 5)))
            a, b = rng.choice(6, size=2, replace=False)
            marked = FakeMarked((((int(a), int(b)),),))
            out = mention_repr(fake_enc(states), marked, 0, 0)
            expected = (states[int(a)] + states[int(b)]) / 2
            assert torch.allclose(out, expected)


class TestEntityPool:
    def test_single_mention_identity(self):
        v = torch.tensor([[0.3, -1.2, 4.0]])
        assert torch.allclose(entity_pool(v), v[0])

    def test_two_equal_vectors_add_ln2(self):
        v = torch.tensor([1.0, -2.0, 0.5])
        pooled = entity_pool(torch.stack([v, v]))
        assert torch.allclose(pooled, v + math.log(2.0), atol=1e-6)

    def test_scalar_example_ln4(self):
        """logsumexp of {0, ln 3} is ln(1 + 3) = ln 4."""
        pooled = entity_pool(torch.tensor([[0.0], [math.log(3.0)]], dtype=torch.float64))
        assert pooled.item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_sandwich_bound_fuzz(self):
        """max <= logsumexp <= max + ln n, coordinatewise, 1000 draws."""
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n = int(rng.integers(1, 6))
            x = torch.tensor(rng.normal(scale=3.0, size=(n, 4)))
            pooled = entity_pool(x)
            mx = x.max(dim=0).values
            assert torch.all(pooled >= mx - 1e-9)
            assert torch.all(pooled <= mx + math.log(n) + 1e-9)

    def test_permutation_invariant_in_mention_order(self):
        rng = np.random.default_rng(5)
        x = torch.tensor(rng.normal(size=(5, 7)))
        perm = torch.tensor(rng.permutation(5))
        assert torch.allclose(entity_pool(x), entity_pool(x[perm]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            entity_pool(torch.zeros(0, 3))


class TestEntityAttention:
    def test_single_mention_exact_row(self):
        attn = torch.tensor([[0.2, 0.8], [0.6, 0.4]])
        states = torch.zeros(2, 3)
        marked = FakeMarked((((1, 0),),))
        row = entity_attention(fake_enc(states, attn), marked, 0)
        assert torch.allclose(row, attn[1])

    def test_two_mentions_average(self):
        attn = torch.tensor([[0.2, 0.8], [0.6, 0.4]])
        states = torch.zeros(2, 3)
        marked = FakeMarked((((0, 1), (1, 0)),))
        row = entity_attention(fake_enc(states, attn), marked, 0)
        assert torch.allclose(row, torch.tensor([0.4, 0.6]))

    def test_recomputation_fuzz(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            length = int(rng.integers(3, 8))
            raw = torch.tensor(rng.random((length, length))) + 0.1
            attn = raw / raw.sum(-1, keepdim=True)
            opens = rng.choice(length, size=int(rng.integers(1, 4)), replace=False)
            marked = FakeMarked((tuple((int(o), 0) for o in opens),))
            row = entity_attention(fake_enc(torch.zeros(length, 2), attn), marked, 0)
            expected = attn[[int(o) for o in opens]].mean(0)
            expected = expected / expected.sum()
            assert torch.allclose(row, expected, atol=1e-6)


class TestPairContext:
    def test_uniform_attention_gives_column_mean(self):
        rng = np.random.default_rng(2)
        states = torch.tensor(rng.normal(size=(6, 4)))
        uniform = torch.full((6,), 1.0 / 6, dtype=states.dtype)
        out = pair_context(fake_enc(states), uniform, uniform)
        assert torch.allclose(out, states.mean(dim=0), atol=1e-6)

    def test_one_hot_closed_form(self):
        """With both rows one-hot at i the product is e_i, and softmax puts
        e / (e + (L - 1)) on position i."""
        length = 5
        states = torch.eye(length)
        one_hot = torch.zeros(length)
        one_hot[2] = 1.0
        out = pair_context(fake_enc(states), one_hot, one_hot)
        weight_i = math.e / (math.e + (length - 1))
        assert out[2].item() == pytest.approx(weight_i, abs=1e-6)
        off = (1 - weight_i) / (length - 1)
        assert out[0].item() == pytest.approx(off, abs=1e-6)

    def test_loop_oracle_fuzz(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            length = int(rng.integers(2, 7))
            states = torch.tensor(rng.normal(size=(length, 3)))
            a_s = torch.tensor(rng.random(length))
            a_o = torch.tensor(rng.random(length))
            out = pair_context(fake_enc(states), a_s, a_o)
            weights = torch.softmax(a_s * a_o, dim=0)
            expected = sum(weights[k] * states[k] for k in range(length))
            assert torch.allclose(out, expected, atol=1e-6)

    def test_output_in_convex_hull(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            states = torch.tensor(rng.normal(size=(5, 3)))
            out = pair_context(fake_enc(states), torch.tensor(rng.random(5)), torch.tensor(rng.random(5)))
            assert torch.all(out <= states.max(dim=0).values + 1e-9)
            assert torch.all(out >= states.min(dim=0).values - 1e-9)


def random_states(n, length, hidden, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    raw = torch.tensor(rng.random((n, length)), dtype=dtype) + 0.05
    return EntityStates(
        entity_embed=torch.tensor(rng.normal(size=(n, hidden)), dtype=dtype),
        entity_attention=raw / raw.sum(-1, keepdim=True),
    )


class TestBuildPairMatrix:
    def setup_method(self):
        torch.manual_seed(4)
        self.builder = PairMatrixBuilder(hidden=6, pair_in_width=5, pair_dim=8).double()
        rng = np.random.default_rng(8)
        self.enc = fake_enc(
            torch.tensor(rng.normal(size=(7, 6))),
            torch.tensor(rng.random((7, 7))).softmax(-1),
        )

    def test_shape_and_zero_diagonal(self):
        states = random_states(3, 7, 6)
        matrix = self.builder(states, self.enc)
        assert matrix.values.shape == (3, 3, 8)
        assert torch.all(matrix.values[torch.eye(3, dtype=torch.bool)] == 0)
        assert matrix.diagonal_excluded
        assert not matrix.mask.any()

    def test_directedness(self):
        states = random_states(3, 7, 6, seed=14)
        matrix = self.builder(states, self.enc)
        assert not torch.allclose(matrix.values[0, 1], matrix.values[1, 0])

    def test_cell_matches_scalar_recomputation(self):
        """Cell (1, 2) equals a step-by-step recomputation outside the
        batched path, using the module's own weights."""
        states = random_states(4, 7, 6, seed=77)
        matrix = self.builder(states, self.enc)
        s, o = 1, 2
        weights = torch.softmax(states.entity_attention[s] * states.entity_attention[o], dim=0)
        context = self.enc.token_states.T @ weights
        head_in = torch.cat([states.entity_embed[s], self.enc.doc_state, context])
        tail_in = torch.cat([states.entity_embed[o], self.enc.doc_state, context])
        u_s = self.builder.head_proj.weight @ head_in
        u_o = self.builder.tail_proj.weight @ tail_in
        lin1, act, lin2 = self.builder.ffn
        hidden = act(lin1.weight @ torch.cat([u_s, u_o]) + lin1.bias)
        expected = lin2.weight @ hidden + lin2.bias
        assert torch.allclose(matrix.values[s, o], expected, atol=1e-10)

    def test_entity_relabeling_equivariance(self):
        """Permuting entity rows permutes both matrix axes."""
        states = random_states(5, 7, 6, seed=3)
        matrix = self.builder(states, self.enc)
        perm = torch.tensor(np.random.default_rng(1).permutation(5))
        permuted = EntityStates(
            entity_embed=states.entity_embed[perm],
            entity_attention=states.entity_attention[perm],
        )
        matrix_p = self.builder(permuted, self.enc)
        assert torch.allclose(matrix_p.values, matrix.values[perm][:, perm], atol=1e-12)


class TestEntityStatesIntegration:
    def test_matches_per_entity_functions(self):
        """The batched entity_states agrees with mention_repr / entity_pool /
        entity_attention applied per entity on a real marked document."""
        corpus = generate_synthetic(SynthConfig(num_docs=2, seed=19))
        doc = corpus.documents[0]
        marked = insert_markers(doc, corpus.entity_types)
        vocab = Vocabulary.build(corpus)
        enc = small_encoder(vocab_size=len(vocab), hidden=16)
        out = enc(torch.tensor(vocab.encode(marked.tokens)))
        states = entity_states(out, marked)
        for e in range(doc.num_entities):
            reprs = torch.stack(
                [mention_repr(out, marked, e, j) for j in range(len(marked.marker_positions[e]))]
            )
            assert torch.allclose(states.entity_embed[e], entity_pool(reprs), atol=1e-6)
            assert torch.allclose(
                states.entity_attention[e], entity_attention(out, marked, e), atol=1e-6
            )
        assert torch.allclose(states.entity_attention.sum(-1), torch.ones(doc.num_entities), atol=1e-5)
