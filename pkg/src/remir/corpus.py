"""Data model, DocRED-format ingestion, entity markers, and synthetic corpora.

The on-disk format is DocRED-style JSON: a list of documents, each with
``title``, ``sents`` (list of token lists), ``vertexSet`` (one mention group
per entity; mentions carry ``name``, ``sent_id``, ``pos`` = [start, end) and
``type``) and ``labels`` ({``h``, ``t``, ``r``, ``evidence``}).  Synthetic
corpora add a ``provenance`` field per label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DOC_START = "<doc>"

PROV_BASE_INTRA = "base-intra"
PROV_BASE_INTER = "base-inter"
PROV_COMPOSED = "composed"

DEFAULT_MAX_ENTITY_ID = 64


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files or inconsistent document contents."""


class SynthConfigError(ValueError):
    """Raised when a synthetic-corpus configuration is invalid."""


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mention:
    entity_index: int
    sentence_index: int
    token_start: int  # inclusive
    token_end: int  # exclusive
    surface: tuple[str, ...]


@dataclass(frozen=True)
class Entity:
    entity_id: int
    entity_type: str
    mentions: tuple[Mention, ...]
    canonical_name: str

    def sentence_indices(self) -> set[int]:
        return {m.sentence_index for m in self.mentions}


@dataclass(frozen=True)
class Triple:
    head: int
    tail: int
    relation: int
    evidence: frozenset[int] = frozenset()
    provenance: str | None = None

    def key(self) -> tuple[int, int, int]:
        return (self.head, self.tail, self.relation)


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    triples: tuple[Triple, ...]

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def flat_tokens(self) -> list[str]:
        return [tok for sent in self.sentences for tok in sent]


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    relation_names: tuple[str, ...]
    entity_types: tuple[str, ...]

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)


@dataclass(frozen=True)
class MarkedDocument:
    """Flat token stream with entity markers inserted and a start token at 0.

    ``marker_positions[e][j]`` is the (opening, closing) position pair of the
    j-th (merged) mention of entity ``e`` in ``tokens``.
    """

    tokens: tuple[str, ...]
    marker_positions: tuple[tuple[tuple[int, int], ...], ...]
    origin: Document
    warnings: tuple[str, ...] = ()

    def all_marker_positions(self) -> set[int]:
        out: set[int] = set()
        for per_entity in self.marker_positions:
            for open_pos, close_pos in per_entity:
                out.add(open_pos)
                out.add(close_pos)
        return out


def marker_open(entity_type: str) -> str:
    return f"<{entity_type}>"


def marker_close(entity_id: int) -> str:
    return f"</{entity_id}>"


def marker_tokens(type_vocab: Sequence[str], max_id: int = DEFAULT_MAX_ENTITY_ID) -> list[str]:
    """All marker tokens for a type vocabulary and an entity-id cap."""
    return [marker_open(t) for t in type_vocab] + [marker_close(i) for i in range(max_id)]


# ---------------------------------------------------------------------------
# DocRED-format parsing and serialization
# ---------------------------------------------------------------------------


def _validate_document(raw: dict, doc_index: int) -> None:
    for key in ("title", "sents", "vertexSet"):
        if key not in raw:
            raise CorpusFormatError(f"document {doc_index}: missing field {key!r}")


def _build_document(raw: dict, doc_index: int, rel_index: dict[str, int]) -> Document:
    doc_id = str(raw["title"])
    sentences = tuple(tuple(str(t) for t in sent) for sent in raw["sents"])
    entities = []
    for eid, group in enumerate(raw["vertexSet"]):
        if not group:
            raise CorpusFormatError(f"{doc_id}: entity {eid} has no mentions")
        mentions = []
        for m in group:
            sent_id = int(m["sent_id"])
            start, end = (int(p) for p in m["pos"])
            if sent_id < 0 or sent_id >= len(sentences):
                raise CorpusFormatError(
                    f"{doc_id}: mention of entity {eid} has sentence index {sent_id} "
                    f"outside [0, {len(sentences)})"
                )
            if not (0 <= start < end <= len(sentences[sent_id])):
                raise CorpusFormatError(
                    f"{doc_id}: mention span [{start}, {end}) of entity {eid} exceeds "
                    f"sentence {sent_id} of length {len(sentences[sent_id])}"
                )
            mentions.append(
                Mention(
                    entity_index=eid,
                    sentence_index=sent_id,
                    token_start=start,
                    token_end=end,
                    surface=sentences[sent_id][start:end],
                )
            )
        entities.append(
            Entity(
                entity_id=eid,
                entity_type=str(group[0].get("type", "MISC")),
                mentions=tuple(mentions),
                canonical_name=str(group[0].get("name", " ".join(mentions[0].surface))),
            )
        )
    triples = []
    for label in raw.get("labels", []):
        h, t = int(label["h"]), int(label["t"])
        if h == t:
            raise CorpusFormatError(f"{doc_id}: label with head == tail ({h})")
        if not (0 <= h < len(entities) and 0 <= t < len(entities)):
            raise CorpusFormatError(f"{doc_id}: label references entity outside vertexSet")
        triples.append(
            Triple(
                head=h,
                tail=t,
                relation=rel_index[str(label["r"])],
                evidence=frozenset(int(s) for s in label.get("evidence", [])),
                provenance=label.get("provenance"),
            )
        )
    return Document(doc_id=doc_id, sentences=sentences, entities=tuple(entities), triples=tuple(triples))


def parse_docred(path: str | Path, relation_names: Sequence[str] | None = None) -> Corpus:
    """Parse a DocRED-style JSON file into a :class:`Corpus`.

    The relation vocabulary is the sorted set of observed relation strings
    unless ``relation_names`` pins an explicit (shared) vocabulary.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise CorpusFormatError(f"{path}: top-level JSON value must be a list of documents")

    for i, raw in enumerate(data):
        if not isinstance(raw, dict):
            raise CorpusFormatError(f"document {i}: expected a JSON object")
        _validate_document(raw, i)

    observed = sorted({str(lbl["r"]) for raw in data for lbl in raw.get("labels", [])})
    if relation_names is None:
        names = observed
    else:
        names = list(relation_names)
        unknown = [r for r in observed if r not in set(names)]
        if unknown:
            raise CorpusFormatError(f"{path}: relations not in vocabulary: {unknown}")
    rel_index = {r: i for i, r in enumerate(names)}

    documents = tuple(_build_document(raw, i, rel_index) for i, raw in enumerate(data))
    entity_types = sorted({e.entity_type for d in documents for e in d.entities})
    return Corpus(documents=documents, relation_names=tuple(names), entity_types=tuple(entity_types))


def corpus_to_json(corpus: Corpus) -> list[dict]:
    """Serialize to the DocRED schema, labels in canonical (h, t, r) order."""
    out = []
    for doc in corpus.documents:
        vertex_set = [
            [
                {
                    "name": e.canonical_name,
                    "sent_id": m.sentence_index,
                    "pos": [m.token_start, m.token_end],
                    "type": e.entity_type,
                }
                for m in e.mentions
            ]
            for e in doc.entities
        ]
        labels = []
        for tr in sorted(doc.triples, key=lambda tr: (tr.head, tr.tail, tr.relation)):
            label = {
                "h": tr.head,
                "t": tr.tail,
                "r": corpus.relation_names[tr.relation],
                "evidence": sorted(tr.evidence),
            }
            if tr.provenance is not None:
                label["provenance"] = tr.provenance
            labels.append(label)
        out.append(
            {
                "title": doc.doc_id,
                "sents": [list(s) for s in doc.sentences],
                "vertexSet": vertex_set,
                "labels": labels,
            }
        )
    return out


def canonical_json(corpus: Corpus) -> str:
    """Canonical byte form: parse -> serialize -> parse is a fixed point on it."""
    return json.dumps(corpus_to_json(corpus), ensure_ascii=False, sort_keys=True, indent=1)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(canonical_json(corpus))


def load_dataset(paths: Sequence[str | Path]) -> list[Corpus]:
    """Parse several corpus files under one shared relation vocabulary."""
    observed: set[str] = set()
    for p in paths:
        try:
            data = json.loads(Path(p).read_text())
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{p}: not valid JSON: {exc}") from exc
        for raw in data:
            observed.update(str(lbl["r"]) for lbl in raw.get("labels", []))
    names = sorted(observed)
    return [parse_docred(p, relation_names=names) for p in paths]


# ---------------------------------------------------------------------------
# Entity-marker insertion
# ---------------------------------------------------------------------------


def _merge_same_entity_overlaps(
    entity: Entity, doc_id: str, warnings: list[str]
) -> list[Mention]:
    """Merge overlapping spans of one entity (per sentence); keep the rest."""
    by_sentence: dict[int, list[Mention]] = {}
    for m in entity.mentions:
        by_sentence.setdefault(m.sentence_index, []).append(m)
    merged: list[Mention] = []
    for sent_id in sorted(by_sentence):
        spans = sorted(by_sentence[sent_id], key=lambda m: (m.token_start, m.token_end))
        current = spans[0]
        for nxt in spans[1:]:
            if nxt.token_start < current.token_end:  # strict overlap; adjacency kept apart
                warnings.append(
                    f"{doc_id}: merged overlapping mentions of entity {entity.entity_id} "
                    f"in sentence {sent_id}: [{current.token_start},{current.token_end}) "
                    f"+ [{nxt.token_start},{nxt.token_end})"
                )
                current = replace(
                    current,
                    token_end=max(current.token_end, nxt.token_end),
                    surface=current.surface + nxt.surface[max(0, current.token_end - nxt.token_start):],
                )
            else:
                merged.append(current)
                current = nxt
        merged.append(current)
    return merged


def insert_markers(
    doc: Document,
    type_vocab: Sequence[str],
    max_id: int = DEFAULT_MAX_ENTITY_ID,
) -> MarkedDocument:
    """Insert one opening marker (keyed by entity type) and one closing marker
    (keyed by entity id) around every mention, after prepending a start token.

    At a shared boundary index, closing markers precede opening markers, and
    markers of the same kind are ordered by entity id.
    """
    type_set = set(type_vocab)
    for ent in doc.entities:
        if ent.entity_type not in type_set:
            raise CorpusFormatError(
                f"{doc.doc_id}: entity type {ent.entity_type!r} not in type vocabulary"
            )
        if not (0 <= ent.entity_id < max_id):
            raise CorpusFormatError(
                f"{doc.doc_id}: entity id {ent.entity_id} outside [0, {max_id})"
            )

    warnings: list[str] = []
    sent_offsets = []
    offset = 0
    for sent in doc.sentences:
        sent_offsets.append(offset)
        offset += len(sent)
    flat = doc.flat_tokens()

    # events: (flat_pos, kind, entity_id, entity_slot, mention_slot)
    # kind 0 = closing, 1 = opening; closing sorts first at equal positions.
    events: list[tuple[int, int, int, int, int]] = []
    merged_mentions: list[list[Mention]] = []
    for slot, ent in enumerate(doc.entities):
        mentions = _merge_same_entity_overlaps(ent, doc.doc_id, warnings)
        merged_mentions.append(mentions)
        for j, m in enumerate(mentions):
            start = sent_offsets[m.sentence_index] + m.token_start
            end = sent_offsets[m.sentence_index] + m.token_end
            events.append((start, 1, ent.entity_id, slot, j))
            events.append((end, 0, ent.entity_id, slot, j))
    events.sort(key=lambda ev: (ev[0], ev[1], ev[2]))

    tokens: list[str] = [DOC_START]
    positions: dict[tuple[int, int, int], int] = {}
    ev_idx = 0
    for i in range(len(flat) + 1):
        while ev_idx < len(events) and events[ev_idx][0] == i:
            pos, kind, eid, slot, j = events[ev_idx]
            ent = doc.entities[slot]
            tokens.append(marker_close(eid) if kind == 0 else marker_open(ent.entity_type))
            positions[(slot, j, kind)] = len(tokens) - 1
            ev_idx += 1
        if i < len(flat):
            tokens.append(flat[i])

    marker_positions = tuple(
        tuple((positions[(slot, j, 1)], positions[(slot, j, 0)]) for j in range(len(ms)))
        for slot, ms in enumerate(merged_mentions)
    )
    return MarkedDocument(
        tokens=tuple(tokens),
        marker_positions=marker_positions,
        origin=doc,
        warnings=tuple(warnings),
    )


def strip_markers(marked: MarkedDocument) -> list[str]:
    """Remove the start token and all marker tokens, recovering the original
    flat token stream."""
    drop = marked.all_marker_positions()
    drop.add(0)
    return [tok for i, tok in enumerate(marked.tokens) if i not in drop]


def truncate_document(
    doc: Document, max_tokens: int
) -> tuple[Document, list[int | None], list[str]]:
    """Truncate at sentence boundaries so the marked length fits ``max_tokens``.

    Entities whose mentions all fall past the cut are dropped (with their
    triples) and the rest reindexed; returns (document, old->new entity index
    map, warnings).  The first sentence is always kept.
    """
    budget = 1  # start token
    kept = 0
    for sent_id, sent in enumerate(doc.sentences):
        mentions_here = sum(
            1 for e in doc.entities for m in e.mentions if m.sentence_index == sent_id
        )
        cost = len(sent) + 2 * mentions_here
        if sent_id > 0 and budget + cost > max_tokens:
            break
        budget += cost
        kept += 1

    warnings: list[str] = []
    if kept == len(doc.sentences):
        return doc, list(range(len(doc.entities))), warnings
    warnings.append(f"{doc.doc_id}: truncated to {kept}/{len(doc.sentences)} sentences")

    entity_map: list[int | None] = []
    new_entities: list[Entity] = []
    for ent in doc.entities:
        surviving = tuple(m for m in ent.mentions if m.sentence_index < kept)
        dropped = len(ent.mentions) - len(surviving)
        if dropped:
            warnings.append(
                f"{doc.doc_id}: dropped {dropped} mention(s) of entity {ent.entity_id} past the cut"
            )
        if not surviving:
            entity_map.append(None)
            continue
        new_id = len(new_entities)
        entity_map.append(new_id)
        new_entities.append(
            Entity(
                entity_id=new_id,
                entity_type=ent.entity_type,
                mentions=tuple(replace(m, entity_index=new_id) for m in surviving),
                canonical_name=ent.canonical_name,
            )
        )

    new_triples = []
    for tr in doc.triples:
        h, t = entity_map[tr.head], entity_map[tr.tail]
        if h is None or t is None:
            warnings.append(f"{doc.doc_id}: dropped triple {tr.key()} (entity truncated away)")
            continue
        new_triples.append(
            replace(tr, head=h, tail=t, evidence=frozenset(s for s in tr.evidence if s < kept))
        )
    new_doc = Document(
        doc_id=doc.doc_id,
        sentences=doc.sentences[:kept],
        entities=tuple(new_entities),
        triples=tuple(new_triples),
    )
    return new_doc, entity_map, warnings


# ---------------------------------------------------------------------------
# Token vocabulary
# ---------------------------------------------------------------------------


UNK = "<unk>"


class Vocabulary:
    """Token-to-id map over corpus tokens, marker tokens, and specials."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        idx = self.index
        unk = self.unk_id
        return [idx.get(t, unk) for t in tokens]

    @classmethod
    def build(
        cls,
        corpus: Corpus,
        type_vocab: Sequence[str] | None = None,
        max_id: int = DEFAULT_MAX_ENTITY_ID,
    ) -> "Vocabulary":
        types = list(type_vocab) if type_vocab is not None else list(corpus.entity_types)
        specials = [UNK, DOC_START] + marker_tokens(types, max_id)
        words = sorted({tok for doc in corpus.documents for sent in doc.sentences for tok in sent})
        seen = set(specials)
        return cls(specials + [w for w in words if w not in seen])


# ---------------------------------------------------------------------------
# Synthetic compositional-relation corpus
# ---------------------------------------------------------------------------

ENTITY_TYPES = ("LOC", "MISC", "ORG", "PER")

_FILLERS = ("the", "quite", "indeed", "rather", "notably", "plainly")

_SYLLABLES = ("ba", "ce", "di", "fo", "gu", "ka", "le", "mi", "no", "pu", "ra", "se", "ti", "vo")


def _name_pool(size: int) -> list[str]:
    names = []
    for a in _SYLLABLES:
        for b in _SYLLABLES:
            names.append((a + b).capitalize())
            if len(names) == size:
                return names
    raise SynthConfigError(f"name pool supports at most {len(_SYLLABLES) ** 2} names, got {size}")


@dataclass(frozen=True)
class SynthConfig:
    """Settings for the compositional-relation corpus generator.

    ``composition_rules`` holds (r1, r2, r3) triples: whenever base triples
    r1(A, C) and r2(C, B) hold, the gold triple r3(A, B) is added without any
    surface sentence expressing it.  Composition is single-step: derived
    triples never feed further rules.
    """

    num_docs: int = 300
    entities_per_doc: tuple[int, int] = (4, 8)
    base_relations: int = 6
    composition_rules: tuple[tuple[int, int, int], ...] = ((0, 1, 6), (2, 3, 7), (4, 5, 8))
    surface_noise: float = 0.05
    seed: int = 17
    inter_fraction: float = 0.5
    chain_density: float = 0.6
    extra_edge_density: float = 0.5
    name_pool_size: int = 60
    # At most one gold relation per ordered pair.  The positive term of the
    # adaptive-threshold loss has an irreducible floor on multi-label cells
    # (k equal positives cannot score below k*ln k), so overfit-to-zero
    # corpora need this.
    unique_pair_relations: bool = False

    def num_relations(self) -> int:
        highest = self.base_relations - 1
        for r1, r2, r3 in self.composition_rules:
            highest = max(highest, r1, r2, r3)
        return highest + 1

    def relation_names(self) -> tuple[str, ...]:
        return tuple(f"R{i:02d}" for i in range(self.num_relations()))

    def validate(self) -> None:
        lo, hi = self.entities_per_doc
        if not (2 <= lo <= hi):
            raise SynthConfigError(f"entities_per_doc range must satisfy 2 <= lo <= hi, got ({lo}, {hi})")
        if self.num_docs < 1:
            raise SynthConfigError("num_docs must be >= 1")
        if self.base_relations < 1:
            raise SynthConfigError("base_relations must be >= 1")
        for p, name in ((self.surface_noise, "surface_noise"), (self.inter_fraction, "inter_fraction")):
            if not (0.0 <= p <= 1.0):
                raise SynthConfigError(f"{name} must be in [0, 1], got {p}")
        for rule in self.composition_rules:
            r1, r2, r3 = rule
            if min(rule) < 0:
                raise SynthConfigError(f"rule {rule}: negative relation index")
            if r1 >= self.base_relations or r2 >= self.base_relations:
                raise SynthConfigError(f"rule {rule}: inputs must be base relations (< {self.base_relations})")
            if r3 in (r1, r2):
                raise SynthConfigError(f"rule {rule}: output must differ from both inputs")
        self._check_acyclic()
        if self.name_pool_size < hi:
            raise SynthConfigError("name_pool_size smaller than entities_per_doc upper bound")

    def _check_acyclic(self) -> None:
        # Edges r_in -> r_out; a cycle would make iterated composition unbounded,
        # so such rule sets are rejected outright (we only ever apply one step).
        edges: dict[int, set[int]] = {}
        for r1, r2, r3 in self.composition_rules:
            edges.setdefault(r1, set()).add(r3)
            edges.setdefault(r2, set()).add(r3)
        state: dict[int, int] = {}  # 1 = on stack, 2 = done

        def visit(node: int, trail: tuple[int, ...]) -> None:
            state[node] = 1
            for nxt in sorted(edges.get(node, ())):
                if state.get(nxt) == 1:
                    raise SynthConfigError(
                        f"composition rules form a relation cycle: {trail + (node, nxt)}"
                    )
                if state.get(nxt) != 2:
                    visit(nxt, trail + (node,))
            state[node] = 2

        for node in sorted(edges):
            if state.get(node) != 2:
                visit(node, ())


def compose_closure(
    base: Iterable[tuple[int, int, int]], rules: Iterable[tuple[int, int, int]]
) -> set[tuple[int, int, int]]:
    """Single-step rule closure over base (h, t, r) triples: derived triples
    that are not themselves base triples."""
    base_set = set(base)
    by_rel: dict[int, list[tuple[int, int]]] = {}
    for h, t, r in sorted(base_set):
        by_rel.setdefault(r, []).append((h, t))
    derived: set[tuple[int, int, int]] = set()
    for r1, r2, r3 in rules:
        for a, c in by_rel.get(r1, ()):
            for c2, b in by_rel.get(r2, ()):
                if c2 == c and a != b:
                    cand = (a, b, r3)
                    if cand not in base_set:
                        derived.add(cand)
    return derived


def _cue(relation: int) -> str:
    return f"rel{relation:02d}"


def relation_type_signature(relation: int) -> tuple[str, str]:
    """Head/tail entity types licensed by a relation.

    Relations are typed so the type pair narrows the candidate relations of
    a cell; a rule chain r1(A,C) + r2(C,B) is realizable iff the tail type
    of r1 equals the head type of r2.
    """
    k = len(ENTITY_TYPES)
    return ENTITY_TYPES[relation % k], ENTITY_TYPES[(relation + 1) % k]


def _generate_document(cfg: SynthConfig, doc_index: int, pool: list[str]) -> Document:
    rng = np.random.default_rng([cfg.seed, doc_index])
    lo, hi = cfg.entities_per_doc
    n_e = int(rng.integers(lo, hi + 1))

    # Cover every entity type when room allows, so typed chains can be
    # planted; names are bucketed by their fixed (pool-index keyed) type.
    buckets: dict[str, list[int]] = {t: [] for t in ENTITY_TYPES}
    for i in range(len(pool)):
        buckets[ENTITY_TYPES[i % len(ENTITY_TYPES)]].append(i)
    chosen: list[int] = []
    for t in ENTITY_TYPES[: min(n_e, len(ENTITY_TYPES))]:
        pick = int(rng.choice(len(buckets[t])))
        chosen.append(buckets[t].pop(pick))
    remaining = sorted(i for b in buckets.values() for i in b)
    extra = n_e - len(chosen)
    if extra > 0:
        for sel in rng.choice(len(remaining), size=extra, replace=False):
            chosen.append(remaining[int(sel)])
    order = rng.permutation(len(chosen))
    name_ids = [chosen[int(i)] for i in order]
    names = [pool[i] for i in name_ids]
    types = [ENTITY_TYPES[i % len(ENTITY_TYPES)] for i in name_ids]
    of_type: dict[str, list[int]] = {t: [] for t in ENTITY_TYPES}
    for e, t in enumerate(types):
        of_type[t].append(e)

    # Base edges: planted two-hop chains (so composition rules fire) plus
    # type-consistent distractor edges.
    base: list[tuple[int, int, int]] = []
    base_seen: set[tuple[int, int, int]] = set()
    pairs_used: set[tuple[int, int]] = set()

    def add_base(h: int, t: int, r: int) -> None:
        if h == t or (h, t, r) in base_seen:
            return
        if cfg.unique_pair_relations and (h, t) in pairs_used:
            return
        base_seen.add((h, t, r))
        pairs_used.add((h, t))
        base.append((h, t, r))

    def sample_of(entity_type: str, exclude: tuple[int, ...] = ()) -> int | None:
        pool_e = [e for e in of_type[entity_type] if e not in exclude]
        if not pool_e:
            return None
        return pool_e[int(rng.integers(len(pool_e)))]

    n_chains = max(1, int(round(cfg.chain_density * n_e)))
    if cfg.composition_rules:
        for _ in range(n_chains):
            r1, r2, _r3 = cfg.composition_rules[int(rng.integers(len(cfg.composition_rules)))]
            ta, tc = relation_type_signature(r1)
            tc2, tb = relation_type_signature(r2)
            if tc != tc2:
                continue  # rule not realizable under the type map
            a = sample_of(ta)
            c = sample_of(tc, exclude=(a,) if a is not None else ())
            b = sample_of(tb, exclude=tuple(x for x in (a, c) if x is not None))
            if a is None or c is None or b is None:
                continue
            add_base(a, c, r1)
            add_base(c, b, r2)
    n_extra = int(round(cfg.extra_edge_density * n_e))
    for _ in range(n_extra):
        r = int(rng.integers(cfg.base_relations))
        th, tt = relation_type_signature(r)
        h = sample_of(th)
        t = sample_of(tt, exclude=(h,) if h is not None else ())
        if h is None or t is None:
            continue
        add_base(h, t, r)

    derived = sorted(compose_closure(base, cfg.composition_rules))
    if cfg.unique_pair_relations:
        filtered = []
        for h, t, r in derived:
            if (h, t) not in pairs_used:
                pairs_used.add((h, t))
                filtered.append((h, t, r))
        derived = filtered

    # Surface realization.  Sentences are (token, entity-or-None) cell lists;
    # derived triples never receive a sentence.  Entities outside every base
    # relation get an introduction sentence so each has at least one mention.
    realization: dict[tuple[int, int, int], list[int]] = {}
    sentences: list[list[tuple[str, int | None]]] = []
    connected = {h for h, _, _ in base} | {t for _, t, _ in base}
    for e in range(n_e):
        if e not in connected:
            sentences.append([(names[e], e), ("isa", None), (types[e].lower(), None), (".", None)])

    order = list(rng.permutation(len(base)))
    for pos in order:
        h, t, r = base[pos]
        if rng.random() < cfg.inter_fraction:
            first = len(sentences)
            sentences.append([(names[h], h), (_cue(r), None), (".", None)])
            sentences.append([(_cue(r), None), (names[t], t), (".", None)])
            realization[(h, t, r)] = [first, first + 1]
        else:
            idx = len(sentences)
            sentences.append([(names[h], h), (_cue(r), None), (names[t], t), (".", None)])
            realization[(h, t, r)] = [idx]

    if cfg.surface_noise > 0:
        for cells in sentences:
            for gap in range(len(cells), -1, -1):
                if rng.random() < cfg.surface_noise:
                    cells.insert(gap, (str(rng.choice(_FILLERS)), None))

    token_sentences = tuple(tuple(tok for tok, _ in cells) for cells in sentences)
    mentions_per_entity: list[list[Mention]] = [[] for _ in range(n_e)]
    for sent_id, cells in enumerate(sentences):
        for pos, (tok, owner) in enumerate(cells):
            if owner is not None:
                mentions_per_entity[owner].append(
                    Mention(
                        entity_index=owner,
                        sentence_index=sent_id,
                        token_start=pos,
                        token_end=pos + 1,
                        surface=(tok,),
                    )
                )
    entities = tuple(
        Entity(
            entity_id=e,
            entity_type=types[e],
            mentions=tuple(mentions_per_entity[e]),
            canonical_name=names[e],
        )
        for e in range(n_e)
    )

    sentence_sets = [ent.sentence_indices() for ent in entities]
    triples: list[Triple] = []
    for h, t, r in sorted(base):
        intra = bool(sentence_sets[h] & sentence_sets[t])
        triples.append(
            Triple(
                head=h,
                tail=t,
                relation=r,
                evidence=frozenset(realization[(h, t, r)]),
                provenance=PROV_BASE_INTRA if intra else PROV_BASE_INTER,
            )
        )
    for h, t, r in derived:
        triples.append(Triple(head=h, tail=t, relation=r, provenance=PROV_COMPOSED))

    return Document(
        doc_id=f"synth-{doc_index:04d}",
        sentences=token_sentences,
        entities=entities,
        triples=tuple(triples),
    )


def generate_synthetic(cfg: SynthConfig, first_doc_index: int = 0) -> Corpus:
    """Generate a corpus; a pure function of the config (each document's
    randomness derives from (seed, doc index), so slicing is stable)."""
    cfg.validate()
    pool = _name_pool(cfg.name_pool_size)
    docs = tuple(
        _generate_document(cfg, first_doc_index + i, pool) for i in range(cfg.num_docs)
    )
    return Corpus(
        documents=docs,
        relation_names=cfg.relation_names(),
        entity_types=tuple(sorted(set(ENTITY_TYPES))),
    )
