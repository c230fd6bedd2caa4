"""Triple-level evaluation: P/R/F1 and its ignore-train, intra/inter, and
reasoning-subset variants.

Predictions and gold are sets of (doc_id, head, tail, relation) tuples with
document-local entity ids.  The ignore-train variant removes, from both
sides, triples whose (head name, tail name, relation name) fact appears in
the training set.  The reasoning subset contains gold triples (h, t, r) for
which some bridge entity b carries gold triples (h, b, *) and (b, t, *).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .corpus import Corpus, Document, PROV_COMPOSED

PredTriple = tuple[str, int, int, int]
Fact = tuple[str, str, str]


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    ign_f1: float
    intra_f1: float
    inter_f1: float
    infer_f1: float
    infer_precision: float
    infer_recall: float
    counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ign_f1": self.ign_f1,
            "intra_f1": self.intra_f1,
            "inter_f1": self.inter_f1,
            "infer_f1": self.infer_f1,
            "infer_precision": self.infer_precision,
            "infer_recall": self.infer_recall,
            "counts": self.counts,
        }

    def table(self) -> str:
        rows = [
            ("F1", self.f1, self.precision, self.recall),
            ("IgnF1", self.ign_f1, None, None),
            ("Intra-F1", self.intra_f1, None, None),
            ("Inter-F1", self.inter_f1, None, None),
            ("Infer-F1", self.infer_f1, self.infer_precision, self.infer_recall),
        ]
        lines = [f"{'metric':<10} {'score':>8} {'P':>8} {'R':>8}"]
        for name, score, p, r in rows:
            p_s = f"{p:8.4f}" if p is not None else " " * 8
            r_s = f"{r:8.4f}" if r is not None else " " * 8
            lines.append(f"{name:<10} {score:8.4f} {p_s} {r_s}")
        return "\n".join(lines)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _set_prf(pred: set, gold: set) -> tuple[float, float, float, dict[str, int]]:
    tp = len(pred & gold)
    fp = len(pred - gold)
    fn = len(gold - pred)
    p, r, f1 = _prf(tp, fp, fn)
    return p, r, f1, {"tp": tp, "fp": fp, "fn": fn}


def _as_key(triple) -> tuple[int, int, int]:
    if hasattr(triple, "key"):
        return triple.key()
    h, t, r = triple[:3]
    return (int(h), int(t), int(r))


def classify_locality(triple, doc: Document) -> str:
    """"intra" when some head mention and some tail mention share a sentence,
    else "inter"."""
    if hasattr(triple, "head"):
        h, t = triple.head, triple.tail
    else:
        h, t = int(triple[0]), int(triple[1])
    head_sents = doc.entities[h].sentence_indices()
    tail_sents = doc.entities[t].sentence_indices()
    return "intra" if head_sents & tail_sents else "inter"


def infer_subset(gold: Iterable) -> set[tuple[int, int, int]]:
    """Gold triples participating in a two-hop pattern: (h, t, r) such that
    gold holds (h, b, r1) and (b, t, r2) for some bridge b outside {h, t}."""
    keys = {_as_key(g) for g in gold}
    out_edges: dict[int, set[int]] = {}
    in_edges: dict[int, set[int]] = {}
    for h, t, _ in keys:
        out_edges.setdefault(h, set()).add(t)
        in_edges.setdefault(t, set()).add(h)
    subset = set()
    for h, t, r in keys:
        bridges = out_edges.get(h, set()) & in_edges.get(t, set())
        if bridges - {h, t}:
            subset.add((h, t, r))
    return subset


def gold_predictions(corpus: Corpus) -> set[PredTriple]:
    return {
        (doc.doc_id, tr.head, tr.tail, tr.relation) for doc in corpus.documents for tr in doc.triples
    }


def collect_facts(corpus: Corpus) -> frozenset[Fact]:
    """Name-level facts (head name, tail name, relation name) of a corpus,
    the removal key of the ignore-train score."""
    facts = set()
    for doc in corpus.documents:
        for tr in doc.triples:
            facts.add(
                (
                    doc.entities[tr.head].canonical_name,
                    doc.entities[tr.tail].canonical_name,
                    corpus.relation_names[tr.relation],
                )
            )
    return frozenset(facts)


def f1_report(
    pred: set[PredTriple],
    gold: set[PredTriple],
    train_facts: frozenset[Fact],
    corpus: Corpus,
) -> MetricsReport:
    docs: dict[str, Document] = {d.doc_id: d for d in corpus.documents}
    for doc_id, h, t, _ in pred:
        if doc_id not in docs:
            raise ValueError(f"prediction references unknown document {doc_id!r}")
        n = docs[doc_id].num_entities
        if not (0 <= h < n and 0 <= t < n):
            raise ValueError(f"prediction ({doc_id!r}, {h}, {t}) references entity outside document")

    precision, recall, f1, counts = _set_prf(pred, gold)

    def fact_of(item: PredTriple) -> Fact:
        doc_id, h, t, r = item
        doc = docs[doc_id]
        return (
            doc.entities[h].canonical_name,
            doc.entities[t].canonical_name,
            corpus.relation_names[r],
        )

    ign_pred = {x for x in pred if fact_of(x) not in train_facts}
    ign_gold = {x for x in gold if fact_of(x) not in train_facts}
    ign_p, ign_r, ign_f1, ign_counts = _set_prf(ign_pred, ign_gold)

    # Locality: gold assigns its own side; a matched prediction follows its
    # gold counterpart, an unmatched one is classified by the same rule.
    gold_side = {x: classify_locality((x[1], x[2], x[3]), docs[x[0]]) for x in gold}
    pred_side = {
        x: gold_side[x] if x in gold_side else classify_locality((x[1], x[2], x[3]), docs[x[0]])
        for x in pred
    }
    intra_scores = _set_prf(
        {x for x, side in pred_side.items() if side == "intra"},
        {x for x, side in gold_side.items() if side == "intra"},
    )
    inter_scores = _set_prf(
        {x for x, side in pred_side.items() if side == "inter"},
        {x for x, side in gold_side.items() if side == "inter"},
    )

    # Reasoning subset: per-document two-hop gold triples; predictions count
    # when they sit on an entity pair that carries a subset triple.
    infer_gold: set[PredTriple] = set()
    infer_pairs: set[tuple[str, int, int]] = set()
    accidental = 0
    provenance_composed = 0
    gold_by_doc: dict[str, set[tuple[int, int, int]]] = {}
    for doc_id, h, t, r in gold:
        gold_by_doc.setdefault(doc_id, set()).add((h, t, r))
    prov_of = {
        (d.doc_id, tr.head, tr.tail, tr.relation): tr.provenance
        for d in corpus.documents
        for tr in d.triples
    }
    for doc_id, keys in sorted(gold_by_doc.items()):
        subset = infer_subset(keys)
        for h, t, r in subset:
            infer_gold.add((doc_id, h, t, r))
            infer_pairs.add((doc_id, h, t))
            if prov_of.get((doc_id, h, t, r)) == PROV_COMPOSED:
                provenance_composed += 1
            else:
                accidental += 1
    infer_pred = {x for x in pred if (x[0], x[1], x[2]) in infer_pairs}
    infer_p, infer_r, infer_f1, infer_counts = _set_prf(infer_pred, infer_gold)
    infer_counts["gold_subset"] = len(infer_gold)
    infer_counts["gold_subset_composed"] = provenance_composed
    infer_counts["gold_subset_accidental"] = accidental

    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        ign_f1=ign_f1,
        intra_f1=intra_scores[2],
        inter_f1=inter_scores[2],
        infer_f1=infer_f1,
        infer_precision=infer_p,
        infer_recall=infer_r,
        counts={
            "overall": counts,
            "ign": ign_counts,
            "intra": intra_scores[3],
            "inter": inter_scores[3],
            "infer": infer_counts,
        },
    )


def predictions_to_json(pred: set[PredTriple], corpus: Corpus) -> list[dict]:
    """Prediction file records: {title, h_idx, t_idx, r} with relation names."""
    return [
        {"title": doc_id, "h_idx": h, "t_idx": t, "r": corpus.relation_names[r]}
        for doc_id, h, t, r in sorted(pred)
    ]


def predictions_from_json(data: list[Mapping], corpus: Corpus) -> set[PredTriple]:
    rel_index = {name: i for i, name in enumerate(corpus.relation_names)}
    out = set()
    for item in data:
        r = item["r"]
        if r not in rel_index:
            raise ValueError(f"prediction uses unknown relation {r!r}")
        out.add((str(item["title"]), int(item["h_idx"]), int(item["t_idx"]), rel_index[r]))
    return out


def report_to_json_str(report: MetricsReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True)
