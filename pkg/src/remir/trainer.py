"""Dual-path training loop, evaluation driver, checkpointing, gradient checks.

Every forward pass runs the pipeline twice: the original path classifies the
pair matrix as built, the mask path classifies a randomly masked copy, and
the reconstruction loss ties the two label-distribution fields together.
Ablation modes rewire exactly this: dropping a path, restricting the
reconstruction to masked cells, swapping the structured attention for plain
attention, or removing the correction stack altogether.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .corpus import (
    Corpus,
    Document,
    MarkedDocument,
    Vocabulary,
    insert_markers,
    truncate_document,
)
from .encoder import MiniEncoder, PairMatrixBuilder, entity_states
from .inference import InferenceStack, MaskPlan, MaskVector, apply_mask, sample_mask
from .metrics import MetricsReport, collect_facts, f1_report, gold_predictions
from .objective import (
    Classifier,
    LabelScores,
    LossBreakdown,
    cell_distributions,
    decode,
    gold_label_tensor,
    loss_atl,
    loss_recon,
    total_loss,
)

CHECKPOINT_FORMAT_VERSION = 1

ABLATION_MODES = (
    "full",
    "no_mir",
    "only_mask_path",
    "masked_cells_only_recon",
    "no_imsa_plain_msa",
    "no_inference_module",
)

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; message carries step and parameter norms."""


@dataclass
class TrainConfig:
    # model sizes
    hidden_size: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    pair_in_width: int = 64
    pair_dim: int = 64
    heads_per_mode: int = 1
    ffn_expansion: int = 2
    activation: str = "gelu"
    max_tokens: int = 512
    max_entity_id: int = 64
    # objective and schedule
    mask_rate: float = 0.20
    inference_depth: int = 3
    alpha: float = 1.0
    beta: float = 1.0
    batch_size: int = 8
    epochs: int = 30
    lr_encoder: float = 1e-3
    lr_rest: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.06
    seed: int = 0
    dev_fraction: float = 0.1
    ablation_mode: str = "full"
    precision: str = "float32"

    def validate(self) -> None:
        if not (0.0 <= self.mask_rate <= 1.0):
            raise ValueError(f"mask_rate must be in [0, 1], got {self.mask_rate}")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.inference_depth < 0:
            raise ValueError("inference_depth must be >= 0")
        if self.inference_depth == 0 and self.ablation_mode != "no_inference_module":
            raise ValueError("inference_depth 0 is only valid with ablation_mode 'no_inference_module'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]


class RelationModel(nn.Module):
    """Encoder, pair-matrix builder, correction stack, classifier, and the
    learned mask vector, assembled per config."""

    def __init__(self, cfg: TrainConfig, vocab_size: int, num_relations: int):
        super().__init__()
        self.encoder = MiniEncoder(
            vocab_size,
            hidden=cfg.hidden_size,
            layers=cfg.encoder_layers,
            heads=cfg.encoder_heads,
            ffn_expansion=cfg.ffn_expansion,
            act=cfg.activation,
        )
        self.builder = PairMatrixBuilder(
            cfg.hidden_size, cfg.pair_in_width, cfg.pair_dim, cfg.activation
        )
        depth = 0 if cfg.ablation_mode == "no_inference_module" else cfg.inference_depth
        self.stack = InferenceStack(
            cfg.pair_dim,
            depth=depth,
            heads_per_mode=cfg.heads_per_mode,
            ffn_expansion=cfg.ffn_expansion,
            act=cfg.activation,
            plain_msa=cfg.ablation_mode == "no_imsa_plain_msa",
        )
        self.classifier = Classifier(cfg.pair_dim, num_relations)
        self.mask_vector = MaskVector(cfg.pair_dim)
        self.num_relations = num_relations

    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def rest_parameters(self):
        encoder_ids = {id(p) for p in self.encoder.parameters()}
        return [p for p in self.parameters() if id(p) not in encoder_ids]


def build_model(cfg: TrainConfig, vocab_size: int, num_relations: int) -> RelationModel:
    """Seeded, dtype-converted model construction."""
    torch.manual_seed(cfg.seed)
    model = RelationModel(cfg, vocab_size, num_relations)
    return model.to(cfg.dtype)


# ---------------------------------------------------------------------------
# Document preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedDoc:
    doc: Document  # original document (metrics reference this)
    trunc_doc: Document  # possibly truncated; model-side ids live here
    entity_map: list[int | None]  # original -> truncated entity index
    marked: MarkedDocument
    token_ids: Tensor
    gold_labels: Tensor  # (N_e, N_e, R) one-hot positives of the truncated doc
    warnings: tuple[str, ...]

    @property
    def num_entities(self) -> int:
        return self.trunc_doc.num_entities

    def to_original_ids(self, keys: set[tuple[int, int, int]]) -> set[tuple[int, int, int]]:
        inverse: dict[int, int] = {}
        for old, new in enumerate(self.entity_map):
            if new is not None:
                inverse[new] = old
        return {(inverse[h], inverse[t], r) for h, t, r in keys}


def prepare_document(
    doc: Document,
    vocab: Vocabulary,
    type_vocab: Sequence[str],
    cfg: TrainConfig,
    num_relations: int,
) -> PreparedDoc:
    trunc, entity_map, warnings = truncate_document(doc, cfg.max_tokens)
    marked = insert_markers(trunc, type_vocab, cfg.max_entity_id)
    token_ids = torch.tensor(vocab.encode(marked.tokens), dtype=torch.long)
    gold_labels = gold_label_tensor(trunc.triples, trunc.num_entities, num_relations, dtype=cfg.dtype)
    return PreparedDoc(
        doc=doc,
        trunc_doc=trunc,
        entity_map=entity_map,
        marked=marked,
        token_ids=token_ids,
        gold_labels=gold_labels,
        warnings=tuple(warnings) + marked.warnings,
    )


def prepare_corpus(
    corpus: Corpus,
    vocab: Vocabulary,
    type_vocab: Sequence[str],
    cfg: TrainConfig,
    num_relations: int | None = None,
) -> list[PreparedDoc]:
    if num_relations is None:
        num_relations = corpus.num_relations
    return [prepare_document(doc, vocab, type_vocab, cfg, num_relations) for doc in corpus.documents]


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    breakdown: LossBreakdown
    scores_original: LabelScores | None
    scores_masked: LabelScores | None
    plan: MaskPlan | None


def forward_step(
    model: RelationModel, prep: PreparedDoc, cfg: TrainConfig, rng: np.random.Generator
) -> StepResult:
    """One dual-path pass over a document; the mask plan is freshly sampled
    from ``rng`` on every call."""
    n = prep.num_entities
    if n < 2:
        raise ValueError(f"{prep.doc.doc_id}: needs at least 2 entities, has {n}")
    mode = cfg.ablation_mode

    enc = model.encoder(prep.token_ids)
    states = entity_states(enc, prep.marked)
    matrix = model.builder(states, enc)
    valid = matrix.valid_cells()

    scores_o: LabelScores | None = None
    scores_m: LabelScores | None = None
    plan: MaskPlan | None = None

    recon_cells = valid
    if mode == "no_mir":
        scores_o = model.classifier(model.stack(matrix), valid)
    elif mode == "only_mask_path":
        plan = sample_mask(n, cfg.mask_rate, seed=int(rng.integers(0, 2**62)))
        masked = apply_mask(matrix, plan, model.mask_vector)
        scores_m = model.classifier(model.stack(masked), valid)
    else:
        plan = sample_mask(n, cfg.mask_rate, seed=int(rng.integers(0, 2**62)))
        masked = apply_mask(matrix, plan, model.mask_vector)
        corrected = model.stack(torch.stack([matrix.values, masked.values]))
        scores_o = model.classifier(corrected[0], valid)
        scores_m = model.classifier(corrected[1], valid)
        if mode == "masked_cells_only_recon":
            recon_cells = valid & masked.mask

    cls_terms = [loss_atl(s, prep.gold_labels) for s in (scores_o, scores_m) if s is not None]
    l_cls = sum(cls_terms) / len(cls_terms)

    if scores_o is not None and scores_m is not None and mode != "only_mask_path":
        l_recon = loss_recon(
            cell_distributions(scores_o), cell_distributions(scores_m), recon_cells
        )
    else:
        l_recon = torch.zeros((), dtype=l_cls.dtype)

    return StepResult(
        breakdown=total_loss(l_recon, l_cls, cfg.alpha, cfg.beta),
        scores_original=scores_o,
        scores_masked=scores_m,
        plan=plan,
    )


def predict_document(
    model: RelationModel,
    prep: PreparedDoc,
    eval_mask_rate: float = 0.0,
    mask_seed: int = 0,
) -> set[tuple[int, int, int]]:
    """Decode one document; predictions use the original path unless an
    evaluation mask rate is given, in which case the matrix is masked first.
    Returned entity ids refer to the original (untruncated) document."""
    if prep.num_entities < 2:
        return set()
    with torch.no_grad():
        enc = model.encoder(prep.token_ids)
        states = entity_states(enc, prep.marked)
        matrix = model.builder(states, enc)
        if eval_mask_rate > 0.0:
            plan = sample_mask(prep.num_entities, eval_mask_rate, seed=mask_seed)
            matrix = apply_mask(matrix, plan, model.mask_vector)
        scores = model.classifier(model.stack(matrix), matrix.valid_cells())
        return prep.to_original_ids(decode(scores))


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    format_version: int
    config: TrainConfig
    epoch: int
    best_dev_f1: float
    params: dict[str, np.ndarray]
    rng_state: dict
    vocab_tokens: list[str]
    relation_names: list[str]
    entity_types: list[str]

    def state_dict_tensors(self) -> dict[str, Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.params.items()}


def _snapshot_params(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def _snapshot_rng(rng: np.random.Generator) -> dict:
    return {
        "numpy": rng.bit_generator.state,
        "torch": torch.get_rng_state().numpy().copy(),
    }


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state["numpy"]
    torch.set_rng_state(torch.from_numpy(state["torch"].copy()))
    return rng


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Single-file archive: a JSON header line followed by the raw little-
    endian tensor bytes.  Equal checkpoint contents give equal bytes."""
    blobs: list[bytes] = []
    params_meta = []
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr)
        params_meta.append([name, arr.dtype.str, list(arr.shape)])
        blobs.append(arr.tobytes())
    torch_rng = np.ascontiguousarray(ckpt.rng_state["torch"]).tobytes()
    header = {
        "format_version": ckpt.format_version,
        "config": asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "best_dev_f1": ckpt.best_dev_f1,
        "params_meta": params_meta,
        "rng_numpy": ckpt.rng_state["numpy"],
        "torch_rng_bytes": len(torch_rng),
        "vocab_tokens": list(ckpt.vocab_tokens),
        "relation_names": list(ckpt.relation_names),
        "entity_types": list(ckpt.entity_types),
    }
    out = json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(blobs) + torch_rng
    Path(path).write_bytes(out)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    newline = raw.index(b"\n")
    header = json.loads(raw[:newline].decode())
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    body = raw[newline + 1 :]
    params: dict[str, np.ndarray] = {}
    offset = 0
    for name, dtype_str, shape in header["params_meta"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype_str).itemsize
        params[name] = np.frombuffer(body, dtype=np.dtype(dtype_str), count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    torch_rng = np.frombuffer(body, dtype=np.uint8, count=header["torch_rng_bytes"], offset=offset).copy()
    return Checkpoint(
        format_version=version,
        config=TrainConfig(**header["config"]),
        epoch=header["epoch"],
        best_dev_f1=header["best_dev_f1"],
        params=params,
        rng_state={"numpy": header["rng_numpy"], "torch": torch_rng},
        vocab_tokens=header["vocab_tokens"],
        relation_names=header["relation_names"],
        entity_types=header["entity_types"],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[RelationModel, TrainConfig, Vocabulary]:
    cfg = ckpt.config
    vocab = Vocabulary(ckpt.vocab_tokens)
    model = build_model(cfg, len(vocab), len(ckpt.relation_names))
    model.load_state_dict(ckpt.state_dict_tensors())
    return model, cfg, vocab


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    skipped_docs: int
    best_epoch: int


def _split_dev(corpus: Corpus, cfg: TrainConfig) -> tuple[Corpus, Corpus]:
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(corpus.documents))
    n_dev = max(1, int(round(cfg.dev_fraction * len(corpus.documents))))
    dev_idx = set(int(i) for i in order[:n_dev])
    train_docs = tuple(d for i, d in enumerate(corpus.documents) if i not in dev_idx)
    dev_docs = tuple(d for i, d in enumerate(corpus.documents) if i in dev_idx)
    return (
        replace(corpus, documents=train_docs),
        replace(corpus, documents=dev_docs),
    )


def _lr_lambda(total_steps: int, warmup_frac: float):
    warmup = max(1, int(round(warmup_frac * total_steps)))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        remaining = max(0, total_steps - step)
        return remaining / max(1, total_steps - warmup)

    return factor


def make_optimizer(model: RelationModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        [
            {"params": model.encoder_parameters(), "lr": cfg.lr_encoder},
            {"params": model.rest_parameters(), "lr": cfg.lr_rest},
        ],
        weight_decay=cfg.weight_decay,
    )


def train(
    train_corpus: Corpus,
    cfg: TrainConfig,
    dev_corpus: Corpus | None = None,
    resume_from: Checkpoint | None = None,
) -> TrainResult:
    """Train on whole documents with fresh mask plans per forward pass; the
    returned checkpoint holds the parameters of the best dev-F1 epoch."""
    cfg.validate()
    if dev_corpus is None:
        train_corpus, dev_corpus = _split_dev(train_corpus, cfg)
    if dev_corpus.relation_names != train_corpus.relation_names:
        raise ValueError("train and dev corpora must share one relation vocabulary")

    if resume_from is not None:
        vocab = Vocabulary(resume_from.vocab_tokens)
        type_vocab = list(resume_from.entity_types)
        model = build_model(cfg, len(vocab), len(resume_from.relation_names))
        model.load_state_dict(resume_from.state_dict_tensors())
        rng = _restore_rng(resume_from.rng_state)
        start_epoch = resume_from.epoch + 1
    else:
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        vocab = Vocabulary.build(train_corpus, max_id=cfg.max_entity_id)
        type_vocab = list(train_corpus.entity_types)
        model = build_model(cfg, len(vocab), train_corpus.num_relations)
        start_epoch = 0

    preps = prepare_corpus(train_corpus, vocab, type_vocab, cfg)
    dev_preps = prepare_corpus(dev_corpus, vocab, type_vocab, cfg)
    train_facts = collect_facts(train_corpus)
    dev_gold = gold_predictions(dev_corpus)

    trainable = [p for p in preps if p.num_entities >= 2]
    skipped = len(preps) - len(trainable)

    optimizer = make_optimizer(model, cfg)
    steps_per_epoch = max(1, (len(trainable) + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    factor = _lr_lambda(total_steps, cfg.warmup_frac)
    step_offset = start_epoch * steps_per_epoch
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lr_lambda=lambda step: factor(step + step_offset)
    )

    history: list[dict] = []
    best_f1 = -1.0
    best_epoch = -1
    best_state: dict[str, np.ndarray] | None = None
    best_rng: dict | None = None
    global_step = start_epoch * steps_per_epoch

    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(trainable))
        sums = {"total": 0.0, "recon": 0.0, "cls": 0.0}
        n_docs = 0
        for batch_start in range(0, len(order), cfg.batch_size):
            batch = order[batch_start : batch_start + cfg.batch_size]
            losses = []
            for idx in batch:
                result = forward_step(model, trainable[int(idx)], cfg, rng)
                losses.append(result.breakdown)
            loss = sum(b.total for b in losses) / len(losses)
            if not torch.isfinite(loss):
                norms = {
                    name: float(p.detach().norm()) for name, p in model.named_parameters()
                }
                raise TrainingDiverged(
                    f"non-finite loss at step {global_step}; parameter norms: {norms}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            global_step += 1
            for b in losses:
                d = b.detached()
                sums["total"] += d.total
                sums["recon"] += d.recon
                sums["cls"] += d.cls
                n_docs += 1

        report = evaluate_prepared(model, dev_preps, dev_gold, dev_corpus, train_facts)
        row = {
            "epoch": epoch,
            "train_loss": sums["total"] / max(1, n_docs),
            "loss_recon": sums["recon"] / max(1, n_docs),
            "loss_cls": sums["cls"] / max(1, n_docs),
            "dev_f1": report.f1,
            "dev_ign_f1": report.ign_f1,
            "dev_inter_f1": report.inter_f1,
            "dev_infer_f1": report.infer_f1,
        }
        history.append(row)
        if report.f1 > best_f1:
            best_f1 = report.f1
            best_epoch = epoch
            best_state = _snapshot_params(model)
            best_rng = _snapshot_rng(rng)

    if best_state is None:  # no dev improvement recorded; keep final state
        best_state = _snapshot_params(model)
        best_rng = _snapshot_rng(rng)
        best_epoch = cfg.epochs - 1
        best_f1 = history[-1]["dev_f1"] if history else 0.0

    checkpoint = Checkpoint(
        format_version=CHECKPOINT_FORMAT_VERSION,
        config=cfg,
        epoch=best_epoch,
        best_dev_f1=best_f1,
        params=best_state,
        rng_state=best_rng,
        vocab_tokens=list(vocab.tokens),
        relation_names=list(train_corpus.relation_names),
        entity_types=type_vocab,
    )
    return TrainResult(
        checkpoint=checkpoint, history=history, skipped_docs=skipped, best_epoch=best_epoch
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _eval_mask_seed(base_seed: int, doc_index: int) -> int:
    return int(np.random.default_rng([base_seed, 104729, doc_index]).integers(0, 2**62))


def evaluate_prepared(
    model: RelationModel,
    preps: list[PreparedDoc],
    gold: set,
    corpus: Corpus,
    train_facts: frozenset,
    eval_mask_rate: float = 0.0,
    mask_seed_base: int = 0,
) -> MetricsReport:
    model.eval()
    pred = set()
    for i, prep in enumerate(preps):
        keys = predict_document(
            model, prep, eval_mask_rate, mask_seed=_eval_mask_seed(mask_seed_base, i)
        )
        pred.update((prep.doc.doc_id, h, t, r) for h, t, r in keys)
    model.train()
    return f1_report(pred, gold, train_facts, corpus)


def evaluate(
    ckpt: Checkpoint,
    corpus: Corpus,
    eval_mask_rate: float = 0.0,
    train_facts: frozenset = frozenset(),
) -> MetricsReport:
    """Evaluate a checkpoint on a corpus; predictions come from the original
    path at rate 0, otherwise from a matrix masked at the given rate."""
    if list(corpus.relation_names) != list(ckpt.relation_names):
        unknown = [r for r in corpus.relation_names if r not in set(ckpt.relation_names)]
        raise ValueError(
            f"corpus relation vocabulary differs from checkpoint; unknown relations: {unknown}"
        )
    model, cfg, vocab = model_from_checkpoint(ckpt)
    preps = prepare_corpus(corpus, vocab, ckpt.entity_types, cfg)
    gold = gold_predictions(corpus)
    return evaluate_prepared(
        model, preps, gold, corpus, train_facts, eval_mask_rate, mask_seed_base=cfg.seed
    )


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_difference_error(
    loss_fn,
    named_params: list[tuple[str, Tensor]],
    epsilon: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences
    over randomly sampled parameter coordinates."""
    params = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(num_coords, total), replace=False)

    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for coord in sorted(int(c) for c in coords):
            p_idx = int(np.searchsorted(offsets, coord, side="right") - 1)
            offset = coord - int(offsets[p_idx])
            flat = params[p_idx].view(-1)
            original = flat[offset].item()
            flat[offset] = original + epsilon
            plus = float(loss_fn())
            flat[offset] = original - epsilon
            minus = float(loss_fn())
            flat[offset] = original
            numeric = (plus - minus) / (2 * epsilon)
            grad = grads[p_idx]
            analytic = 0.0 if grad is None else float(grad.reshape(-1)[offset])
            rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, rel)
    return worst


def grad_check(
    model: RelationModel,
    prep: PreparedDoc,
    cfg: TrainConfig,
    epsilon: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
) -> float:
    """Check the analytic gradient of the total loss on one document.

    The mask plan is frozen by reseeding the plan generator per call, so the
    loss is a pure function of the parameters.  Meant for float64 models.
    """

    def loss_fn():
        result = forward_step(model, prep, cfg, np.random.default_rng(seed))
        return result.breakdown.total

    return finite_difference_error(
        loss_fn, list(model.named_parameters()), epsilon=epsilon, num_coords=num_coords, seed=seed
    )
