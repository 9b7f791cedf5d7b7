"""Training: step targets, LR schedule, Adam, grounding pretraining, Text-VQA fine-tuning."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tc
from .corpus import (BEGIN, END, GRID_COLS, GRID_ROWS, PAD, AnswerVocab, Dataset, GroundingExample, ObjectRegion,
                     OcrLine, OcrToken, QAItem, build_text_vocab, build_vocab, gen_grounding, gen_splits, nonce_words)
from .geometry import NormBox
from .errors import ConfigError, ContractError, PreconditionError
from .model import NEG, Example, LogosModel, ModelConfig, build_example, collate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    total_iters: int = 2000
    base_lr: float = 1e-4
    warmup_iters: int = 100
    decay_points: tuple[int, ...] = (1167, 1583)
    decay_factor: float = 0.1
    seed: int = 0
    max_decode_steps: int = 12
    eval_every: int = 250
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    augment: bool = False

    def __post_init__(self):
        self.decay_points = tuple(int(d) for d in self.decay_points)
        if self.total_iters < 1 or self.batch_size < 1:
            raise ConfigError("total_iters and batch_size must be positive")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigError(f"warmup_iters {self.warmup_iters} must lie in [0, total_iters)")
        if any(b <= a for a, b in zip(self.decay_points, self.decay_points[1:])):
            raise ConfigError(f"decay points must increase strictly: {self.decay_points}")
        if self.decay_points and self.decay_points[-1] >= self.total_iters:
            raise ConfigError("decay points must precede total_iters")

    @classmethod
    def full_scale(cls, **over) -> "TrainConfig":
        """Published schedule: batch 48, 24k iterations, warm-up 1000, decays at 14k and 19k."""
        base = dict(batch_size=48, total_iters=24000, base_lr=1e-4, warmup_iters=1000,
                    decay_points=(14000, 19000))
        base.update(over)
        return cls(**base)

    @classmethod
    def desk(cls, total_iters: int, **over) -> "TrainConfig":
        """Full-scale schedule shape compressed to ``total_iters``."""
        scale = total_iters / 24000
        warmup = min(max(1, round(1000 * scale)), total_iters - 1)
        points = sorted({round(14000 * scale), round(19000 * scale)} - {0, total_iters})
        base = dict(total_iters=total_iters, warmup_iters=warmup, decay_points=tuple(points))
        base.update(over)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def lr_at(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it < cfg.total_iters:
        raise ContractError(f"iteration {it} outside [0, {cfg.total_iters})")
    lr = cfg.base_lr if cfg.warmup_iters == 0 else cfg.base_lr * min(1.0, it / cfg.warmup_iters)
    for point in cfg.decay_points:
        if it >= point:
            lr *= cfg.decay_factor
    return lr


# ---------------------------------------------------------------- targets

@dataclass
class StepTargets:
    """Valid output positions per decoding step; ``None`` marks a masked step."""

    steps: list[frozenset[int] | None]

    def __len__(self):
        return len(self.steps)

    @property
    def n_active(self) -> int:
        return sum(s is not None for s in self.steps)


def build_step_targets(gold_words: Sequence[str], vocab: AnswerVocab, ocr_texts: Sequence[str],
                       max_steps: int = 12) -> StepTargets:
    if len(gold_words) > max_steps - 1:
        raise PreconditionError(f"gold answer has {len(gold_words)} words; at most {max_steps - 1} fit before <end>")
    V = len(vocab)
    lowered = [t.lower() for t in ocr_texts]
    steps: list[frozenset[int] | None] = []
    for w in gold_words:
        w = w.lower()
        valid = {V + n for n, t in enumerate(lowered) if t == w}
        if w in vocab and w not in (PAD, BEGIN):
            valid.add(vocab.get(w))
        steps.append(frozenset(valid) if valid else None)
    steps.append(frozenset({vocab.get(END)}))
    return StepTargets(steps)


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with optional decoupled weight decay on matrices (biases and norms are exempt)."""

    def __init__(self, params: dict[str, tc.Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = self.params[k].data
            if self.weight_decay and p.ndim > 1:
                p = p * (1.0 - lr * self.weight_decay)
            self.params[k].data = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- fine-tuning loss

def teacher_forcing(model: LogosModel, examples: Sequence[Example]):
    """Decoder inputs and target matrix for a batch.

    Returns (batch, vocab_ids, copy_idx, target (B, T, V+N), n_active_steps).
    """
    T_cap = model.cfg.max_decode_steps
    batch = collate(examples)
    targets = [build_step_targets(ex.gold_words, model.answer_vocab, ex.ocr_texts, T_cap) for ex in examples]
    T = max(len(t) for t in targets)
    V = len(model.answer_vocab)
    N = batch.n_valid.shape[1]
    vocab_ids = np.full((len(examples), T), model.answer_vocab.get(PAD))
    copy_idx = np.full((len(examples), T), -1)
    target = np.zeros((len(examples), T, V + N))
    n_active = 0
    for b, (ex, st) in enumerate(zip(examples, targets)):
        ids, cps = model.prev_inputs(ex, ex.gold_words)
        vocab_ids[b, :len(ids)] = ids
        copy_idx[b, :len(cps)] = cps
        for t, valid in enumerate(st.steps):
            if valid is None:
                continue
            target[b, t, sorted(valid)] = 1.0 / len(valid)
            n_active += 1
    return batch, vocab_ids, copy_idx, target, n_active


def finetune_loss(model: LogosModel, examples: Sequence[Example]) -> tc.Tensor:
    """Mean cross-entropy over unmasked steps against uniform-over-valid-positions targets."""
    if not examples:
        raise ContractError("empty batch")
    batch, vocab_ids, copy_idx, target, n_active = teacher_forcing(model, examples)
    logits, mask = model.forward_steps(batch, vocab_ids, copy_idx)
    logp = tc.log_softmax(logits, mask)
    return (logp * target).sum() * (-1.0 / max(n_active, 1))


def loss_and_grads(model: LogosModel, loss_fn: Callable[[], tc.Tensor]):
    with tc.Tape() as tape:
        loss = loss_fn()
    return loss.item(), tc.backward(loss, tape, model.params)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale so the global L2 norm is at most ``max_norm`` (0 disables)."""
    if max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def finetune_step(model: LogosModel, opt: Adam, examples: Sequence[Example], it: int, cfg: TrainConfig) -> float:
    loss, grads = loss_and_grads(model, lambda: finetune_loss(model, examples))
    opt.step(clip_grads(grads, cfg.grad_clip), lr_at(it, cfg))
    return loss


# ---------------------------------------------------------------- grounding

def grounding_loss(model: LogosModel, examples: Sequence[GroundingExample]) -> tc.Tensor:
    for ex in examples:
        if len(ex.candidates) < 2:
            raise PreconditionError(f"grounding example with {len(ex.candidates)} candidates (need >= 2)")
    batch, feat, box, valid = model.grounding_batch([e.description for e in examples],
                                                    [e.candidates for e in examples])
    logits = model.grounding_logits(batch, feat, box, valid)
    logp = tc.log_softmax(logits, np.where(valid, 0.0, NEG))
    onehot = np.zeros(valid.shape)
    onehot[np.arange(len(examples)), [e.gold for e in examples]] = 1.0
    return (logp * onehot).sum() * (-1.0 / len(examples))


def grounding_accuracy(model: LogosModel, examples: Sequence[GroundingExample], chunk: int = 64) -> float:
    hits = 0
    with tc.no_tape():
        for s in range(0, len(examples), chunk):
            part = examples[s:s + chunk]
            batch, feat, box, valid = model.grounding_batch([e.description for e in part],
                                                            [e.candidates for e in part])
            logits = model.grounding_logits(batch, feat, box, valid).data + np.where(valid, 0.0, NEG)
            hits += int(sum(int(np.argmax(logits[b])) == e.gold for b, e in enumerate(part)))
    return hits / max(len(examples), 1)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def add(self, **rec):
        self.records.append(rec)
        log.debug("%s", rec)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")


def pretrain_grounding(model: LogosModel, examples: Sequence[GroundingExample], cfg: TrainConfig,
                       val: Sequence[GroundingExample] | None = None, train_log: TrainLog | None = None) -> TrainLog:
    """Referral-expression pretraining with cross-entropy over candidate regions."""
    if not examples:
        raise ContractError("no grounding examples")
    for ex in examples:
        if len(ex.candidates) < 2:
            raise PreconditionError(f"grounding example with {len(ex.candidates)} candidates (need >= 2)")
    train_log = train_log or TrainLog()
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    order = []
    best, best_params = -1.0, None
    for it in range(cfg.total_iters):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(examples)).tolist())
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        loss, grads = loss_and_grads(model, lambda: grounding_loss(model, [examples[i] for i in idx]))
        lr = lr_at(it, cfg)
        opt.step(grads, lr)
        if val is not None and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.total_iters):
            acc = grounding_accuracy(model, val)
            train_log.add(stage="pretrain", iter=it + 1, lr=lr, loss=round(loss, 6), val_accuracy=round(acc, 6))
            if acc > best:
                best, best_params = acc, model.copy_params()
        elif it % 50 == 0:
            train_log.add(stage="pretrain", iter=it, lr=lr, loss=round(loss, 6))
    if best_params is not None:
        model.load_params(best_params)
    return train_log


# ---------------------------------------------------------------- Text-VQA

class ExampleCache:
    """Featurized (item, source) examples, built once per dataset."""

    def __init__(self, model: LogosModel, ds: Dataset):
        self.ds = ds
        self.pairs = [(i, s) for i in range(len(ds.items)) for s in ds.sources]
        self._cache: dict[tuple[int, str], Example] = {}
        self.model = model

    def get(self, i: int, source: str) -> Example:
        key = (i, source)
        if key not in self._cache:
            it = self.ds.items[i]
            self._cache[key] = build_example(it.question, self.ds.objects[it.image_id],
                                             self.ds.ocr_by_source[source][it.image_id],
                                             self.model.cfg, self.model.text_vocab, it.answers[0])
        return self._cache[key]


def augment_scene(item: QAItem, objects: Sequence[ObjectRegion], lines: Sequence[OcrLine],
                  rng: np.random.Generator, label_features: Mapping[str, tuple[float, ...]] | None = None,
                  grid: tuple[int, int] = (GRID_COLS, GRID_ROWS)):
    """Fresh surface forms, labels and placement for one training scene.

    * every distinct OCR or gold word becomes a new nonce word, consistently;
    * with ``label_features``, object labels are permuted over the known label
      set; question tokens naming a label follow, and each object takes the
      feature of its new label;
    * each object moves, with the OCR lines centered inside its grid cell, to a
      randomly permuted cell of the layout grid.

    The answer keeps its meaning. Returns (question, objects, lines, gold answer).
    """
    cols, rows = grid
    gold_words = item.answers[0].split()
    distinct = list(dict.fromkeys([t.text for ln in lines for t in ln.tokens] + gold_words))
    mapping = dict(zip(distinct, nonce_words(rng, len(distinct))))
    question = tuple(item.question)
    if label_features:
        known = sorted(label_features)
        relabel = dict(zip(known, (known[i] for i in rng.permutation(len(known)))))
        question = tuple(relabel.get(w, w) for w in question)
        objects = [replace(o, label=relabel[o.label], feature=label_features[relabel[o.label]])
                   if o.label in relabel else o for o in objects]
    cell_of = lambda b: (min(cols - 1, int(b.center[0] * cols)), min(rows - 1, int(b.center[1] * rows)))
    perm = rng.permutation(cols * rows)
    shift = {}
    for c in range(cols * rows):
        src, dst = divmod(c, cols)[::-1], divmod(int(perm[c]), cols)[::-1]
        shift[src] = ((dst[0] - src[0]) / cols, (dst[1] - src[1]) / rows)
    clip = lambda v: min(1.0, max(0.0, v))
    moved = lambda b, d: NormBox(clip(b.x1 + d[0]), clip(b.y1 + d[1]), clip(b.x2 + d[0]), clip(b.y2 + d[1]))
    new_objects = [replace(o, box=moved(o.box, shift[cell_of(o.box)])) for o in objects]
    placed = []
    for ln in lines:
        d = shift[cell_of(ln.box)]
        placed.append((moved(ln.box, d), [(mapping[t.text], moved(t.box, d)) for t in ln.tokens]))
    placed.sort(key=lambda p: (p[1][0][1].y1, p[1][0][1].x1))
    src = lines[0].source_id if lines else ""
    new_lines = []
    for line_id, (box, toks) in enumerate(placed):
        tokens = tuple(OcrToken(w, b, line_id, j, src) for j, (w, b) in enumerate(toks))
        new_lines.append(OcrLine(line_id, box, tokens, src))
    return question, new_objects, new_lines, " ".join(mapping[w] for w in gold_words)


def label_feature_table(ds: Dataset) -> dict[str, tuple[float, ...]]:
    """First region feature seen for each object label."""
    table: dict[str, tuple[float, ...]] = {}
    for image_id in sorted(ds.objects):
        for o in ds.objects[image_id]:
            table.setdefault(o.label, o.feature)
    return table


def augmented_example(model: LogosModel, ds: Dataset, i: int, source: str, rng: np.random.Generator,
                      label_features: Mapping[str, tuple[float, ...]] | None = None) -> Example:
    it = ds.items[i]
    q, objects, lines, gold = augment_scene(it, ds.objects[it.image_id], ds.ocr_by_source[source][it.image_id],
                                            rng, label_features)
    return build_example(q, objects, lines, model.cfg, model.text_vocab, gold)


def epoch_batches(n_pairs: int, batch_size: int, rng: np.random.Generator):
    """One shuffled pass over every (item, source) pair; the last batch may be short."""
    order = rng.permutation(n_pairs)
    for s in range(0, n_pairs, batch_size):
        yield order[s:s + batch_size].tolist()


def finetune(model: LogosModel, train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
             train_log: TrainLog | None = None, evaluate_fn: Callable[[LogosModel], float] | None = None,
             visit_counter: dict | None = None) -> TrainLog:
    """Text-VQA training over the (item x source) product; keeps the best-validation weights."""
    train_log = train_log or TrainLog()
    cache = ExampleCache(model, train)
    rng = np.random.default_rng([cfg.seed, 2])
    aug_rng = np.random.default_rng([cfg.seed, 3])
    labels = label_feature_table(train) if cfg.augment else None
    opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    if evaluate_fn is None and val is not None:
        from .selector import evaluate_model
        evaluate_fn = lambda m: evaluate_model(m, val).mean_accuracy
    best, best_params = -1.0, None
    it = 0
    while it < cfg.total_iters:
        for idx in epoch_batches(len(cache.pairs), cfg.batch_size, rng):
            if it >= cfg.total_iters:
                break
            pairs = [cache.pairs[i] for i in idx]
            if visit_counter is not None:
                for p in pairs:
                    visit_counter[p] = visit_counter.get(p, 0) + 1
            if cfg.augment:
                batch = [augmented_example(model, train, *p, aug_rng, labels) for p in pairs]
            else:
                batch = [cache.get(*p) for p in pairs]
            loss = finetune_step(model, opt, batch, it, cfg)
            lr = lr_at(it, cfg)
            it += 1
            if evaluate_fn is not None and (it % cfg.eval_every == 0 or it == cfg.total_iters):
                acc = evaluate_fn(model)
                train_log.add(stage="train", iter=it, lr=lr, loss=round(loss, 6), val_accuracy=round(acc, 6))
                if acc > best:
                    best, best_params = acc, model.copy_params()
            elif it % 50 == 0:
                train_log.add(stage="train", iter=it, lr=lr, loss=round(loss, 6))
    if best_params is not None:
        model.load_params(best_params)
    return train_log


def make_model(train: Dataset, cfg: ModelConfig | None = None, seed: int = 0, vocab_size: int = 5000) -> LogosModel:
    """Fresh model with vocabularies derived from the training split."""
    cfg = cfg or ModelConfig(feature_width=_feature_width(train))
    return LogosModel(cfg, build_text_vocab(train), build_vocab([it.answers[0] for it in train.items], vocab_size),
                      seed)


def _feature_width(ds: Dataset) -> int:
    for objs in ds.objects.values():
        for o in objs:
            return len(o.feature)
    return ModelConfig.feature_width


# ---------------------------------------------------------------- desk recipe

DESK_GROUNDING_TRAIN = 4000
DESK_GROUNDING_VAL = 300
DESK_CANDIDATES = 4


def desk_model_config(feature_width: int = ModelConfig.feature_width, **over) -> ModelConfig:
    """Single-core model: narrow widths, fan-in initialised projections."""
    base = dict(d_model=32, n_heads=4, mm_layers=2, ffn_mult=2, init_std=0.1, fan_in_init=True,
                feature_width=feature_width)
    base.update(over)
    return ModelConfig(**base)


def desk_pretrain_config(total_iters: int = 600, **over) -> TrainConfig:
    return TrainConfig.desk(total_iters, **{**dict(base_lr=1e-3, batch_size=32, eval_every=100), **over})


def desk_finetune_config(total_iters: int = 3500, **over) -> TrainConfig:
    base = dict(base_lr=2e-3, batch_size=16, augment=True, eval_every=1750)
    return TrainConfig.desk(total_iters, **{**base, **over})


# ---------------------------------------------------------------- gradient check

def small_config(feature_width: int = 8) -> ModelConfig:
    return ModelConfig(d_model=4, n_heads=2, text_layers=3, mm_layers=1, ffn_mult=2, pos_width=4,
                       feature_width=feature_width, max_ocr_tokens=16)


def grad_check(model_cfg: ModelConfig | None = None, n_probes: int = 200, seed: int = 0,
               h: float = 1e-5) -> float:
    """Max of |analytic - numeric| / max(1, |analytic|) over random parameter entries.

    Central differences through the full fine-tuning loss on a tiny
    synthetic batch.
    """
    if n_probes <= 0:
        warnings.warn("grad_check with no probes is vacuous; returning 0", stacklevel=2)
        return 0.0
    cfg = model_cfg or small_config()
    train, _ = gen_splits(seed, 3, 1, feature_width=cfg.feature_width)
    model = make_model(train, cfg, seed=seed)
    if model.n_parameters > 5000:
        raise PreconditionError(f"gradient check model has {model.n_parameters} parameters (limit 5000)")
    rng = np.random.default_rng([seed, 3])
    for p in model.params.values():
        p.data = p.data + rng.normal(0.0, 0.3, p.data.shape)
    cache = ExampleCache(model, train)
    examples = [cache.get(*p) for p in cache.pairs]
    loss_fn = lambda: finetune_loss(model, examples)
    _, grads = loss_and_grads(model, loss_fn)
    names = sorted(model.params)
    sizes = np.array([model.params[n].data.size for n in names])
    flat = rng.choice(int(sizes.sum()), size=min(n_probes, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with tc.no_tape():
        for f in flat:
            k = int(np.searchsorted(bounds, f, side="right"))
            name = names[k]
            off = int(f - (bounds[k - 1] if k else 0))
            arr = model.params[name].data.reshape(-1)
            orig = arr[off]
            arr[off] = orig + h
            up = loss_fn().item()
            arr[off] = orig - h
            down = loss_fn().item()
            arr[off] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[off]
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return worst
