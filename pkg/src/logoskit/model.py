"""The LOGOS network at desk scale.

Data flow for one (question, OCR source) example::

    question | object labels | OCR words  --text encoder (3 layers)-->  contextual embeddings
    OCR:     [text ; PHOC ; spatial ; region feature ; box]  --linear+LN-->  fused OCR vectors
    objects: [label ; region feature ; box]                  --linear+LN-->  fused object vectors
    [question | objects | OCR | decoder prefix]  --multimodal transformer-->  hidden states
    decoder hidden  --vocab head + pointer head-->  distribution over V vocab words + N OCR copies

Everything is batched with padding; padded keys are masked out of attention.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .corpus import BEGIN, END, PAD, AnswerVocab, ObjectRegion, OcrLine, TextVocab
from .errors import CapacityError, ConfigError, ContractError, ShapeError
from .geometry import DEFAULT_EPSILON, cluster_lines, sinusoidal_table
from .phoc import PHOC_WIDTH, phoc_encode
from .tensor import Tensor

NEG = -1e9
SEG_QUESTION, SEG_OBJECT, SEG_OCR, SEG_DECODER = 0, 1, 2, 3
CKPT_FORMAT = "logoskit-ckpt-1"


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    text_layers: int = 3
    mm_layers: int = 2
    ffn_mult: int = 4
    max_decode_steps: int = 12
    phoc_width: int = PHOC_WIDTH
    pos_width: int = 32
    feature_width: int = 32
    max_text_len: int = 256
    max_ocr_tokens: int = 64
    epsilon: float = DEFAULT_EPSILON
    init_std: float = 0.02
    fan_in_init: bool = False
    pre_ln: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_decode_steps < 1:
            raise ConfigError("max_decode_steps must be >= 1")
        if self.pos_width % 2:
            raise ConfigError("pos_width must be even")

    @property
    def spatial_width(self) -> int:
        return 3 * self.pos_width

    @property
    def ocr_in_width(self) -> int:
        return self.d_model + self.phoc_width + self.spatial_width + self.feature_width + 4

    @property
    def obj_in_width(self) -> int:
        return self.d_model + self.feature_width + 4


# ---------------------------------------------------------------- featurization

@dataclass
class Example:
    """Numpy inputs for one (question, OCR source) pair."""

    q_ids: np.ndarray
    obj_ids: np.ndarray
    obj_feat: np.ndarray
    obj_box: np.ndarray
    ocr_ids: np.ndarray
    ocr_texts: list[str]
    ocr_phoc: np.ndarray
    ocr_spatial: np.ndarray
    ocr_feat: np.ndarray
    ocr_box: np.ndarray
    gold_words: list[str] = field(default_factory=list)

    @property
    def n_ocr(self) -> int:
        return len(self.ocr_texts)


def ocr_region_features(token_boxes: np.ndarray, objects: Sequence[ObjectRegion], width: int) -> np.ndarray:
    """Feature of the smallest object region containing each token's center (zeros if none)."""
    out = np.zeros((len(token_boxes), width))
    if not objects or len(token_boxes) == 0:
        return out
    ob = np.array([o.box.as_list() for o in objects])
    feats = np.array([o.feature for o in objects])
    area = (ob[:, 2] - ob[:, 0]) * (ob[:, 3] - ob[:, 1])
    cx = (token_boxes[:, 0] + token_boxes[:, 2]) / 2
    cy = (token_boxes[:, 1] + token_boxes[:, 3]) / 2
    inside = ((ob[None, :, 0] <= cx[:, None]) & (cx[:, None] <= ob[None, :, 2])
              & (ob[None, :, 1] <= cy[:, None]) & (cy[:, None] <= ob[None, :, 3]))
    for n in range(len(token_boxes)):
        hits = np.flatnonzero(inside[n])
        if hits.size:
            out[n] = feats[hits[np.argmin(area[hits])]]
    return out


def ocr_spatial_features(lines: Sequence[OcrLine], cfg: ModelConfig) -> np.ndarray:
    """Cluster | line | token sinusoidal codes for every token, in detection order."""
    n_tok = sum(len(ln.tokens) for ln in lines)
    if n_tok == 0:
        return np.zeros((0, cfg.spatial_width))
    assign = cluster_lines([ln.box for ln in lines], cfg.epsilon)
    rows = [(assign[i], i, j) for i, ln in enumerate(lines) for j in range(len(ln.tokens))]
    idx = np.array(rows)
    table = sinusoidal_table(int(idx.max()) + 1, cfg.pos_width)
    return np.concatenate([table[idx[:, 0]], table[idx[:, 1]], table[idx[:, 2]]], axis=1)


def build_example(question: Sequence[str], objects: Sequence[ObjectRegion], lines: Sequence[OcrLine],
                  cfg: ModelConfig, text_vocab: TextVocab, gold: str | None = None) -> Example:
    tokens = [t for ln in lines for t in ln.tokens]
    spatial = ocr_spatial_features(lines, cfg)
    if len(tokens) > cfg.max_ocr_tokens:
        tokens = tokens[:cfg.max_ocr_tokens]
        spatial = spatial[:cfg.max_ocr_tokens]
    total = len(question) + len(objects) + len(tokens)
    if total > cfg.max_text_len:
        raise CapacityError(f"text sequence of {total} exceeds cap {cfg.max_text_len}")
    texts = [t.text.lower() for t in tokens]
    boxes = np.array([t.box.as_list() for t in tokens]).reshape(-1, 4)
    for o in objects:
        if len(o.feature) != cfg.feature_width:
            raise ShapeError(f"object feature width {len(o.feature)} != configured {cfg.feature_width}")
    return Example(
        q_ids=np.array(text_vocab.ids(question), dtype=np.int64),
        obj_ids=np.array(text_vocab.ids([o.label for o in objects]), dtype=np.int64),
        obj_feat=np.array([o.feature for o in objects]).reshape(-1, cfg.feature_width),
        obj_box=np.array([o.box.as_list() for o in objects]).reshape(-1, 4),
        ocr_ids=np.array(text_vocab.ids(texts), dtype=np.int64),
        ocr_texts=texts,
        ocr_phoc=np.array([phoc_encode(t) for t in texts]).reshape(-1, cfg.phoc_width),
        ocr_spatial=spatial.reshape(-1, cfg.spatial_width),
        ocr_feat=ocr_region_features(boxes, objects, cfg.feature_width),
        ocr_box=boxes,
        gold_words=gold.lower().split() if gold is not None else [],
    )


@dataclass
class Batch:
    examples: list[Example]
    text_ids: np.ndarray      # (B, Q+O+N)
    text_seg: np.ndarray      # (Q+O+N,)
    text_pos: np.ndarray      # (B, Q+O+N)  true position in the unpadded concatenation
    q_valid: np.ndarray
    o_valid: np.ndarray
    n_valid: np.ndarray
    obj_feat: np.ndarray
    obj_box: np.ndarray
    ocr_phoc: np.ndarray
    ocr_spatial: np.ndarray
    ocr_feat: np.ndarray
    ocr_box: np.ndarray

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.q_valid.shape[1], self.o_valid.shape[1], self.n_valid.shape[1]


def _pad(arrs: list[np.ndarray], length: int, fill=0.0) -> np.ndarray:
    tail = arrs[0].shape[1:]
    out = np.full((len(arrs), length) + tail, fill, dtype=arrs[0].dtype)
    for b, a in enumerate(arrs):
        out[b, :len(a)] = a
    return out


def collate(examples: Sequence[Example]) -> Batch:
    if not examples:
        raise ContractError("cannot collate an empty batch")
    Q = max(len(e.q_ids) for e in examples)
    O = max(len(e.obj_ids) for e in examples)
    N = max(e.n_ocr for e in examples)
    lens = lambda attr: np.array([len(getattr(e, attr)) for e in examples])
    q_len, o_len, n_len = lens("q_ids"), lens("obj_ids"), lens("ocr_ids")
    ar = lambda n: np.arange(n)[None, :]
    q_valid, o_valid, n_valid = ar(Q) < q_len[:, None], ar(O) < o_len[:, None], ar(N) < n_len[:, None]
    ids = np.concatenate([
        _pad([e.q_ids for e in examples], Q, 0),
        _pad([e.obj_ids for e in examples], O, 0),
        _pad([e.ocr_ids for e in examples], N, 0),
    ], axis=1)
    pos = np.concatenate([
        np.broadcast_to(ar(Q), (len(examples), Q)),
        q_len[:, None] + ar(O),
        q_len[:, None] + o_len[:, None] + ar(N),
    ], axis=1)
    seg = np.concatenate([np.full(Q, SEG_QUESTION), np.full(O, SEG_OBJECT), np.full(N, SEG_OCR)])
    return Batch(
        list(examples), ids, seg, pos, q_valid, o_valid, n_valid,
        _pad([e.obj_feat for e in examples], O), _pad([e.obj_box for e in examples], O),
        _pad([e.ocr_phoc for e in examples], N), _pad([e.ocr_spatial for e in examples], N),
        _pad([e.ocr_feat for e in examples], N), _pad([e.ocr_box for e in examples], N),
    )


# ---------------------------------------------------------------- network

@dataclass
class StepDistribution:
    probs: np.ndarray
    n_vocab: int
    n_ocr: int


@dataclass
class DecodedAnswer:
    tokens: list[str]
    positions: list[int]
    step_probs: list[float]
    terminated_by: str
    end_prob: float = 1.0

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


class LogosModel:
    def __init__(self, cfg: ModelConfig, text_vocab: TextVocab, answer_vocab: AnswerVocab, seed: int = 0):
        self.cfg = cfg
        self.text_vocab = text_vocab
        self.answer_vocab = answer_vocab
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult

        def w(name, *shape):
            std = cfg.init_std
            if cfg.fan_in_init and len(shape) == 2 and "emb" not in name:
                std = 1.0 / math.sqrt(shape[0])
            self.params[name] = tc.parameter(rng.normal(0.0, std, shape), name)

        def zeros(name, *shape):
            self.params[name] = tc.parameter(np.zeros(shape), name)

        def ln(name):
            self.params[f"{name}.g"] = tc.parameter(np.ones(d), f"{name}.g")
            zeros(f"{name}.b", d)

        def block(p):
            for m in ("q", "k", "v", "o"):
                w(f"{p}.w{m}", d, d)
                zeros(f"{p}.b{m}", d)
            ln(f"{p}.ln1")
            w(f"{p}.w1", d, f)
            zeros(f"{p}.b1", f)
            w(f"{p}.w2", f, d)
            zeros(f"{p}.b2", d)
            ln(f"{p}.ln2")

        w("txt.tok_emb", len(text_vocab), d)
        w("txt.seg_emb", 3, d)
        ln("txt.emb_ln")
        for layer in range(cfg.text_layers):
            block(f"txt.L{layer}")
        # The region-feature rows are shared by both fusions (see fuse_ocr).
        w("region.proj.w", cfg.feature_width, d)
        w("ocr.proj.w", cfg.ocr_in_width - cfg.feature_width, d)
        zeros("ocr.proj.b", d)
        ln("ocr.ln")
        w("obj.proj.w", cfg.obj_in_width - cfg.feature_width, d)
        zeros("obj.proj.b", d)
        ln("obj.ln")
        w("mm.type_emb", 4, d)
        for layer in range(cfg.mm_layers):
            block(f"mm.L{layer}")
        w("dec.ans_emb", len(answer_vocab), d)
        ln("dec.ln")
        w("head.vocab.w", d, len(answer_vocab))
        zeros("head.vocab.b", len(answer_vocab))
        w("head.copy_o.w", d, d)
        zeros("head.copy_o.b", d)
        w("head.copy_d.w", d, d)
        zeros("head.copy_d.b", d)
        w("ground.w", d, 1)
        zeros("ground.b", 1)

        self._pos_cache = sinusoidal_table(max(cfg.max_text_len, cfg.max_decode_steps + 1), d)
        vocab_mask = np.zeros(len(answer_vocab))
        vocab_mask[[answer_vocab.get(PAD), answer_vocab.get(BEGIN)]] = NEG
        self._vocab_mask = vocab_mask

    # -------------------------------------------------------- bookkeeping

    @property
    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_params(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            if self.params[k].data.shape != np.shape(v):
                raise ShapeError(f"parameter {k}: shape {np.shape(v)} != {self.params[k].data.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    # -------------------------------------------------------- building blocks

    def _linear(self, x, prefix_w: str, prefix_b: str):
        return x @ self.p(prefix_w) + self.p(prefix_b)

    def _ln(self, x, name: str):
        return tc.layer_norm(x, self.p(f"{name}.g"), self.p(f"{name}.b"), self.cfg.ln_eps)

    def attention(self, prefix: str, x: Tensor, mask: np.ndarray):
        """Multi-head self-attention. Returns (output, attention probabilities)."""
        B, L, d = x.shape
        H = self.cfg.n_heads
        dh = d // H

        def heads(m):
            return self._linear(x, f"{prefix}.w{m}", f"{prefix}.b{m}").reshape(B, L, H, dh).transpose(0, 2, 1, 3)

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        attn = tc.softmax(scores, mask)
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
        return self._linear(out, f"{prefix}.wo", f"{prefix}.bo"), attn

    def block(self, prefix: str, x: Tensor, mask: np.ndarray, attn_log: list | None = None) -> Tensor:
        if self.cfg.pre_ln:
            a, probs = self.attention(prefix, self._ln(x, f"{prefix}.ln1"), mask)
            if attn_log is not None:
                attn_log.append(probs.data)
            x = x + a
            h = tc.gelu(self._linear(self._ln(x, f"{prefix}.ln2"), f"{prefix}.w1", f"{prefix}.b1"))
            return x + self._linear(h, f"{prefix}.w2", f"{prefix}.b2")
        a, probs = self.attention(prefix, x, mask)
        if attn_log is not None:
            attn_log.append(probs.data)
        x = self._ln(x + a, f"{prefix}.ln1")
        h = tc.gelu(self._linear(x, f"{prefix}.w1", f"{prefix}.b1"))
        return self._ln(x + self._linear(h, f"{prefix}.w2", f"{prefix}.b2"), f"{prefix}.ln2")

    # -------------------------------------------------------- text encoder

    def encode_batch(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        """3-layer encoder over question | object labels | OCR words; returns the three slices."""
        Q, O, N = batch.dims
        key_valid = np.concatenate([batch.q_valid, batch.o_valid, batch.n_valid], axis=1)
        mask = np.where(key_valid, 0.0, NEG)[:, None, None, :]
        x = (tc.embedding_lookup(self.p("txt.tok_emb"), batch.text_ids)
             + tc.embedding_lookup(self.p("txt.seg_emb"), batch.text_seg)
             + self._pos_cache[np.minimum(batch.text_pos, len(self._pos_cache) - 1)])
        x = self._ln(x, "txt.emb_ln")
        for layer in range(self.cfg.text_layers):
            x = self.block(f"txt.L{layer}", x, mask)
        return x[:, :Q], x[:, Q:Q + O], x[:, Q + O:]

    def encode_text(self, question_tokens: Sequence[str], object_labels: Sequence[str],
                    ocr_texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Single-example convenience wrapper around :meth:`encode_batch`."""
        total = len(question_tokens) + len(object_labels) + len(ocr_texts)
        if total > self.cfg.max_text_len:
            raise CapacityError(f"text sequence of {total} exceeds cap {self.cfg.max_text_len}")
        tv = self.text_vocab
        F = self.cfg.feature_width
        ex = Example(np.array(tv.ids(question_tokens), dtype=np.int64),
                     np.array(tv.ids(object_labels), dtype=np.int64),
                     np.zeros((len(object_labels), F)), np.zeros((len(object_labels), 4)),
                     np.array(tv.ids(ocr_texts), dtype=np.int64), list(ocr_texts),
                     np.zeros((len(ocr_texts), self.cfg.phoc_width)),
                     np.zeros((len(ocr_texts), self.cfg.spatial_width)),
                     np.zeros((len(ocr_texts), F)), np.zeros((len(ocr_texts), 4)))
        with tc.no_tape():
            q, o, n = self.encode_batch(collate([ex]))
        return q.data[0], o.data[0], n.data[0]

    # -------------------------------------------------------- fusion

    def fuse_ocr(self, text_emb, phoc, spatial, region_feature, box) -> Tensor:
        parts = [tc.as_tensor(t) for t in (text_emb, phoc, spatial, region_feature, box)]
        widths = [p.shape[-1] for p in parts]
        cfg = self.cfg
        expect = [cfg.d_model, cfg.phoc_width, cfg.spatial_width, cfg.feature_width, 4]
        if widths != expect:
            raise ShapeError(f"fuse_ocr input widths {widths} != expected {expect}")
        return self._ln(self._project([parts[0], parts[1], parts[2], parts[4]], parts[3], "ocr"), "ocr.ln")

    def fuse_object(self, label_emb, region_feature, box) -> Tensor:
        parts = [tc.as_tensor(t) for t in (label_emb, region_feature, box)]
        widths = [p.shape[-1] for p in parts]
        expect = [self.cfg.d_model, self.cfg.feature_width, 4]
        if widths != expect:
            raise ShapeError(f"fuse_object input widths {widths} != expected {expect}")
        return self._ln(self._project([parts[0], parts[2]], parts[1], "obj"), "obj.ln")

    def _project(self, rest: list[Tensor], feature: Tensor, prefix: str) -> Tensor:
        """Linear map of the fused concatenation, with the region-feature rows shared.

        Tying those rows lets what grounding pretraining learns about region
        features carry over to OCR tokens, whose feature is their region's.
        """
        w = self.p(f"{prefix}.proj.w")
        out, row = feature @ self.p("region.proj.w"), 0
        for part in rest:
            width = part.shape[-1]
            out = out + part @ w[row:row + width]
            row += width
        return out + self.p(f"{prefix}.proj.b")

    # -------------------------------------------------------- multimodal transformer

    @staticmethod
    def mm_mask(enc_valid: np.ndarray, n_dec: int) -> np.ndarray:
        """Additive mask (B, 1, L, L).

        Encoder positions see every valid encoder position and no decoder
        position. Decoder step t sees the encoder and decoder steps <= t.
        """
        B, E = enc_valid.shape
        L = E + n_dec
        allowed = np.zeros((B, L, L), dtype=bool)
        allowed[:, :, :E] = enc_valid[:, None, :]
        if n_dec:
            allowed[:, E:, E:] = np.tril(np.ones((n_dec, n_dec), dtype=bool))[None]
        return np.where(allowed, 0.0, NEG)[:, None]

    def mm_forward(self, q_emb: Tensor, obj_fused: Tensor, ocr_fused: Tensor | None,
                   dec_in: Tensor | None, valid: Sequence[np.ndarray], attn_log: list | None = None) -> Tensor:
        te = self.p("mm.type_emb")
        segs = [q_emb + te[SEG_QUESTION], obj_fused + te[SEG_OBJECT]]
        if ocr_fused is not None:
            segs.append(ocr_fused + te[SEG_OCR])
        n_dec = 0
        if dec_in is not None:
            n_dec = dec_in.shape[1]
            if n_dec > self.cfg.max_decode_steps:
                raise ContractError(f"decoder prefix {n_dec} exceeds T={self.cfg.max_decode_steps}")
            segs.append(dec_in + te[SEG_DECODER])
        enc_valid = np.concatenate(list(valid), axis=1)
        if enc_valid.shape[1] + n_dec != sum(s.shape[1] for s in segs):
            raise ContractError("validity masks do not match the sequence layout")
        x = tc.concat(segs, axis=1)
        mask = self.mm_mask(enc_valid, n_dec)
        for layer in range(self.cfg.mm_layers):
            x = self.block(f"mm.L{layer}", x, mask, attn_log)
        return x

    # -------------------------------------------------------- heads

    def step_logits(self, dec_h: Tensor, ocr_h: Tensor, n_valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Logits over V vocab words then N OCR copies, plus the additive mask to apply."""
        vocab = self._linear(dec_h, "head.vocab.w", "head.vocab.b")
        ko = self._linear(ocr_h, "head.copy_o.w", "head.copy_o.b")
        qd = self._linear(dec_h, "head.copy_d.w", "head.copy_d.b")
        copy = qd @ ko.transpose(0, 2, 1)
        B, T = dec_h.shape[0], dec_h.shape[1]
        mask = np.concatenate([
            np.broadcast_to(self._vocab_mask, (B, T, len(self.answer_vocab))),
            np.broadcast_to(np.where(n_valid, 0.0, NEG)[:, None, :], (B, T, n_valid.shape[1])),
        ], axis=-1)
        return tc.concat_last([vocab, copy]), mask

    def fused_inputs(self, batch: Batch):
        q, o, n = self.encode_batch(batch)
        obj_f = self.fuse_object(o, batch.obj_feat, batch.obj_box)
        ocr_f = self.fuse_ocr(n, batch.ocr_phoc, batch.ocr_spatial, batch.ocr_feat, batch.ocr_box)
        return q, obj_f, ocr_f

    def decoder_inputs(self, ocr_f: Tensor, vocab_ids: np.ndarray, copy_idx: np.ndarray) -> Tensor:
        """Previous-emission embeddings: a copied token's fused vector, else the vocab embedding."""
        B, T = vocab_ids.shape
        is_copy = (copy_idx >= 0).astype(np.float64)[..., None]
        emb = tc.embedding_lookup(self.p("dec.ans_emb"), vocab_ids) * (1.0 - is_copy)
        if ocr_f.shape[1] and is_copy.any():
            rows = np.broadcast_to(np.arange(B)[:, None], (B, T))
            emb = emb + ocr_f[rows, np.maximum(copy_idx, 0)] * is_copy
        return self._ln(emb + self._pos_cache[:T], "dec.ln")

    def prev_inputs(self, ex: Example, words: Sequence[str | None]) -> tuple[list[int], list[int]]:
        """Map previous emissions (by surface form) to decoder-input ids.

        The first step is always ``<begin>``. A word present among the OCR
        copies feeds its first matching copy; otherwise its vocab embedding;
        otherwise ``<pad>``.
        """
        av = self.answer_vocab
        vocab_ids, copy_idx = [av.get(BEGIN)], [-1]
        for w in words:
            if w is not None and w in ex.ocr_texts:
                vocab_ids.append(av.get(PAD))
                copy_idx.append(ex.ocr_texts.index(w))
            else:
                vocab_ids.append(av.get(w, av.get(PAD)) if w is not None else av.get(PAD))
                copy_idx.append(-1)
        return vocab_ids, copy_idx

    def forward_steps(self, batch: Batch, vocab_ids: np.ndarray, copy_idx: np.ndarray,
                      attn_log: list | None = None, fused=None):
        """Teacher-forced pass. Returns (logits (B, T, V+N), additive mask)."""
        q, obj_f, ocr_f = fused if fused is not None else self.fused_inputs(batch)
        dec_in = self.decoder_inputs(ocr_f, vocab_ids, copy_idx)
        h = self.mm_forward(q, obj_f, ocr_f, dec_in, [batch.q_valid, batch.o_valid, batch.n_valid], attn_log)
        Q, O, N = batch.dims
        return self.step_logits(h[:, Q + O + N:], h[:, Q + O:Q + O + N], batch.n_valid)

    def grounding_logits(self, batch: Batch, cand_feat: np.ndarray, cand_box: np.ndarray,
                         cand_valid: np.ndarray) -> Tensor:
        """Candidate scores before the softmax.

        Only the description goes through the text encoder; candidates are
        fused from region feature and box with a zero label embedding, so the
        head has to ground words in visual features.
        """
        q, _, _ = self.encode_batch(batch)
        B, O = cand_valid.shape
        cand = self.fuse_object(np.zeros((B, O, self.cfg.d_model)), cand_feat, cand_box)
        h = self.mm_forward(q, cand, None, None, [batch.q_valid, cand_valid])
        Q = batch.q_valid.shape[1]
        return (h[:, Q:] @ self.p("ground.w") + self.p("ground.b")).reshape(B, O)

    def grounding_batch(self, questions: Sequence[Sequence[str]],
                        candidate_sets: Sequence[Sequence[ObjectRegion]]):
        """Collate referral examples: (text batch, candidate features, boxes, validity)."""
        for cands in candidate_sets:
            if len(cands) < 2:
                raise ContractError(f"grounding needs >= 2 candidates, got {len(cands)}")
        batch = collate([build_example(q, [], [], self.cfg, self.text_vocab) for q in questions])
        F = self.cfg.feature_width
        O = max(len(c) for c in candidate_sets)
        feat = np.zeros((len(candidate_sets), O, F))
        box = np.zeros((len(candidate_sets), O, 4))
        valid = np.zeros((len(candidate_sets), O), dtype=bool)
        for b, cands in enumerate(candidate_sets):
            for i, c in enumerate(cands):
                if len(c.feature) != F:
                    raise ShapeError(f"candidate feature width {len(c.feature)} != {F}")
                feat[b, i] = c.feature
                box[b, i] = c.box.as_list()
                valid[b, i] = True
        return batch, feat, box, valid

    def grounding_scores(self, question: Sequence[str], candidates: Sequence[ObjectRegion]) -> np.ndarray:
        """Probability of each candidate region being the one the description refers to."""
        batch, feat, box, valid = self.grounding_batch([question], [candidates])
        with tc.no_tape():
            logits = self.grounding_logits(batch, feat, box, valid)
            return tc.softmax(logits, np.where(valid, 0.0, NEG)).data[0]

    # -------------------------------------------------------- decoding

    def surface(self, ex: Example, pos: int) -> str:
        V = len(self.answer_vocab)
        return self.answer_vocab.words[pos] if pos < V else ex.ocr_texts[pos - V]

    def surface_prob(self, ex: Example, probs: np.ndarray, word: str) -> float:
        """Total mass on every position whose surface form is ``word``."""
        V = len(self.answer_vocab)
        total = 0.0
        vi = self.answer_vocab.get(word)
        if vi is not None:
            total += probs[vi]
        for n, t in enumerate(ex.ocr_texts):
            if t == word:
                total += probs[V + n]
        return float(total)

    def step_distribution(self, probs_row: np.ndarray, ex: Example) -> StepDistribution:
        V = len(self.answer_vocab)
        return StepDistribution(probs_row[:V + ex.n_ocr].copy(), V, ex.n_ocr)

    def decode_greedy(self, examples: Sequence[Example], max_steps: int | None = None) -> list[DecodedAnswer]:
        """Batched greedy decoding. Stops per example at ``<end>`` or after T steps."""
        T = self.cfg.max_decode_steps if max_steps is None else min(max_steps, self.cfg.max_decode_steps)
        batch = collate(list(examples))
        end_id = self.answer_vocab.get(END)
        B = batch.size
        words: list[list[str]] = [[] for _ in range(B)]
        results: list[DecodedAnswer | None] = [None] * B
        positions: list[list[int]] = [[] for _ in range(B)]
        probs_out: list[list[float]] = [[] for _ in range(B)]
        with tc.no_tape():
            fused = self.fused_inputs(batch)
            for t in range(T):
                ids = np.full((B, t + 1), self.answer_vocab.get(PAD))
                cps = np.full((B, t + 1), -1)
                for b, ex in enumerate(batch.examples):
                    vi, ci = self.prev_inputs(ex, words[b])
                    ids[b, :len(vi)] = vi
                    cps[b, :len(ci)] = ci
                logits, mask = self.forward_steps(batch, ids, cps, fused=fused)
                probs = tc.softmax(logits[:, t], mask[:, t]).data
                for b, ex in enumerate(batch.examples):
                    if results[b] is not None:
                        continue
                    row = probs[b, :len(self.answer_vocab) + ex.n_ocr]
                    pos = int(np.argmax(row))
                    if pos == end_id:
                        results[b] = DecodedAnswer(words[b], positions[b], probs_out[b], END, float(row[pos]))
                        continue
                    w = self.surface(ex, pos)
                    words[b].append(w)
                    positions[b].append(pos)
                    probs_out[b].append(self.surface_prob(ex, row, w))
                if all(r is not None for r in results):
                    break
        for b in range(B):
            if results[b] is None:
                results[b] = DecodedAnswer(words[b], positions[b], probs_out[b], "length")
        return results

    # -------------------------------------------------------- checkpoints

    def save(self, path):
        """Flat little-endian float64 blob plus a JSON sidecar at ``<path>.json``."""
        path = Path(path)
        names = sorted(self.params)
        layout, offset, chunks = {}, 0, []
        for n in names:
            arr = self.params[n].data
            layout[n] = {"offset": offset, "shape": list(arr.shape)}
            offset += arr.size
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").ravel())
        path.write_bytes(np.concatenate(chunks).tobytes())
        meta = {
            "format": CKPT_FORMAT,
            "config": asdict(self.cfg),
            "text_vocab": list(self.text_vocab.words),
            "answer_vocab": list(self.answer_vocab.words),
            "params": layout,
        }
        Path(f"{path}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, expected: ModelConfig | None = None) -> "LogosModel":
        path = Path(path)
        meta = json.loads(Path(f"{path}.json").read_text(encoding="utf-8"))
        if meta.get("format") != CKPT_FORMAT:
            raise ConfigError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
        cfg = ModelConfig(**meta["config"])
        if expected is not None:
            for k, v in asdict(expected).items():
                if getattr(cfg, k) != v:
                    raise ConfigError(f"{path}: checkpoint {k}={getattr(cfg, k)} != expected {v}")
        model = cls(cfg, TextVocab(tuple(meta["text_vocab"])), AnswerVocab(tuple(meta["answer_vocab"])))
        flat = np.frombuffer(path.read_bytes(), dtype="<f8")
        if set(meta["params"]) != set(model.params):
            raise ConfigError(f"{path}: parameter names do not match the model layout")
        for name, spec in meta["params"].items():
            shape = tuple(spec["shape"])
            if shape != model.params[name].data.shape:
                raise ShapeError(f"{path}: {name} has shape {shape}, config implies {model.params[name].data.shape}")
            size = int(np.prod(shape))
            if spec["offset"] + size > flat.size:
                raise ShapeError(f"{path}: truncated parameter blob")
            model.params[name].data = flat[spec["offset"]:spec["offset"] + size].reshape(shape).astype(np.float64)
        return model
