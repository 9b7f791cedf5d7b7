"""Decode once per OCR source and keep the most confident answer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import Dataset, QAItem
from .errors import ContractError
from .metrics import EvalReport, evaluate
from .model import DecodedAnswer, LogosModel, build_example


@dataclass(frozen=True)
class SourceAnswer:
    source_id: str
    answer: DecodedAnswer
    log_score: float

    @property
    def text(self) -> str:
        return self.answer.text


def answer_confidence(step_probs: Sequence[float]) -> float:
    """log of the product of per-step token probabilities."""
    total = 0.0
    for p in step_probs:
        if not (0.0 < p <= 1.0):
            raise ContractError(f"step probability {p} outside (0, 1]")
        total += math.log(p)
    return total


def score_answer(source_id: str, answer: DecodedAnswer) -> SourceAnswer:
    """Empty answers are scored by the probability of emitting ``<end>`` first."""
    probs = answer.step_probs if answer.tokens else [answer.end_prob]
    return SourceAnswer(source_id, answer, answer_confidence(probs))


def select_source(candidates: Sequence[SourceAnswer], priority: Sequence[str] | None = None) -> SourceAnswer:
    """Highest log score wins; ties go to the earliest source in ``priority``.

    Without an explicit priority the candidates' own order is used.
    """
    if not candidates:
        raise ContractError("select_source needs at least one candidate")
    order = list(priority) if priority is not None else [c.source_id for c in candidates]
    rank = {s: i for i, s in enumerate(order)}
    return min(candidates, key=lambda c: (-c.log_score, rank.get(c.source_id, len(rank))))


@dataclass
class Prediction:
    question_id: str
    answer: str
    selected_source: str
    candidates: list[SourceAnswer]

    def record(self) -> dict:
        return {
            "question_id": self.question_id,
            "answer": self.answer,
            "selected_source": self.selected_source,
            "candidates": [{"source": c.source_id, "answer": c.text, "log_score": round(c.log_score, 6)}
                           for c in self.candidates],
        }


def predict_with_selection(model: LogosModel, item: QAItem, objects, sources: Mapping[str, list],
                           priority: Sequence[str] | None = None) -> Prediction:
    """Decode ``item`` independently against each source's OCR lines and select."""
    return predict_many(model, [item], {item.image_id: objects},
                        {s: {item.image_id: lines} for s, lines in sources.items()}, priority)[0]


def predict_many(model: LogosModel, items: Sequence[QAItem], objects: Mapping[str, list],
                 ocr_by_source: Mapping[str, Mapping[str, list]], priority: Sequence[str] | None = None,
                 chunk: int = 64) -> list[Prediction]:
    if not ocr_by_source:
        raise ContractError("predict needs at least one OCR source")
    sources = list(ocr_by_source)
    priority = list(priority) if priority is not None else sources
    decoded: dict[str, list[DecodedAnswer]] = {}
    for src in sources:
        out: list[DecodedAnswer] = []
        for s in range(0, len(items), chunk):
            part = items[s:s + chunk]
            exs = [build_example(it.question, objects[it.image_id], ocr_by_source[src][it.image_id],
                                 model.cfg, model.text_vocab) for it in part]
            out.extend(model.decode_greedy(exs))
        decoded[src] = out
    preds = []
    for k, it in enumerate(items):
        cands = [score_answer(src, decoded[src][k]) for src in sources]
        best = select_source(cands, priority)
        preds.append(Prediction(it.question_id, best.text, best.source_id, cands))
    return preds


def predict_dataset(model: LogosModel, ds: Dataset, sources: Sequence[str] | None = None,
                    priority: Sequence[str] | None = None) -> list[Prediction]:
    srcs = list(sources) if sources is not None else ds.sources
    return predict_many(model, ds.items, ds.objects, {s: ds.ocr_by_source[s] for s in srcs}, priority)


def evaluate_model(model: LogosModel, ds: Dataset, sources: Sequence[str] | None = None) -> EvalReport:
    preds = predict_dataset(model, ds, sources)
    return evaluate({p.question_id: p.answer for p in preds}, ds.answers_by_qid())
