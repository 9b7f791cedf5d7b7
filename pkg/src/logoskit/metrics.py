"""Text-VQA evaluation: leave-one-out VQA accuracy and ANLS."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ContractError, IntegrityError

N_ANSWERS = 10
ANLS_TAU = 0.5


def normalize_answer(s: str) -> str:
    """Lowercase, trim and collapse internal whitespace. Nothing else."""
    return " ".join(s.lower().split())


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls_similarity(prediction: str, reference: str) -> float:
    p, r = normalize_answer(prediction), normalize_answer(reference)
    longest = max(len(p), len(r))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(p, r) / longest


def anls_item(prediction: str, references: Sequence[str], tau: float = ANLS_TAU) -> float:
    if not references:
        raise ContractError("anls_item needs at least one reference")
    best = 0.0
    for ref in references:
        s = anls_similarity(prediction, ref)
        if s >= tau:
            best = max(best, s)
    return best


def vqa_accuracy_item(prediction: str, answers: Sequence[str]) -> float:
    """Mean over the 10 leave-one-out subsets of min(1, matches / 3)."""
    if len(answers) != N_ANSWERS:
        raise ContractError(f"expected {N_ANSWERS} reference answers, got {len(answers)}")
    pred = normalize_answer(prediction)
    hits = [normalize_answer(a) == pred for a in answers]
    total = sum(hits)
    return sum(min(1.0, (total - h) / 3.0) for h in hits) / N_ANSWERS


@dataclass
class EvalRow:
    question_id: str
    prediction: str
    accuracy: float
    anls: float


@dataclass
class EvalReport:
    n_items: int
    mean_accuracy: float
    mean_anls: float
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.n_items == 0

    def to_dict(self, metric: str = "both") -> dict:
        out: dict = {"n_items": self.n_items, "empty": self.empty}
        if metric in ("acc", "both"):
            out["accuracy"] = round(self.mean_accuracy, 6)
        if metric in ("anls", "both"):
            out["anls"] = round(self.mean_anls, 6)
        return out


def evaluate(predictions: Mapping[str, str] | Iterable[tuple[str, str]],
             answers_by_qid: Mapping[str, Sequence[str]]) -> EvalReport:
    """Score ``question_id -> predicted answer`` against the reference answers.

    Rows come out sorted by question id so the report does not depend on
    prediction order.
    """
    pairs = dict(predictions.items() if isinstance(predictions, Mapping) else predictions)
    rows = []
    for qid in sorted(pairs):
        if qid not in answers_by_qid:
            raise IntegrityError(f"prediction for unknown question_id {qid!r}")
        pred = pairs[qid]
        refs = answers_by_qid[qid]
        rows.append(EvalRow(qid, pred, vqa_accuracy_item(pred, refs), anls_item(pred, refs)))
    n = len(rows)
    if n == 0:
        return EvalReport(0, 0.0, 0.0, [])
    return EvalReport(
        n,
        sum(r.accuracy for r in rows) / n,
        sum(r.anls for r in rows) / n,
        rows,
    )
