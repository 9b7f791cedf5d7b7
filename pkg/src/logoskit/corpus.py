"""Text-VQA data model, JSONL formats, answer vocabulary and the synthetic generator."""

from __future__ import annotations

import hashlib
import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError, PreconditionError
from .geometry import NormBox, union_box

N_ANSWERS = 10
PAD, BEGIN, END = "<pad>", "<begin>", "<end>"
SPECIALS = (PAD, BEGIN, END)
DEFAULT_VOCAB_SIZE = 5000
DEFAULT_FEATURE_WIDTH = 32

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize_question(text: str) -> tuple[str, ...]:
    return tuple(_TOKEN_RE.findall(text.lower()))


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class QAItem:
    question_id: str
    image_id: str
    question: tuple[str, ...]
    answers: tuple[str, ...]

    def __post_init__(self):
        if len(self.answers) != N_ANSWERS:
            raise PreconditionError(f"{self.question_id}: expected {N_ANSWERS} answers, got {len(self.answers)}")
        if not self.question:
            raise PreconditionError(f"{self.question_id}: empty question")


@dataclass(frozen=True)
class OcrToken:
    text: str
    box: NormBox
    line_id: int
    token_pos_in_line: int
    source_id: str

    def __post_init__(self):
        if not self.text.strip():
            raise PreconditionError("OCR token text is empty")


@dataclass(frozen=True)
class OcrLine:
    line_id: int
    box: NormBox
    tokens: tuple[OcrToken, ...]
    source_id: str

    def __post_init__(self):
        centers = [t.box.center[0] for t in self.tokens]
        if any(b < a for a, b in zip(centers, centers[1:])):
            raise PreconditionError(f"line {self.line_id}: tokens not ordered left-to-right")
        for t in self.tokens:
            if not self.box.contains(t.box):
                raise PreconditionError(f"line {self.line_id}: token {t.text!r} outside line box")
            if t.line_id != self.line_id or t.source_id != self.source_id:
                raise PreconditionError(f"line {self.line_id}: token carries wrong line/source id")


@dataclass(frozen=True)
class ObjectRegion:
    label: str
    box: NormBox
    feature: tuple[float, ...]


@dataclass
class Dataset:
    items: list[QAItem]
    ocr_by_source: dict[str, dict[str, list[OcrLine]]]
    objects: dict[str, list[ObjectRegion]]
    split: str = "train"

    @property
    def sources(self) -> list[str]:
        return list(self.ocr_by_source)

    def ocr_tokens(self, source: str, image_id: str) -> list[OcrToken]:
        return [t for line in self.ocr_by_source[source][image_id] for t in line.tokens]

    def answers_by_qid(self) -> dict[str, tuple[str, ...]]:
        return {it.question_id: it.answers for it in self.items}

    def check_integrity(self):
        for it in self.items:
            if it.image_id not in self.objects:
                raise IntegrityError(f"{it.question_id}: image {it.image_id!r} missing from objects")
            for src, table in self.ocr_by_source.items():
                if it.image_id not in table:
                    raise IntegrityError(f"{it.question_id}: image {it.image_id!r} missing from OCR source {src!r}")
        widths = {len(o.feature) for objs in self.objects.values() for o in objs}
        if len(widths) > 1:
            raise IntegrityError(f"object feature widths differ: {sorted(widths)}")


# ---------------------------------------------------------------- serialization

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=False)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(k, ensure_ascii=False)}: {_fmt(x)}" for k, x in v.items()) + "}"
    raise TypeError(f"cannot serialize {type(v).__name__}")


def dumps_record(record: dict) -> str:
    """Compact JSON with every float written to 6 decimal places."""
    return _fmt(record)


def _box_list(b: NormBox) -> list[float]:
    return [float(v) for v in b.as_list()]


def qa_record(it: QAItem) -> dict:
    return {"question_id": it.question_id, "image_id": it.image_id,
            "question": " ".join(it.question), "answers": list(it.answers)}


def ocr_record(image_id: str, source: str, lines: Sequence[OcrLine]) -> dict:
    return {
        "image_id": image_id,
        "source": source,
        "lines": [
            {"line_id": ln.line_id, "box": _box_list(ln.box),
             "tokens": [{"text": t.text, "box": _box_list(t.box)} for t in ln.tokens]}
            for ln in lines
        ],
    }


def objects_record(image_id: str, objs: Sequence[ObjectRegion]) -> dict:
    return {"image_id": image_id,
            "objects": [{"label": o.label, "box": _box_list(o.box), "feature": [float(f) for f in o.feature]}
                        for o in objs]}


def write_jsonl(path, records: Iterable[dict]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(dumps_record(r))
            f.write("\n")


def _read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for n, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                yield n, json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", path, n) from e


def _req(rec: dict, key: str, typ, path, n):
    if not isinstance(rec, dict) or key not in rec:
        raise ParseError(f"missing field {key!r}", path, n)
    v = rec[key]
    if typ is float:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    elif typ is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    else:
        ok = isinstance(v, typ)
    if not ok:
        raise ParseError(f"field {key!r} has wrong type {type(v).__name__}", path, n)
    return v


def _parse_box(v, path, n) -> NormBox:
    if not isinstance(v, list) or len(v) != 4 or not all(
            isinstance(c, (int, float)) and not isinstance(c, bool) for c in v):
        raise ParseError(f"box must be 4 numbers, got {v!r}", path, n)
    try:
        return NormBox.from_list(v)
    except PreconditionError as e:
        raise ParseError(str(e), path, n) from e


def load_qa(path) -> list[QAItem]:
    items = []
    for n, rec in _read_jsonl(path):
        answers = _req(rec, "answers", list, path, n)
        if len(answers) != N_ANSWERS or not all(isinstance(a, str) for a in answers):
            raise ParseError(f"expected {N_ANSWERS} string answers, got {len(answers)}", path, n)
        question = tokenize_question(_req(rec, "question", str, path, n))
        if not question:
            raise ParseError("empty question", path, n)
        items.append(QAItem(_req(rec, "question_id", str, path, n), _req(rec, "image_id", str, path, n),
                            question, tuple(a.lower() for a in answers)))
    return items


def load_ocr(path, expected_source: str | None = None) -> dict[str, list[OcrLine]]:
    table: dict[str, list[OcrLine]] = {}
    for n, rec in _read_jsonl(path):
        image_id = _req(rec, "image_id", str, path, n)
        source = _req(rec, "source", str, path, n)
        if expected_source is not None and source != expected_source:
            raise ParseError(f"record source {source!r} != registered source {expected_source!r}", path, n)
        lines = []
        for ln in _req(rec, "lines", list, path, n):
            line_id = _req(ln, "line_id", int, path, n)
            toks = []
            for pos, tk in enumerate(_req(ln, "tokens", list, path, n)):
                text = _req(tk, "text", str, path, n).lower()
                if not text.strip():
                    raise ParseError("empty OCR token text", path, n)
                toks.append(OcrToken(text, _parse_box(tk.get("box"), path, n), line_id, pos, source))
            try:
                lines.append(OcrLine(line_id, _parse_box(ln.get("box"), path, n), tuple(toks), source))
            except PreconditionError as e:
                raise ParseError(str(e), path, n) from e
        if image_id in table:
            raise ParseError(f"duplicate image {image_id!r}", path, n)
        table[image_id] = lines
    return table


def load_objects(path) -> dict[str, list[ObjectRegion]]:
    table: dict[str, list[ObjectRegion]] = {}
    for n, rec in _read_jsonl(path):
        image_id = _req(rec, "image_id", str, path, n)
        objs = []
        for o in _req(rec, "objects", list, path, n):
            feat = _req(o, "feature", list, path, n)
            if not all(isinstance(f, (int, float)) and not isinstance(f, bool) for f in feat):
                raise ParseError("object feature must be numbers", path, n)
            objs.append(ObjectRegion(_req(o, "label", str, path, n).lower(),
                                     _parse_box(o.get("box"), path, n), tuple(float(f) for f in feat)))
        if image_id in table:
            raise ParseError(f"duplicate image {image_id!r}", path, n)
        table[image_id] = objs
    return table


def load_dataset(qa_path, ocr_paths: Mapping[str, str | Path], obj_path, split: str = "train") -> Dataset:
    ds = Dataset(
        items=load_qa(qa_path),
        ocr_by_source={src: load_ocr(p, src) for src, p in ocr_paths.items()},
        objects=load_objects(obj_path),
        split=split,
    )
    ds.check_integrity()
    return ds


def save_dataset(ds: Dataset, out_dir) -> dict[str, Path]:
    """Write ``qa.jsonl``, ``objects.jsonl`` and one ``ocr_<source>.jsonl`` per source."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"qa": out / "qa.jsonl", "objects": out / "objects.jsonl"}
    write_jsonl(paths["qa"], (qa_record(it) for it in ds.items))
    write_jsonl(paths["objects"], (objects_record(k, v) for k, v in ds.objects.items()))
    for src, table in ds.ocr_by_source.items():
        paths[f"ocr_{src}"] = out / f"ocr_{src}.jsonl"
        write_jsonl(paths[f"ocr_{src}"], (ocr_record(k, src, v) for k, v in table.items()))
    return paths


def load_saved(out_dir, sources: Sequence[str] | None = None, split: str = "train") -> Dataset:
    """Inverse of :func:`save_dataset`; discovers sources from file names when not given."""
    d = Path(out_dir)
    if sources is None:
        sources = sorted(p.stem[len("ocr_"):] for p in d.glob("ocr_*.jsonl"))
    return load_dataset(d / "qa.jsonl", {s: d / f"ocr_{s}.jsonl" for s in sources},
                        d / "objects.jsonl", split)


# ---------------------------------------------------------------- vocabularies

@dataclass(frozen=True)
class AnswerVocab:
    words: tuple[str, ...]
    index: dict = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        if tuple(self.words[:3]) != SPECIALS:
            raise PreconditionError("answer vocabulary must start with <pad>, <begin>, <end>")
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    def __contains__(self, w):
        return w in self.index

    def get(self, w: str, default=None):
        return self.index.get(w, default)

    @property
    def content(self) -> tuple[str, ...]:
        return self.words[3:]


def build_vocab(train_answers: Iterable[str], K: int = DEFAULT_VOCAB_SIZE) -> AnswerVocab:
    """Top-K answer words by frequency (ties lexicographic) after the three specials."""
    if K < 1:
        raise PreconditionError(f"vocabulary size must be >= 1, got {K}")
    counts = Counter(w for a in train_answers for w in a.lower().split())
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted(counts, key=lambda w: (-counts[w], w))[:K]
    return AnswerVocab(SPECIALS + tuple(ranked))


@dataclass(frozen=True)
class TextVocab:
    """Token inventory of the text encoder: ``<pad>``, ``<unk>``, then words."""

    words: tuple[str, ...]
    index: dict = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "index", {w: i for i, w in enumerate(self.words)})

    def __len__(self):
        return len(self.words)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t.lower(), 1) for t in tokens]


def build_text_vocab(ds: Dataset, ocr_min_count: int = 2) -> TextVocab:
    """Question and label words always enter; OCR words must appear in ``ocr_min_count`` images.

    Counting images rather than detections keeps words seen in a single scene
    (however many sources read them) at ``<unk>``, as unseen words will be.
    """
    base = set()
    for it in ds.items:
        base.update(it.question)
    for objs in ds.objects.values():
        base.update(o.label for o in objs)
    per_image: dict[str, set[str]] = {}
    for table in ds.ocr_by_source.values():
        for image_id, lines in table.items():
            per_image.setdefault(image_id, set()).update(t.text for ln in lines for t in ln.tokens)
    ocr = Counter(w for words in per_image.values() for w in words)
    base.update(w for w, c in ocr.items() if c >= ocr_min_count)
    base.discard("<pad>")
    base.discard("<unk>")
    return TextVocab(("<pad>", "<unk>") + tuple(sorted(base)))


# ---------------------------------------------------------------- synthetic data

LABELS = (
    "book", "sign", "jersey", "bottle", "poster", "shirt", "banner", "menu",
    "bus", "screen", "box", "cup", "door", "truck", "can", "board",
)

_ONSETS = tuple("bcdfghjklmnprstvwz") + ("ch", "sh", "th", "tr", "br", "st", "pl", "gr")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou", "ea")
_CODAS = ("", "", "", "n", "r", "s", "t", "l", "m", "k")


def nonce_word(rng: np.random.Generator) -> str:
    """A pronounceable nonce word or a short number; the pool is effectively unbounded."""
    if rng.random() < 0.12:
        return str(int(rng.integers(1, 10 ** int(rng.integers(1, 5)))))
    u = rng.random()
    n = 1 if u < 0.4 else 2 if u < 0.9 else 3
    parts = rng.integers((len(_ONSETS), len(_VOWELS), len(_CODAS)), size=(n, 3))
    return "".join(_ONSETS[a] + _VOWELS[b] + _CODAS[c] for a, b, c in parts)


def nonce_words(rng: np.random.Generator, n: int) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        w = nonce_word(rng)
        if w not in out:
            out.append(w)
    return out


ORDINALS = ("first", "second", "third")
DEFAULT_SOURCES = ("A", "B")

CHAR_W = 0.012
TOKEN_H = 0.035
TOKEN_GAP = 0.008
LINE_GAP = 0.01
CELL_MARGIN = 0.03
GRID_COLS, GRID_ROWS = 2, 3


@dataclass(frozen=True)
class NoiseProfile:
    """Per-source corruption: ``p_del`` drops a token, ``p_sub`` rewrites one of its characters."""

    p_del: float = 0.0
    p_sub: float = 0.0

    def __post_init__(self):
        for name in ("p_del", "p_sub"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")


def default_noise(p_del: float = 0.15, p_sub: float = 0.15) -> dict[str, NoiseProfile]:
    return {"A": NoiseProfile(p_del=p_del), "B": NoiseProfile(p_sub=p_sub)}


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def label_feature(label: str, seed: int, width: int = DEFAULT_FEATURE_WIDTH) -> tuple[float, ...]:
    """Deterministic unit vector standing in for a detector's region feature."""
    v = np.random.default_rng(_stable_seed("feature", seed, label)).standard_normal(width)
    v /= np.linalg.norm(v)
    return tuple(round(float(x), 6) for x in v)


def _r6(x: float) -> float:
    return round(float(x), 6)


def _box(x1, y1, x2, y2) -> NormBox:
    c = lambda v: min(1.0, max(0.0, _r6(v)))
    return NormBox(c(x1), c(y1), c(x2), c(y2))


@dataclass
class _SceneLine:
    words: list[str]
    boxes: list[NormBox]


@dataclass
class _Scene:
    clusters: list[list[_SceneLine]]
    labels: list[str]
    objects: list[ObjectRegion]


def _make_scene(rng: np.random.Generator, seed: int, feature_width: int) -> _Scene:
    n_clusters = int(rng.integers(2, 6))
    cells = rng.permutation(GRID_COLS * GRID_ROWS)
    labels = [LABELS[i] for i in rng.permutation(len(LABELS))]
    words = nonce_words(rng, 4 * 3 * n_clusters)
    cell_w, cell_h = 1.0 / GRID_COLS, 1.0 / GRID_ROWS
    clusters, objects = [], []
    for c in range(n_clusters):
        cell = int(cells[c])
        cx0, cy0 = (cell % GRID_COLS) * cell_w + CELL_MARGIN, (cell // GRID_COLS) * cell_h + CELL_MARGIN
        avail_w, avail_h = cell_w - 2 * CELL_MARGIN, cell_h - 2 * CELL_MARGIN
        n_lines = int(rng.choice([1, 2, 3], p=[0.5, 0.35, 0.15]))
        line_words = [[words.pop() for _ in range(int(rng.integers(1, 5)))] for _ in range(n_lines)]
        widths = [sum(len(w) * CHAR_W for w in lw) + TOKEN_GAP * (len(lw) - 1) for lw in line_words]
        block_h = n_lines * TOKEN_H + (n_lines - 1) * LINE_GAP
        x0 = cx0 + rng.uniform(0, max(0.0, avail_w - max(widths) - 0.02))
        y0 = cy0 + rng.uniform(0, avail_h - block_h)
        lines = []
        for k, lw in enumerate(line_words):
            x = x0 + rng.uniform(0, 0.02)
            y = y0 + k * (TOKEN_H + LINE_GAP)
            boxes = []
            for w in lw:
                boxes.append(_box(x, y, x + len(w) * CHAR_W, y + TOKEN_H))
                x += len(w) * CHAR_W + TOKEN_GAP
            lines.append(_SceneLine(lw, boxes))
        clusters.append(lines)
        ub = union_box([b for ln in lines for b in ln.boxes])
        objects.append(ObjectRegion(labels[c], _box(ub.x1 - 0.015, ub.y1 - 0.015, ub.x2 + 0.015, ub.y2 + 0.015),
                                    label_feature(labels[c], seed, feature_width)))
    # A couple of text-free distractor regions in unused cells.
    n_distract = int(rng.integers(0, 3))
    for k in range(min(n_distract, GRID_COLS * GRID_ROWS - n_clusters)):
        cell = int(cells[n_clusters + k])
        cx0, cy0 = (cell % GRID_COLS) * cell_w + CELL_MARGIN, (cell // GRID_COLS) * cell_h + CELL_MARGIN
        lab = labels[n_clusters + k]
        w, h = rng.uniform(0.1, cell_w - 2 * CELL_MARGIN), rng.uniform(0.05, cell_h - 2 * CELL_MARGIN)
        objects.append(ObjectRegion(lab, _box(cx0, cy0, cx0 + w, cy0 + h), label_feature(lab, seed, feature_width)))
    order = rng.permutation(len(objects))
    return _Scene(clusters, labels[:n_clusters], [objects[i] for i in order])


def _corrupt(word: str, rng: np.random.Generator) -> str:
    pos = int(rng.integers(len(word)))
    pool = [c for c in string.ascii_lowercase + string.digits if c != word[pos]]
    return word[:pos] + pool[int(rng.integers(len(pool)))] + word[pos + 1:]


def _observe(scene: _Scene, source: str, noise: NoiseProfile, rng: np.random.Generator) -> list[OcrLine]:
    """One OCR engine's view of the scene: noisy tokens, lines in top-down reading order."""
    raw = []
    for lines in scene.clusters:
        for ln in lines:
            kept = []
            for w, b in zip(ln.words, ln.boxes):
                drop = rng.random() < noise.p_del
                sub = rng.random() < noise.p_sub
                if drop:
                    continue
                kept.append((_corrupt(w, rng) if sub else w, b))
            if kept:
                raw.append(kept)
    raw.sort(key=lambda toks: (toks[0][1].y1, toks[0][1].x1))
    out = []
    for line_id, toks in enumerate(raw):
        tokens = tuple(OcrToken(w, b, line_id, j, source) for j, (w, b) in enumerate(toks))
        out.append(OcrLine(line_id, union_box([b for _, b in toks]), tokens, source))
    return out


def _make_question(scene: _Scene, rng: np.random.Generator, c: int) -> tuple[str, str]:
    label = scene.labels[c]
    lines = scene.clusters[c]
    all_words = [w for ln in lines for w in ln.words]
    first = lines[0].words
    options = [("ord", k) for k in range(min(len(first), len(ORDINALS)))]
    if len(all_words) <= 3:
        options = [("all", 0)] * max(1, len(options)) + options
    kind, k = options[int(rng.integers(len(options)))]
    if kind == "all":
        return f"what is written on the {label} ?", " ".join(all_words)
    return f"what is the {ORDINALS[k]} word on the {label} ?", first[k]


def gen_synthetic(seed: int, n_images: int, noise_profiles: Mapping[str, NoiseProfile] | None = None,
                  feature_width: int = DEFAULT_FEATURE_WIDTH, split: str = "train",
                  start_index: int = 0, questions_per_image: int = 1) -> Dataset:
    """Seeded synthetic Text-VQA corpus: one question per image, k noisy OCR sources.

    Every image is generated from its own RNG stream keyed by ``(seed, index)``,
    so ``start_index`` lets disjoint splits share a seed.
    """
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    profiles = dict(default_noise() if noise_profiles is None else noise_profiles)
    if len(profiles) < 2:
        raise ConfigError(f"synthetic corpus needs at least 2 OCR sources, got {len(profiles)}")
    items, objects = [], {}
    ocr: dict[str, dict[str, list[OcrLine]]] = {s: {} for s in profiles}
    for idx in range(start_index, start_index + n_images):
        rng = np.random.default_rng([seed, idx])
        scene = _make_scene(rng, seed, feature_width)
        image_id = f"img{idx:06d}"
        asked = rng.permutation(len(scene.clusters))[:questions_per_image]
        for k, c in enumerate(asked):
            q, a = _make_question(scene, rng, int(c))
            qid = f"q{idx:06d}" if questions_per_image == 1 else f"q{idx:06d}_{k}"
            items.append(QAItem(qid, image_id, tokenize_question(q), (a,) * N_ANSWERS))
        objects[image_id] = scene.objects
        for s_i, (src, prof) in enumerate(profiles.items()):
            ocr[src][image_id] = _observe(scene, src, prof, np.random.default_rng([seed, idx, 1 + s_i]))
    return Dataset(items, ocr, objects, split)


def gen_splits(seed: int, n_train: int, n_val: int, noise_profiles=None,
               feature_width: int = DEFAULT_FEATURE_WIDTH) -> tuple[Dataset, Dataset]:
    train = gen_synthetic(seed, n_train, noise_profiles, feature_width, "train", 0)
    val = gen_synthetic(seed, n_val, noise_profiles, feature_width, "val", n_train)
    return train, val


def answerable(ds: Dataset, item: QAItem, source: str) -> bool:
    """True when every gold answer word is among the source's OCR tokens for the image."""
    texts = {t.text.lower() for t in ds.ocr_tokens(source, item.image_id)}
    return all(w in texts for w in item.answers[0].lower().split())


# ---------------------------------------------------------------- grounding data

@dataclass(frozen=True)
class GroundingExample:
    description: tuple[str, ...]
    candidates: tuple[ObjectRegion, ...]
    gold: int


_DESCRIPTIONS = ("the {}", "a {} in the picture", "{}", "the {} here")


def gen_grounding(seed: int, n_examples: int, n_candidates: int = 4,
                  feature_width: int = DEFAULT_FEATURE_WIDTH, feature_noise: float = 0.1,
                  start_index: int = 0) -> list[GroundingExample]:
    """Referral-expression examples: a description names one of ``n`` disjoint regions."""
    if n_candidates < 2:
        raise ConfigError(f"grounding needs >= 2 candidates, got {n_candidates}")
    if n_candidates > GRID_COLS * GRID_ROWS:
        raise ConfigError(f"at most {GRID_COLS * GRID_ROWS} non-overlapping candidates supported")
    out = []
    cell_w, cell_h = 1.0 / GRID_COLS, 1.0 / GRID_ROWS
    for idx in range(start_index, start_index + n_examples):
        rng = np.random.default_rng([seed, idx, 99])
        labels = [LABELS[i] for i in rng.permutation(len(LABELS))[:n_candidates]]
        cells = rng.permutation(GRID_COLS * GRID_ROWS)[:n_candidates]
        cands = []
        for lab, cell in zip(labels, cells):
            cx0, cy0 = (cell % GRID_COLS) * cell_w + CELL_MARGIN, (cell // GRID_COLS) * cell_h + CELL_MARGIN
            w, h = rng.uniform(0.1, cell_w - 2 * CELL_MARGIN), rng.uniform(0.05, cell_h - 2 * CELL_MARGIN)
            feat = np.array(label_feature(lab, seed, feature_width)) + feature_noise * rng.standard_normal(feature_width)
            feat /= np.linalg.norm(feat)
            cands.append(ObjectRegion(lab, _box(cx0, cy0, cx0 + w, cy0 + h), tuple(_r6(f) for f in feat)))
        gold = int(rng.integers(n_candidates))
        template = _DESCRIPTIONS[int(rng.integers(len(_DESCRIPTIONS)))]
        out.append(GroundingExample(tokenize_question(template.format(labels[gold])), tuple(cands), gold))
    return out
