"""Acceptance suite: one test per criterion, summarised as PASS/FAIL lines at the end of the run."""
import random
import string
import time

import numpy as np
import pytest

from logoskit import tensor as tc
from logoskit.cli import run
from logoskit.corpus import gen_grounding, gen_splits
from logoskit.geometry import NormBox, box_min_distance, cluster_lines
from logoskit.metrics import anls_item, levenshtein, vqa_accuracy_item
from logoskit.model import build_example, collate
from logoskit.phoc import BIGRAMS, PHOC_WIDTH, phoc_encode
from logoskit.selector import predict_dataset
from logoskit.trainer import (DESK_CANDIDATES, DESK_GROUNDING_TRAIN, DESK_GROUNDING_VAL, _feature_width,
                              desk_finetune_config, desk_model_config, desk_pretrain_config, finetune, grad_check,
                              grounding_accuracy, make_model, pretrain_grounding)
from oracles import (levenshtein_table, partition_of, phoc_oracle, random_boxes, sampled_box_distance,
                     template_reading, union_find_partition)
from test_cli import smoke_pipeline

pytestmark = pytest.mark.acceptance


def check(record_property, ok, detail):
    record_property("detail", detail)
    assert ok, detail


def test_criterion_01_clustering_oracle(record_property):
    rng = np.random.default_rng(1)
    instances = []
    for k in range(1000):
        raw = random_boxes(rng, int(rng.integers(1, 51)))
        instances.append((raw, [NormBox(*b) for b in raw], (0.005, 0.02, 0.1)[k % 3]))
    start = time.perf_counter()
    got = [cluster_lines(boxes, eps) for _, boxes, eps in instances]
    elapsed = time.perf_counter() - start
    mismatches = sum(partition_of(g.cluster_of_line) != union_find_partition(raw, eps)
                     for g, (raw, _, eps) in zip(got, instances))
    check(record_property, mismatches == 0 and elapsed < 10.0,
          f"{mismatches} mismatches of 1000, {elapsed:.2f} s")


def test_criterion_02_box_distance(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        a, b = random_boxes(rng, 2, max_side=0.4)
        worst = max(worst, abs(box_min_distance(NormBox(*a), NormBox(*b)) - sampled_box_distance(a, b)))
    overlap_nonzero = 0
    for _ in range(200):
        x1, y1 = rng.uniform(0, 0.5, 2)
        a = NormBox(x1, y1, x1 + rng.uniform(0.05, 0.4), y1 + rng.uniform(0.05, 0.4))
        px, py = rng.uniform(a.x1, a.x2), rng.uniform(a.y1, a.y2)
        b = NormBox(max(0.0, px - rng.uniform(0, 0.3)), max(0.0, py - rng.uniform(0, 0.3)),
                    min(1.0, px + rng.uniform(0, 0.3)), min(1.0, py + rng.uniform(0, 0.3)))
        overlap_nonzero += box_min_distance(a, b) != 0.0
    check(record_property, worst < 1e-3 and overlap_nonzero == 0,
          f"max sampled deviation {worst:.2e}, {overlap_nonzero} nonzero overlapping pairs")


def test_criterion_03_phoc(record_property):
    rnd = random.Random(3)
    pool = string.ascii_letters + string.digits + " -'!."
    words = ["".join(rnd.choice(pool) for _ in range(rnd.randint(1, 14))) for _ in range(1000)]
    mismatched = sum(not np.array_equal(phoc_encode(w), phoc_oracle(w, BIGRAMS)) for w in words)
    empty = phoc_encode("")
    mixed = ["".join(c.upper() if rnd.random() < 0.5 else c for c in w) for w in words[:100]]
    case_diff = sum(not np.array_equal(phoc_encode(m), phoc_encode(m.lower())) for m in mixed)
    ok = mismatched == 0 and empty.shape == (PHOC_WIDTH,) and not empty.any() and case_diff == 0
    check(record_property, ok, f"{mismatched} oracle mismatches, empty all-zero {not empty.any()}, "
                               f"{case_diff} case-sensitive encodings")


def test_criterion_04_metrics(record_property):
    rnd = random.Random(4)
    pairs = [("".join(rnd.choice("abcd") for _ in range(rnd.randint(0, 10))),
              "".join(rnd.choice("abcd") for _ in range(rnd.randint(0, 10)))) for _ in range(1000)]
    lev_bad = sum(levenshtein(a, b) != levenshtein_table(a, b) for a, b in pairs)
    vqa = vqa_accuracy_item("stop", ["stop"] * 3 + ["go"] * 7)
    hello = anls_item("hello", ["help"])
    ok = lev_bad == 0 and vqa == 0.9 and hello == 0.0
    check(record_property, ok, f"{lev_bad} levenshtein mismatches, 3-of-10 accuracy {vqa!r}, "
                               f"anls(hello, help) {hello!r} with edit distance {levenshtein('hello', 'help')}")


def test_criterion_05_gradient_check(record_property):
    clean = grad_check(n_probes=200)
    with tc.inject_fault("gelu"):
        faulty = grad_check(n_probes=200)
    check(record_property, clean < 1e-4 and faulty >= 1e-4,
          f"clean max relative error {clean:.2e}, fault-injected {faulty:.2e}")


def test_criterion_06_transformer_contracts(record_property):
    train, _ = gen_splits(6, 50, 1, feature_width=8)
    model = make_model(train, desk_model_config(8), seed=6)
    rng = np.random.default_rng(6)
    worst_row, leaks, inert = 0.0, 0, 0
    V = len(model.answer_vocab)
    for it in train.items:
        ex = build_example(it.question, train.objects[it.image_id], train.ocr_by_source["A"][it.image_id],
                           model.cfg, model.text_vocab)
        batch = collate([ex])
        T = int(rng.integers(2, model.cfg.max_decode_steps + 1))
        cut = int(rng.integers(1, T))
        ids = rng.integers(3, V, size=(1, T))
        cps = np.full((1, T), -1)
        log = []
        with tc.no_tape():
            logits, _ = model.forward_steps(batch, ids, cps, attn_log=log)
            ids2 = ids.copy()
            ids2[:, cut:] = (ids[:, cut:] - 3 + rng.integers(1, V - 3, size=(1, T - cut))) % (V - 3) + 3
            logits2, _ = model.forward_steps(batch, ids2, cps)
        worst_row = max(worst_row, max(float(np.abs(a.sum(-1) - 1.0).max()) for a in log))
        leaks += logits.data[:, :cut].tobytes() != logits2.data[:, :cut].tobytes()
        inert += np.array_equal(logits.data[:, cut:], logits2.data[:, cut:])
    check(record_property, worst_row <= 1e-6 and leaks == 0 and inert == 0,
          f"max row-sum deviation {worst_row:.1e}, {leaks} causal leaks, {inert} inert perturbations, 50 contexts")


@pytest.fixture(scope="module")
def desk_run():
    """Grounding pretraining then fine-tuning on the seed-7 synthetic corpus."""
    train, val = gen_splits(7, 200, 50)
    fw = _feature_width(train)
    model = make_model(train, desk_model_config(fw))
    g_train = gen_grounding(7, DESK_GROUNDING_TRAIN, DESK_CANDIDATES, fw)
    g_val = gen_grounding(7, DESK_GROUNDING_VAL, DESK_CANDIDATES, fw, start_index=DESK_GROUNDING_TRAIN)
    g_test = gen_grounding(7, DESK_GROUNDING_VAL, DESK_CANDIDATES, fw,
                           start_index=DESK_GROUNDING_TRAIN + DESK_GROUNDING_VAL)
    baseline = grounding_accuracy(model, g_test)
    start = time.perf_counter()
    pretrain_grounding(model, g_train, desk_pretrain_config(), g_val)
    grounded = grounding_accuracy(model, g_test)
    finetune(model, train, desk_finetune_config(), val)
    elapsed = time.perf_counter() - start
    return dict(model=model, val=val, baseline=baseline, grounded=grounded, elapsed=elapsed)


def test_criterion_07_desk_learning(desk_run, record_property):
    model, val = desk_run["model"], desk_run["val"]
    scores = []
    for src in val.sources:
        items = [it for it in val.items
                 if template_reading(it.question, val.objects[it.image_id],
                                     val.ocr_by_source[src][it.image_id]) == it.answers[0]]
        exs = [build_example(it.question, val.objects[it.image_id], val.ocr_by_source[src][it.image_id],
                             model.cfg, model.text_vocab) for it in items]
        scores += [vqa_accuracy_item(d.text, it.answers) for it, d in zip(items, model.decode_greedy(exs))]
    acc, elapsed = float(np.mean(scores)), desk_run["elapsed"]
    check(record_property, acc >= 0.95 and elapsed < 300.0,
          f"accuracy {acc:.3f} on {len(scores)} noise-free (item, source) pairs, wall time {elapsed:.0f} s")


def test_criterion_08_selection(desk_run, record_property):
    model, val = desk_run["model"], desk_run["val"]
    combined = predict_dataset(model, val)
    by_qid = {it.question_id: it for it in val.items}
    combined_acc = float(np.mean([vqa_accuracy_item(p.answer, by_qid[p.question_id].answers) for p in combined]))
    single = {}
    for src in val.sources:
        preds = predict_dataset(model, val, sources=[src])
        single[src] = float(np.mean([vqa_accuracy_item(p.answer, by_qid[p.question_id].answers) for p in preds]))
    contested = picked = 0
    for p in combined:
        right = [c.source_id for c in p.candidates
                 if vqa_accuracy_item(c.answer.text, by_qid[p.question_id].answers) == 1.0]
        if len(right) == 1:
            contested += 1
            picked += p.selected_source == right[0]
    share = picked / contested if contested else 0.0
    ok = combined_acc >= max(single.values()) and contested > 0 and share > 0.5
    singles = ", ".join(f"{s} {a:.3f}" for s, a in sorted(single.items()))
    check(record_property, ok, f"combined {combined_acc:.3f} vs single {singles}; "
                               f"correct source picked in {picked}/{contested} one-correct items")


def test_criterion_09_grounding(desk_run, record_property):
    base, grounded = desk_run["baseline"], desk_run["grounded"]
    check(record_property, grounded >= 0.9 and abs(base - 0.25) <= 0.1,
          f"pretrained accuracy {grounded:.3f}, untrained {base:.3f}, {DESK_CANDIDATES} candidates")


def test_criterion_10_determinism(tmp_path, record_property):
    produced = []
    for name in ("first", "second"):
        work = tmp_path / name
        corpus = work / "corpus"
        assert run(["gen-synth", "--seed", "7", "--n-train", "12", "--n-val", "6", "--feature-width", "8",
                    "--out", str(corpus)]) == 0
        files = smoke_pipeline(corpus, work)
        files["pre.json"] = work / "pre.ckpt.json"
        files["ft.json"] = work / "ft.ckpt.json"
        produced.append({k: p.read_bytes() for k, p in files.items()})
    differing = sorted(k for k in produced[0] if produced[0][k] != produced[1][k])
    check(record_property, not differing, f"{len(produced[0])} artifacts compared, differing: {differing or 'none'}")
