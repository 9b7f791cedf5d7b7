import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from logoskit.errors import ContractError, IntegrityError
from logoskit.metrics import anls_item, evaluate, levenshtein, vqa_accuracy_item
from oracles import levenshtein_table

short = st.text(alphabet="abcde ", max_size=8)


class TestLevenshtein:
    def test_insertions(self):
        assert levenshtein("", "abc") == 3

    def test_identity(self):
        assert levenshtein("abc", "abc") == 0

    def test_kitten(self):
        assert levenshtein("kitten", "sitting") == levenshtein_table("kitten", "sitting") == 3

    @given(short, short)
    def test_matches_table(self, a, b):
        assert levenshtein(a, b) == levenshtein_table(a, b)

    @given(short, short, short)
    def test_metric_axioms(self, a, b, c):
        assert levenshtein(a, b) == levenshtein(b, a)
        assert (levenshtein(a, b) == 0) == (a == b)
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class TestAnls:
    def test_exact(self):
        assert anls_item("stop", ["stop"]) == 1.0

    def test_hello_help(self):
        assert levenshtein_table("hello", "help") == 2
        assert anls_item("hello", ["help"]) == pytest.approx(0.6)

    def test_below_threshold(self):
        assert levenshtein_table("hello", "hi") == 4
        assert anls_item("hello", ["hi"]) == 0.0

    def test_above_threshold(self):
        assert anls_item("hello", ["hallo"]) == pytest.approx(0.8)

    def test_max_over_references(self):
        assert anls_item("stop sign", ["go", "stop sign"]) == 1.0

    def test_both_empty(self):
        assert anls_item("", [""]) == 1.0

    def test_no_references(self):
        with pytest.raises(ContractError):
            anls_item("x", [])

    def test_normalization(self):
        assert anls_item("  Stop   Sign ", ["stop sign"]) == 1.0

    @given(short, st.lists(short, min_size=1, max_size=3), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    def test_lower_tau_never_lowers(self, pred, refs, t1, t2):
        lo, hi = sorted((t1, t2))
        s = anls_item(pred, refs, hi)
        assert 0.0 <= s <= 1.0
        assert anls_item(pred, refs, lo) >= s


class TestVqaAccuracy:
    def test_all(self):
        assert vqa_accuracy_item("stop", ["stop"] * 10) == 1.0

    def test_none(self):
        assert vqa_accuracy_item("go", ["stop"] * 10) == 0.0

    def test_three_of_ten(self):
        # leave-one-out by enumeration
        answers = ["stop"] * 3 + ["go"] * 7
        expect = sum(min(1.0, sum(a == "stop" for j, a in enumerate(answers) if j != i) / 3) for i in range(10)) / 10
        assert expect == pytest.approx(0.9)
        assert vqa_accuracy_item("stop", answers) == 0.9

    def test_one_of_ten(self):
        assert vqa_accuracy_item("x", ["x"] + ["y"] * 9) == pytest.approx(0.3)

    def test_count(self):
        with pytest.raises(ContractError):
            vqa_accuracy_item("x", ["x"] * 9)

    @given(st.text(alphabet="ab", max_size=3), st.lists(st.text(alphabet="ab", max_size=3), min_size=10, max_size=10))
    def test_case_and_space_invariant(self, pred, answers):
        s = vqa_accuracy_item(pred, answers)
        assert 0.0 <= s <= 1.0
        assert vqa_accuracy_item(f"  {pred.upper()} ", [a.upper() + " " for a in answers]) == s


class TestEvaluate:
    def test_empty(self):
        r = evaluate({}, {"q": ["a"] * 10})
        assert r.n_items == 0 and r.empty and r.mean_accuracy == 0.0 and r.mean_anls == 0.0

    def test_all_exact(self):
        refs = {f"q{i}": [f"w{i}"] * 10 for i in range(5)}
        r = evaluate({k: v[0] for k, v in refs.items()}, refs)
        assert r.mean_accuracy == 1.0 and r.mean_anls == 1.0

    def test_hand_fixture(self):
        refs = {"q1": ["stop"] * 3 + ["go"] * 7, "q2": ["help"] * 10, "q3": ["hallo"] * 10}
        refs["q2"] = ["hi"] * 10
        r = evaluate({"q1": "stop", "q2": "hello", "q3": "hello"}, refs)
        # accuracies 0.9, 0, 0; anls: q1 1, q2 0 (distance 4 of 5), q3 0.8
        assert r.mean_accuracy == pytest.approx(0.3, abs=1e-12)
        assert r.mean_anls == pytest.approx(0.6, abs=1e-12)
        assert r.mean_accuracy == pytest.approx(sum(x.accuracy for x in r.rows) / 3, abs=1e-12)

    def test_unknown_question(self):
        with pytest.raises(IntegrityError):
            evaluate({"zz": "a"}, {"q": ["a"] * 10})
