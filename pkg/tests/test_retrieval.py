import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakret import retrieval as rv
from weakret.difftopk import hard_topk
from weakret.encoder import EmbeddingSet
from weakret.retrieval import QueryTruth, RetrievalResult


def _unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_similarity_examples():
    v = _unit([[1, 2, 3]])
    assert rv.similarity_matrix(v, v)[0, 0] == pytest.approx(1.0)
    assert rv.similarity_matrix(_unit([[1, 0]]), _unit([[0, 1]]))[0, 0] == 0.0
    rng = np.random.default_rng(0)
    a, b = _unit(rng.normal(size=(5, 4))), _unit(rng.normal(size=(5, 4)))
    S = rv.similarity_matrix(a, b)
    for i in range(5):
        for j in range(5):
            assert S[i, j] == pytest.approx(float(np.dot(a[i], b[j])))
    with pytest.raises(ValueError):
        rv.similarity_matrix(a, b[:, :3])


def test_retrieve_topk_matches_sort_and_hard_topk():
    rng = np.random.default_rng(1)
    db = EmbeddingSet([f"c{i}" for i in range(20)], _unit(rng.normal(size=(20, 8))).astype(np.float32))
    q = _unit(rng.normal(size=(1, 8)))[0]
    res = rv.retrieve_topk(q, db, 5)
    row = rv.similarity_matrix(q[None], db.vectors)[0]
    oracle = sorted(range(20), key=lambda i: (-row[i], i))[:5]
    assert res.ranked_cad_ids == [db.ids[i] for i in oracle]
    y = hard_topk(row, 5)
    assert res.ranked_cad_ids == [db.ids[int(np.argmax(y[:, c]))] for c in range(5)]
    assert all(a >= b for a, b in zip(res.scores, res.scores[1:]))
    full = rv.retrieve_topk(q, db, 20)
    assert sorted(full.ranked_cad_ids) == sorted(db.ids)
    with pytest.raises(ValueError):
        rv.retrieve_topk(q, db, 21)


def test_duplicate_vectors_lower_index_first():
    v = _unit([[1, 0], [1, 0], [0, 1]]).astype(np.float32)
    res = rv.retrieve_topk(np.array([1.0, 0.0]), EmbeddingSet(["a", "b", "c"], v), 2)
    assert res.ranked_cad_ids == ["a", "b"]


def _cads():
    occ = {}
    for i, name in enumerate("abcdef"):
        g = np.zeros((4, 4, 4), bool)
        g[i % 4, :, :2] = True
        occ[name] = g
    fam = {c: ("x" if c in "abc" else "y") for c in occ}
    return occ, fam


def test_all_correct():
    occ, fam = _cads()
    results = [RetrievalResult(f"q{i}", [c] + [d for d in "abcdef" if d != c][:4], [1.0] * 5) for i, c in enumerate("abc")]
    truth = {f"q{i}": QueryTruth(c, fam[c], [c]) for i, c in enumerate("abc")}
    report, rows = rv.evaluate(results, truth, occ, fam)
    assert report.top1 == report.top5 == report.mrr == report.cat == 1.0
    assert report.iou_top1 == 1.0
    assert report.rq == 1.0


def test_ground_truth_at_rank_four():
    occ, fam = _cads()
    results = [RetrievalResult("q", ["b", "c", "d", "a", "e"], [0.9, 0.8, 0.7, 0.6, 0.5])]
    truth = {"q": QueryTruth("a", "x", ["a", "c", "d"])}
    report, _ = rv.evaluate(results, truth, occ, fam)
    assert report.top1 == 0 and report.top5 == 1
    assert report.mrr == pytest.approx(0.25)
    assert report.cat == 1.0  # "b" is in family x
    # per-position exact matches: rank 2 ("c") and rank 3 ("d") hit
    assert report.rq == pytest.approx(2 / 3)
    assert report.iou_top1 == rv.iou(occ["b"], occ["a"])


def test_missing_from_list_and_missing_truth():
    occ, fam = _cads()
    results = [RetrievalResult("q", list("bcdef"), [0.0] * 5)]
    report, _ = rv.evaluate(results, {"q": QueryTruth("a", "x", ["a"])}, occ, fam)
    assert report.mrr == 0 and report.top5 == 0
    with pytest.raises(ValueError, match="missing ground truth"):
        rv.evaluate(results, {}, occ, fam)


def test_report_json_keys(tmp_path):
    occ, fam = _cads()
    results = [RetrievalResult("q1", list("abcde"), [0.0] * 5), RetrievalResult("q2", list("fedcb"), [0.0] * 5)]
    truth = {"q1": QueryTruth("a", "x", ["a"]), "q2": QueryTruth("e", "y", ["e"])}
    report, rows = rv.evaluate(results, truth, occ, fam)
    payload = json.loads(report.to_json())
    assert list(payload) == list(rv.METRIC_KEYS) + ["per_family"]
    assert list(payload["per_family"]) == ["x", "y"]
    assert list(payload["per_family"]["y"]) == list(rv.METRIC_KEYS)
    path = tmp_path / "q.csv"
    rv.write_query_csv(rows, path)
    assert len(path.read_text().splitlines()) == 3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    occ, fam = _cads()
    ids = list(occ)
    results, truth = [], {}
    for q in range(int(rng.integers(1, 8))):
        ranked = list(rng.permutation(ids)[:5])
        gt = ids[int(rng.integers(6))]
        results.append(RetrievalResult(f"q{q}", ranked, sorted(rng.random(5), reverse=True)))
        truth[f"q{q}"] = QueryTruth(gt, fam[gt], list(rng.permutation(ids)[:3]))
    report, _ = rv.evaluate(results, truth, occ, fam)
    m = report.metrics()
    assert all(0 <= v <= 1 for v in m.values())
    assert report.top1 <= report.top5
    assert report.mrr >= report.top1
