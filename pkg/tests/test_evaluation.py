"""
Retrieval metrics against brute-force oracles, plus the embedding file format.
"""

import numpy as np
import pytest
import torch
from pydantic import ValidationError as PydanticValidationError

from clnet.config import ViewId
from clnet.errors import EmbeddingFormatError, ValidationError
from clnet.evaluation import (
    EmbeddingMatrix,
    MetricsReport,
    RetrievalResult,
    average_precision,
    embed_corpus,
    evaluate,
    hit_rate,
    rank_references,
    recall_at_k,
    resolve_k,
)
from clnet.model import CrossViewNet


def unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def random_matrix(ids, dim, rng):
    return EmbeddingMatrix(list(ids), unit(rng.normal(size=(len(ids), dim))))


def result_with_ranks(ranks):
    """One query per entry of ``ranks``; its truth ``t<i>`` sits at the given 1-based rank."""
    n_refs = max(ranks) + 1
    query_ids = [f"q{i}" for i in range(len(ranks))]
    rankings = []
    ref_ids = [f"r{j:03d}" for j in range(n_refs)] + [f"t{i}" for i in range(len(ranks))]
    for i, rank in enumerate(ranks):
        fillers = [j for j in range(n_refs)][: rank - 1]
        rest = [j for j in range(n_refs) if j not in fillers] + [n_refs + k for k in range(len(ranks)) if k != i]
        rankings.append(fillers + [n_refs + i] + rest)
    truth = {f"q{i}": f"t{i}" for i in range(len(ranks))}
    return RetrievalResult(query_ids, ref_ids, np.array(rankings)), truth


def oracle_rankings(q, r):
    """Sort each row by (-score, id) with plain Python."""
    out = []
    for qv in q.vectors.astype(np.float64):
        scored = [(-float(np.dot(qv, rv.astype(np.float64))), rid) for rid, rv in zip(r.ids, r.vectors)]
        out.append([rid for _, rid in sorted(scored)])
    return out


class TestRanking:
    def test_self_retrieval(self):
        rng = np.random.default_rng(0)
        m = random_matrix([f"id{i}" for i in range(12)], 8, rng)
        result = rank_references(m, m)
        for qid in m.ids:
            assert result.top1(qid) == qid

    def test_ties_break_by_ascending_id(self):
        v = unit([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        refs = EmbeddingMatrix(["b", "a", "c"], v)
        queries = EmbeddingMatrix(["q"], unit([[1.0, 0.0]]))
        assert rank_references(queries, refs).ranking("q") == ["a", "b", "c"]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(1)
        q = random_matrix([f"q{i}" for i in range(10)], 6, rng)
        r = random_matrix([f"r{i}" for i in range(10)], 6, rng)
        result = rank_references(q, r)
        expected = oracle_rankings(q, r)
        for i, qid in enumerate(q.ids):
            assert result.ranking(qid) == expected[i]

    def test_increasing_transform_of_scores_keeps_order(self):
        rng = np.random.default_rng(11)
        q = random_matrix([f"q{i}" for i in range(6)], 5, rng)
        r = random_matrix([f"r{i}" for i in range(15)], 5, rng)
        scores = q.vectors.astype(np.float64) @ r.vectors.astype(np.float64).T
        result = rank_references(q, r)
        for transform in (lambda s: np.exp(4 * s), lambda s: s ** 3 + 2 * s, lambda s: 10 * s - 7):
            warped = transform(scores)
            for i, qid in enumerate(q.ids):
                expected = [rid for _, rid in sorted(zip(-warped[i], r.ids))]
                assert result.ranking(qid) == expected

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValidationError, match="dimension"):
            rank_references(random_matrix(["a"], 3, rng), random_matrix(["b"], 4, rng))


class TestRecall:
    def test_all_first(self):
        result, truth = result_with_ranks([1, 1, 1])
        for k in (1, 5, 10, "1%"):
            assert recall_at_k(result, truth, k) == 1.0

    def test_all_third(self):
        result, truth = result_with_ranks([3, 3, 3, 3])
        assert recall_at_k(result, truth, 1) == 0.0
        assert recall_at_k(result, truth, 5) == 1.0

    def test_top_one_percent_rounds_up(self):
        assert resolve_k("1%", 128) == 2
        assert resolve_k("1%", 50) == 1
        assert resolve_k("1%", 101) == 2

    def test_invalid_k(self):
        with pytest.raises(ValidationError):
            resolve_k(0, 10)


class TestHitRateAndAP:
    def test_positive_on_top(self):
        result, truth = result_with_ranks([1, 1])
        assert hit_rate(result, {q: {t} for q, t in truth.items()}) == 1.0

    def test_semi_positive_counts(self):
        result, truth = result_with_ranks([2])
        top = result.top1("q0")
        assert hit_rate(result, {"q0": {"t0", top}}) == 1.0
        assert hit_rate(result, {"q0": {"t0"}}) == 0.0

    def test_ap_examples(self):
        one, truth = result_with_ranks([1])
        assert average_precision(one, {"q0": ["t0"]}) == 1.0
        two, _ = result_with_ranks([2])
        assert average_precision(two, {"q0": ["t0"]}) == 0.5
        three, _ = result_with_ranks([3])
        first = three.top1("q0")
        assert average_precision(three, {"q0": [first, "t0"]}) == pytest.approx(5 / 6)

    def test_empty_positive_set(self):
        result, _ = result_with_ranks([1])
        with pytest.raises(ValidationError):
            hit_rate(result, {"q0": set()})


def test_metric_oracles_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(500):
        n = int(rng.integers(2, 51))
        nq = int(rng.integers(1, n + 1))
        ref_ids = [f"r{j:02d}" for j in range(n)]
        # coarse vectors so ties actually happen
        coarse = rng.integers(1, 3, size=(n, 3)) * rng.choice([-1, 1], size=(n, 3))
        refs = EmbeddingMatrix(ref_ids, unit(coarse))
        qsel = rng.choice(n, size=nq, replace=False)
        queries = EmbeddingMatrix([f"q{i}" for i in range(nq)], unit(rng.normal(size=(nq, 3))))
        truth = {f"q{i}": ref_ids[j] for i, j in enumerate(qsel)}
        positives = {q: {t, ref_ids[int(rng.integers(n))]} for q, t in truth.items()}

        result = rank_references(queries, refs)
        orders = dict(zip(queries.ids, oracle_rankings(queries, refs)))
        recalls = []
        for k in (1, 5, 10):
            expected = sum(orders[q].index(t) + 1 <= k for q, t in truth.items()) / nq
            got = recall_at_k(result, truth, k)
            assert got == expected
            recalls.append(got)
        assert recalls[0] <= recalls[1] <= recalls[2]

        expected_hr = sum(orders[q][0] in positives[q] for q in truth) / nq
        assert hit_rate(result, positives) == expected_hr

        ap_total = 0.0
        for q, rel in positives.items():
            hits, precisions = 0, []
            for pos, rid in enumerate(orders[q], start=1):
                if rid in rel:
                    hits += 1
                    precisions.append(hits / pos)
            ap_total += sum(precisions) / len(rel)
        assert average_precision(result, positives) == pytest.approx(ap_total / nq, abs=1e-12)


class TestEvaluate:
    def test_hit_rate_at_least_recall_at_one(self):
        rng = np.random.default_rng(3)
        refs = random_matrix(["a", "a-sp0", "b", "b-sp0", "c"], 4, rng)
        queries = random_matrix(["a", "b", "c"], 4, rng)
        report = evaluate(
            queries, refs, {q: q for q in queries.ids},
            semi_positives={"a": ["a-sp0"], "b": ["b-sp0"], "c": []},
            with_hit_rate=True,
        )
        assert report.hit_rate >= report.recall_at_1
        assert report.recall_at_1 <= report.recall_at_5 <= report.recall_at_10

    def test_hit_rate_without_semi_positives(self):
        rng = np.random.default_rng(4)
        m = random_matrix(["a", "b"], 3, rng)
        with pytest.raises(ValidationError, match="semi-positive"):
            evaluate(m, m, {"a": "a", "b": "b"}, with_hit_rate=True)

    def test_report_refuses_non_monotone_recall(self):
        with pytest.raises(PydanticValidationError):
            MetricsReport(recall_at_1=0.5, recall_at_5=0.4, recall_at_10=0.6, recall_at_1pct=0.5,
                          num_queries=1, num_references=1)

    def test_report_written_as_json(self, tmp_path):
        rng = np.random.default_rng(5)
        m = random_matrix(["a", "b", "c"], 3, rng)
        report = evaluate(m, m, {q: q for q in m.ids}, config_hash="abc")
        report.write(tmp_path / "metrics.json")
        loaded = MetricsReport.model_validate_json((tmp_path / "metrics.json").read_text())
        assert loaded.recall_at_1 == 1.0
        assert loaded.config_hash == "abc"


class TestEmbeddingFile:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(6)
        m = random_matrix(["x", "y-sp1", "z"], 5, rng)
        m.save(tmp_path / "e.emb")
        back = EmbeddingMatrix.load(tmp_path / "e.emb")
        assert back.ids == m.ids
        assert np.array_equal(back.vectors, m.vectors)

    def test_bad_magic(self, tmp_path):
        rng = np.random.default_rng(7)
        random_matrix(["x"], 2, rng).save(tmp_path / "e.emb")
        data = bytearray((tmp_path / "e.emb").read_bytes())
        data[:4] = b"NOPE"
        (tmp_path / "e.emb").write_bytes(bytes(data))
        with pytest.raises(EmbeddingFormatError, match="magic"):
            EmbeddingMatrix.load(tmp_path / "e.emb")

    def test_truncated(self, tmp_path):
        rng = np.random.default_rng(8)
        random_matrix(["x", "y"], 4, rng).save(tmp_path / "e.emb")
        data = (tmp_path / "e.emb").read_bytes()
        (tmp_path / "e.emb").write_bytes(data[:20])
        with pytest.raises(EmbeddingFormatError):
            EmbeddingMatrix.load(tmp_path / "e.emb")

    def test_ids_not_utf8(self, tmp_path):
        rng = np.random.default_rng(9)
        random_matrix(["x"], 2, rng).save(tmp_path / "e.emb")
        data = (tmp_path / "e.emb").read_bytes()
        (tmp_path / "e.emb").write_bytes(data[: -len(b"x\n")] + b"\xff\xfe\n")
        with pytest.raises(EmbeddingFormatError, match="UTF-8"):
            EmbeddingMatrix.load(tmp_path / "e.emb")

    def test_missing_file(self, tmp_path):
        with pytest.raises(EmbeddingFormatError, match="cannot read"):
            EmbeddingMatrix.load(tmp_path / "absent.emb")

    def test_non_unit_rows_rejected(self):
        with pytest.raises(ValidationError, match="unit norm"):
            EmbeddingMatrix(["a"], np.array([[2.0, 0.0]]))


class TestEmbedCorpus:
    def test_one_image_one_unit_row(self, tiny_encoder):
        model = CrossViewNet(tiny_encoder, seed=0)
        m = embed_corpus(model, [torch.rand(3, 32, 32)], ViewId.SATELLITE)
        assert m.vectors.shape == (1, 16)
        assert abs(np.linalg.norm(m.vectors[0]) - 1) < 1e-5

    def test_duplicates_and_batching(self, tiny_encoder):
        model = CrossViewNet(tiny_encoder, seed=0)
        images = [torch.rand(3, 16, 64) for _ in range(8)]
        batched = embed_corpus(model, images, ViewId.GROUND, batch_size=8)
        single = embed_corpus(model, images, ViewId.GROUND, batch_size=1)
        again = embed_corpus(model, images[:1], ViewId.GROUND)
        assert np.array_equal(again.vectors[0], embed_corpus(model, images[:1], ViewId.GROUND).vectors[0])
        assert np.allclose(batched.vectors, single.vectors, atol=1e-6)

    def test_wrong_image_shape(self, tiny_encoder):
        model = CrossViewNet(tiny_encoder, seed=0)
        with pytest.raises(ValidationError, match="expected"):
            embed_corpus(model, [torch.rand(3, 16, 16)], ViewId.GROUND)
