from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcd.data import DatasetManifest, synthesize
from dcd.errors import ConfigError
from dcd.mining import (
    MiningConfig,
    build_candidate_list,
    build_candidate_lists,
    dump_candidates,
    knowledge_adjust,
    make_batch,
    random_candidate_lists,
    sample_negatives,
    select_hard_negatives,
)
from dcd.model import ScorerConfig, init_scorer, score_pairs


@pytest.fixture(scope="module")
def split():
    m = DatasetManifest(n_train=40, n_val=4, n_test=4, captions_per_image=3, image_dim=6, text_dim=5,
                        latent_dim=3, noise_sigma=0.3, seed=11)
    return synthesize(m)["train"]


@pytest.fixture(scope="module")
def teacher():
    return init_scorer(ScorerConfig(image_dim=6, text_dim=5, hidden=(8, 8), seed=3, role="teacher"))


def _batch(split, k=24, seed=0, direction="mixed"):
    pairs = np.random.default_rng(seed).permutation(split.n_pairs)[:k]
    return make_batch(split, pairs, [seed, 0, 0], direction)


def test_sample_whole_pool(split):
    b = _batch(split)
    pool = b.pool(0)
    got = sample_negatives(b, 0, len(pool), np.random.default_rng(0))
    assert sorted(got) == sorted(pool)


def test_sample_excludes_positive_group(split):
    rng = np.random.default_rng(1)
    for trial in range(1000):
        b = _batch(split, k=12, seed=trial)
        i = int(rng.integers(len(b)))
        modality, q, pos = b.query(i)
        neg = sample_negatives(b, i, 5, rng)
        assert len(set(neg)) == 5
        assert pos not in neg
        group = split.text_image(pos) if modality == "image" else pos
        keys_groups = split.text_image(neg) if modality == "image" else neg
        assert group not in set(np.atleast_1d(keys_groups).tolist())


def test_sample_deterministic(split):
    b = _batch(split)
    a = sample_negatives(b, 3, 6, np.random.default_rng(42))
    c = sample_negatives(b, 3, 6, np.random.default_rng(42))
    np.testing.assert_array_equal(a, c)


def test_sample_pool_too_small(split):
    b = _batch(split, k=5)
    with pytest.raises(ConfigError, match="need 10 negatives"):
        sample_negatives(b, 0, 10, np.random.default_rng(0))


def test_text_query_pool_is_distinct_images(split):
    b = _batch(split, k=30, direction="text")
    for i in range(len(b)):
        pool = b.pool(i)
        assert len(set(pool.tolist())) == len(pool)
        assert split.text_image(b.pairs[i]) not in pool


def test_select_examples():
    assert select_hard_negatives([0.1, 0.9, 0.5, 0.3], 2) == [1, 2]
    assert select_hard_negatives([0.4, 0.4, 0.4, 0.4], 2) == [0, 1]
    assert select_hard_negatives([0.2, 0.7, 0.1, 0.7], 4) == [1, 3, 0, 2]


def _sort_truncate_oracle(scores, m):
    # brute force: repeatedly take the best remaining, first index on ties
    remaining = list(range(len(scores)))
    out = []
    for _ in range(m):
        best = remaining[0]
        for j in remaining[1:]:
            if scores[j] > scores[best]:
                best = j
        out.append(best)
        remaining.remove(best)
    return out


def test_select_exhaustive_small():
    rng = np.random.default_rng(7)
    for M in range(1, 9):
        for _ in range(40):
            s = rng.integers(0, 4, size=M).astype(float) if rng.random() < 0.5 else rng.normal(size=M)
            for mp in range(1, M + 1):
                assert select_hard_negatives(s, mp) == _sort_truncate_oracle(s, mp)


def test_knowledge_adjust_examples():
    np.testing.assert_array_equal(knowledge_adjust([0.2, 0.9, 0.5, 0.1]), [0.9, 0.5, 0.2, 0.1])
    np.testing.assert_array_equal(knowledge_adjust([0.9, 0.1, 0.5]), [0.9, 0.1, 0.5])
    np.testing.assert_array_equal(knowledge_adjust([1.5]), [1.5])


def test_knowledge_adjust_keeps_negative_order():
    raw = np.array([0.0, 3.0, -1.0, 2.0, 1.0])
    out = knowledge_adjust(raw)
    assert out[0] == 3.0
    # negatives ranked 3.0 > 2.0 > 1.0 > -1.0 receive 2.0, 1.0, 0.0, -1.0
    np.testing.assert_array_equal(out, [3.0, 2.0, -1.0, 1.0, 0.0])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_knowledge_adjust_properties(raw):
    out = knowledge_adjust(raw)
    assert Counter(out.tolist()) == Counter(raw)
    assert out[0] == max(raw)
    assert np.argmax(out) == 0


def _check_invariants(c, m_prime):
    assert len(c.teacher_logits_raw) == m_prime + 1
    assert Counter(c.teacher_logits_adjusted.tolist()) == Counter(c.teacher_logits_raw.tolist())
    assert np.argmax(c.teacher_logits_adjusted) == 0
    assert len(set(c.negative_key_ids)) == m_prime
    assert c.positive_key_id not in c.negative_key_ids


def test_zero_teacher_candidate_list(split, teacher):
    t = teacher.copy()
    w, b = t.layers[-1]
    t.layers[-1] = (np.zeros_like(w), np.zeros_like(b))
    b_ = _batch(split)
    cfg = MiningConfig(M=10, M_prime=4)
    for c in build_candidate_lists(t, b_, cfg, [0, 0, 0]):
        assert not c.teacher_logits_raw.any()
        np.testing.assert_array_equal(c.teacher_logits_adjusted, c.teacher_logits_raw)
        assert c.selection_provenance == [0, 1, 2, 3]


def test_full_pool_selection_is_sort(split, teacher):
    b = _batch(split, k=20, direction="image")
    for i in range(len(b)):
        pool = b.pool(i)
        cfg = MiningConfig(M=len(pool), M_prime=len(pool))
        c = build_candidate_list(teacher, b, i, cfg, [5, 0, 0])
        # brute force: score every pool key separately and sort
        _, q, pos = b.query(i)
        scores = {int(k): float(score_pairs(teacher, split.images[q:q + 1], split.texts[k:k + 1])[0]) for k in pool}
        expected = sorted(scores, key=lambda k: (-scores[k], list(pool).index(k)))
        assert set(c.negative_key_ids) == set(expected)
        got_scores = [scores[k] for k in c.negative_key_ids]
        np.testing.assert_allclose(got_scores, sorted(got_scores, reverse=True), atol=0)
        np.testing.assert_allclose(c.teacher_logits_raw[1:], got_scores, atol=1e-12)


def test_single_and_batched_agree(split, teacher):
    b = _batch(split, k=20)
    cfg = MiningConfig(M=8, M_prime=3)
    many = build_candidate_lists(teacher, b, cfg, [1, 2, 3])
    for i in (0, 7, 19):
        one = build_candidate_list(teacher, b, i, cfg, [1, 2, 3])
        assert one.negative_key_ids == many[i].negative_key_ids
        np.testing.assert_allclose(one.teacher_logits_raw, many[i].teacher_logits_raw, atol=1e-12)


def test_invariant_fuzz(split, teacher):
    rng = np.random.default_rng(9)
    for trial in range(500):
        k = int(rng.integers(12, 40))
        b = _batch(split, k=k, seed=trial)
        M = int(rng.integers(1, min(len(b.pool(i)) for i in range(k)) + 1))
        mp = int(rng.integers(1, M + 1))
        cands = build_candidate_lists(teacher, b, MiningConfig(M, mp), [trial])
        for c in cands:
            _check_invariants(c, mp)


def test_positive_always_present(split, teacher):
    # a teacher that hates the positive still yields it at position 0 with the top adjusted score
    b = _batch(split, k=20, direction="image")
    cands = build_candidate_lists(teacher, b, MiningConfig(10, 5), [0])
    for i, c in enumerate(cands):
        assert c.key_ids[0] == b.query(i)[2]


def test_random_lists_match_sampling(split, teacher):
    b = _batch(split, k=20)
    with_t = random_candidate_lists(b, 5, [4, 4], teacher)
    without = random_candidate_lists(b, 5, [4, 4])
    for a, c in zip(with_t, without):
        assert a.key_ids == c.key_ids
        assert c.teacher_logits_raw is None
        np.testing.assert_array_equal(a.teacher_logits_adjusted, a.teacher_logits_raw)


def test_mining_config_validation():
    with pytest.raises(ConfigError):
        MiningConfig(M=3, M_prime=4)
    with pytest.raises(ConfigError):
        MiningConfig(M=3, M_prime=0)


def test_dump_candidates(tmp_path, split, teacher):
    import json

    b = _batch(split, k=16)
    cands = build_candidate_lists(teacher, b, MiningConfig(6, 2), [0])
    dump_candidates(cands, tmp_path / "c.jsonl", batch_index=3)
    rows = [json.loads(line) for line in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert len(rows) == 16
    assert rows[0]["batch"] == 3 and len(rows[0]["key_ids"]) == 3 and len(rows[0]["adjusted"]) == 3
