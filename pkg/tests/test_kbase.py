import numpy as np
import pytest

from retrocast import fileformat, kbase
from retrocast.kbase import KnowledgeBaseError, eligible_candidates, overlapping_pairs, subsample
from retrocast.numkit import ConfigError
from retrocast.tsdata import Series


def _corpus(domains=("A", "B", "C"), per_domain=2, length=4000, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for d in domains:
        for i in range(per_domain):
            out.append(Series(rng.standard_normal(length), "v", f"{d}{i}", d))
    return out


def test_balanced_build():
    kb = kbase.build(_corpus(per_domain=4, length=2000), 64, 100, seed=0)
    assert kb.n_kb == 300
    assert kb.domain_counts() == {"A": 100, "B": 100, "C": 100}


def test_exhaustion_selects_everything():
    corpus = _corpus(per_domain=1, length=64 * 10)
    sets = []
    for seed in range(3):
        kb = kbase.build(corpus, 64, 10, seed)
        sets.append({(d, o) for d, o in zip(kb.dataset_ids, kb.origins)})
    assert sets[0] == sets[1] == sets[2]
    assert len(sets[0]) == 30


def test_shortfall_lists_domains():
    with pytest.raises(KnowledgeBaseError, match="A: 10 of 11"):
        kbase.build(_corpus(per_domain=1, length=640), 64, 11, 0)
    with pytest.raises(ConfigError):
        kbase.build(_corpus(), 64, 0, 0)


@pytest.mark.parametrize("seed", range(5))
def test_no_same_channel_overlap(seed):
    kb = kbase.build(_corpus(per_domain=2, length=3000, seed=seed), 100, 40, seed)
    assert overlapping_pairs(kb) == []


def test_overlap_oracle_detects_overlap():
    v = np.zeros((2, 10))
    kb = kbase.KnowledgeBase(v, ["A", "A"], ["d", "d"], [("c", 0), ("c", 9)])
    assert overlapping_pairs(kb) == [(0, 1)]
    kb = kbase.KnowledgeBase(v, ["A", "A"], ["d", "d"], [("c", 0), ("c", 10)])
    assert overlapping_pairs(kb) == []


def test_values_match_source_windows():
    corpus = _corpus(per_domain=1, length=1000)
    kb = kbase.build(corpus, 50, 5, 1)
    by_id = {s.dataset_id: s for s in corpus}
    for i in range(kb.n_kb):
        start = kb.origins[i][1]
        src = by_id[kb.dataset_ids[i]].values[start : start + 50]
        np.testing.assert_array_equal(kb.values[i], src.astype(np.float32).astype(np.float64))


def test_build_deterministic_file(tmp_path):
    corpus = _corpus()
    kbase.save(kbase.build(corpus, 64, 30, 7), tmp_path / "a.tskb")
    kbase.save(kbase.build(corpus, 64, 30, 7), tmp_path / "b.tskb")
    assert (tmp_path / "a.tskb").read_bytes() == (tmp_path / "b.tskb").read_bytes()


def test_round_trip_300(tmp_path):
    kb = kbase.build(_corpus(per_domain=4, length=2000), 64, 100, 3)
    kbase.save(kb, tmp_path / "kb.tskb")
    back = kbase.load(tmp_path / "kb.tskb")
    assert back == kb
    assert back.values.tobytes() == kb.values.tobytes()
    kbase.save(back, tmp_path / "kb2.tskb")
    assert (tmp_path / "kb.tskb").read_bytes() == (tmp_path / "kb2.tskb").read_bytes()


def test_round_trip_empty(tmp_path):
    kb = kbase.KnowledgeBase(np.zeros((0, 16)), [], [], [], sl=16)
    kbase.save(kb, tmp_path / "e.tskb")
    back = kbase.load(tmp_path / "e.tskb")
    assert back.n_kb == 0 and back.sl == 16


def test_truncated_and_corrupted(tmp_path):
    kb = kbase.build(_corpus(), 64, 10, 0)
    path = tmp_path / "kb.tskb"
    kbase.save(kb, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-1])
    with pytest.raises(fileformat.TruncatedError):
        kbase.load(path)
    bad = bytearray(blob)
    bad[100] ^= 0x01
    path.write_bytes(bytes(bad))
    with pytest.raises(fileformat.ChecksumError):
        kbase.load(path)


def test_eligible_examples():
    kb = kbase.build(_corpus(per_domain=1), 64, 5, 0)
    train = eligible_candidates(kb, "A0", training=True)
    assert {kb.dataset_ids[i] for i in train} == {"B0", "C0"}
    np.testing.assert_array_equal(eligible_candidates(kb, "A0", training=False), np.arange(kb.n_kb))
    with pytest.raises(KnowledgeBaseError, match="larger knowledge base or a smaller k"):
        eligible_candidates(kb, "A0", training=True, k=11)
    with pytest.raises(KnowledgeBaseError):
        eligible_candidates(kbase.KnowledgeBase(np.zeros((0, 4)), [], [], [], sl=4), "A0", True)


def test_leakage_property_1000_queries():
    kb = kbase.build(_corpus(per_domain=3), 64, 30, 0)
    ids = sorted(set(kb.dataset_ids)) + ["unseen"]
    rng = np.random.default_rng(0)
    for _ in range(1000):
        q = ids[rng.integers(len(ids))]
        idx = eligible_candidates(kb, q, training=True)
        assert all(kb.dataset_ids[i] != q for i in idx)
        assert len(idx) == sum(d != q for d in kb.dataset_ids)


def test_subsample():
    kb = kbase.build(_corpus(per_domain=4, length=2000), 64, 100, 0)
    assert subsample(kb, 1.0, 0) == kb
    half = subsample(kb, 0.5, 0)
    assert half.domain_counts() == {"A": 50, "B": 50, "C": 50}
    assert subsample(kb, 0.5, 0) == half
    for frac in kbase.SIZE_SWEEP:
        counts = subsample(kb, frac, 1).domain_counts()
        assert max(counts.values()) - min(counts.values()) <= 1
    assert kbase.SIZE_SWEEP == (1.0, 0.5, 0.3, 0.1, 0.01)
    with pytest.raises(KnowledgeBaseError):
        subsample(kbase.build(_corpus(), 64, 10, 0), 0.01, 0)
    with pytest.raises(ConfigError):
        subsample(kb, 0.0, 0)


def test_pooled_inherits_imbalance():
    corpus = _corpus(domains=("A",), per_domain=6) + _corpus(domains=("B",), per_domain=1)
    kb = kbase.build_pooled(corpus, 64, 200, 0)
    counts = kb.domain_counts()
    assert counts["A"] > 3 * counts["B"]
    assert overlapping_pairs(kb) == []


def test_kb_is_read_only():
    kb = kbase.build(_corpus(), 64, 5, 0)
    with pytest.raises(ValueError):
        kb.values[0, 0] = 1.0
