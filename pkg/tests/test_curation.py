import numpy as np
import pytest

from tvlp.curation import (CurationError, curate_corpus, decide_from_scores,
                           select_candidate)
from tvlp.data import corrupt_candidates


def test_single_candidate_vacuously_confident():
    decision = decide_from_scores([0.42])
    assert decision.chosen_index == 0
    assert decision.confident
    assert decision.runner_up is None


def test_margin_arithmetic_confident():
    decision = decide_from_scores([0.9, 0.5], margin=0.2)
    assert decision.chosen_index == 0
    assert decision.confident
    assert decision.runner_up == 0.5


def test_margin_arithmetic_not_confident():
    decision = decide_from_scores([0.60, 0.55], margin=0.2)
    assert decision.chosen_index == 0
    assert not decision.confident
    assert abs(decision.score - decision.runner_up - 0.05) < 1e-12


def test_margin_is_strict_inequality():
    assert not decide_from_scores([0.7, 0.5], margin=0.2).confident
    assert decide_from_scores([0.7, 0.49999], margin=0.2).confident


def test_ties_break_to_lowest_index():
    decision = decide_from_scores([0.5, 0.8, 0.8], margin=0.1)
    assert decision.chosen_index == 1
    assert not decision.confident


def test_runner_up_is_max_of_remaining():
    decision = decide_from_scores([0.2, 0.9, 0.6, 0.1], margin=0.2)
    assert decision.runner_up == 0.6
    assert decision.confident


def test_empty_scores_raise():
    with pytest.raises(CurationError):
        decide_from_scores([])


def test_select_candidate_permutation_covariance(tiny_model, small_corpus):
    study = small_corpus.train[0]
    cands = corrupt_candidates(study, 3, np.random.default_rng(0))
    base = select_candidate(tiny_model, cands.images, study.report)
    perm = [2, 0, 1]
    permuted = [cands.images[i] for i in perm]
    moved = select_candidate(tiny_model, permuted, study.report)
    assert perm[moved.chosen_index] == base.chosen_index
    np.testing.assert_allclose(sorted(moved.scores), sorted(base.scores), atol=1e-12)


def test_curate_single_candidate_corpus_is_identity(tiny_model, small_corpus):
    studies = small_corpus.train[:3]
    paired = []
    for s in studies:
        cands = corrupt_candidates(s, 2, np.random.default_rng(1))
        only = type(cands)([s.current_image], 0, ["clean"])
        paired.append((s, only))
    curated, audit = curate_corpus(tiny_model, paired)
    assert len(curated) == 3
    for new, old in zip(curated, studies):
        np.testing.assert_array_equal(new.current_image, old.current_image)
    assert all(row["confident"] for row in audit)


def test_curate_corpus_audit_and_fallback(tiny_model, small_corpus):
    studies = small_corpus.train[:4]
    paired = [(s, corrupt_candidates(s, 3, np.random.default_rng(i)))
              for i, s in enumerate(studies)]
    curated, audit = curate_corpus(tiny_model, paired, margin=10.0)  # nothing confident
    assert len(curated) == len(studies)
    for (study, cands), new, row in zip(paired, curated, audit):
        assert not row["confident"]
        assert row["kept_index"] == 0
        np.testing.assert_array_equal(new.current_image, cands.images[0])
    dropped, _ = curate_corpus(tiny_model, paired, margin=10.0,
                               keep_first_when_unsure=False)
    assert dropped == []
