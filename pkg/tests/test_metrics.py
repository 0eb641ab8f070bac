"""Metric kernels against hand counts and independent brute-force oracles."""

import math

import numpy as np
import pytest

from tvlp import metrics
from tvlp.keywords import TEMPORAL_KEYWORDS
from tvlp.metrics import (MetricError, bleu4, cnr, macro_accuracy, miou,
                          roc_auc, rouge_l, sentence_similarity_eval,
                          tem_score, temporal_entities, threshold_grid)


# -- temporal entity matching -------------------------------------------------------


def test_temporal_entities_extraction():
    assert temporal_entities("the disc is worsening .") == {"worsening"}
    assert temporal_entities("no findings .") == set()
    assert temporal_entities("worsening worsening stable") == {"worsening", "stable"}


def test_tem_identical_corpora():
    reports = ["the disc is worsening .", "stable bar ."]
    p, r, tem = tem_score(reports, reports)
    assert p == r == tem == 1.0


def test_tem_hand_counted_pair():
    p, r, tem = tem_score(["new stable thing"], ["new worsening thing"])
    assert p == 0.5 and r == 0.5 and tem == 0.5


def test_tem_zero_generated_entities():
    p, r, tem = tem_score(["no findings ."], ["the disc is worsening ."])
    assert p == 1.0  # vacuous precision, declared convention
    assert r == 0.0
    assert tem == 0.0


def test_tem_no_entities_anywhere_is_vacuous_one():
    p, r, tem = tem_score(["no findings ."], ["no findings ."])
    assert p == r == tem == 1.0


def test_tem_sets_not_bags():
    # repeated keywords count once per report
    p1, r1, t1 = tem_score(["new new new"], ["new"])
    assert p1 == r1 == t1 == 1.0


def test_tem_symmetry_under_swap():
    rng = np.random.default_rng(0)
    words = list(TEMPORAL_KEYWORDS[:6]) + ["disc", "bar", "the"]
    gen = [" ".join(rng.choice(words, size=5)) for _ in range(20)]
    ref = [" ".join(rng.choice(words, size=5)) for _ in range(20)]
    _, _, ab = tem_score(gen, ref)
    _, _, ba = tem_score(ref, gen)
    assert abs(ab - ba) < 1e-12


def test_tem_global_formulas_match_bruteforce():
    rng = np.random.default_rng(1)
    words = list(TEMPORAL_KEYWORDS[:8]) + ["disc", "in", "the"]
    gen = [" ".join(rng.choice(words, size=6)) for _ in range(25)]
    ref = [" ".join(rng.choice(words, size=6)) for _ in range(25)]
    inter = sum(len(temporal_entities(g) & temporal_entities(r))
                for g, r in zip(gen, ref))
    p_expected = inter / sum(len(temporal_entities(g)) for g in gen)
    r_expected = inter / sum(len(temporal_entities(r)) for r in ref)
    p, r, tem = tem_score(gen, ref)
    assert abs(p - p_expected) < 1e-12
    assert abs(r - r_expected) < 1e-12
    assert abs(tem - 2 * p * r / (p + r)) < 1e-12


def test_tem_length_mismatch():
    with pytest.raises(MetricError):
        tem_score(["a"], ["a", "b"])


# -- contrast-to-noise ----------------------------------------------------------------


def test_cnr_step_map_with_dither():
    # enough cells for the sample variances to sit near the dither variance
    rng = np.random.default_rng(2)
    grid = np.zeros((32, 32))
    grid[8:16, 8:16] = 1.0
    grid += rng.normal(0, 0.01, size=grid.shape)
    value = cnr(grid, (8, 8, 16, 16))
    assert abs(value - 1.0 / math.sqrt(2e-4)) < 10.0  # ~70.7


def test_cnr_exact_arithmetic_oracle():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(8, 8))
    bbox = (1, 2, 4, 5)
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 1:4] = True
    inside, outside = grid[mask], grid[~mask]
    expected = abs(inside.mean() - outside.mean()) / math.sqrt(
        inside.var() + outside.var())
    assert abs(cnr(grid, bbox) - expected) < 1e-12


def test_cnr_shift_invariance():
    rng = np.random.default_rng(4)
    grid = rng.normal(size=(8, 8))
    assert abs(cnr(grid, (1, 1, 3, 3)) - cnr(grid + 5.0, (1, 1, 3, 3))) < 1e-9


def test_cnr_uniform_map_is_undefined():
    with pytest.raises(MetricError):
        cnr(np.zeros((8, 8)), (1, 1, 3, 3))


def test_cnr_near_uniform_map_is_near_zero():
    rng = np.random.default_rng(5)
    grid = 0.5 + rng.normal(0, 1e-6, size=(8, 8))
    assert cnr(grid, (1, 1, 3, 3)) < 1.5


def test_cnr_relabeling_within_regions():
    rng = np.random.default_rng(6)
    grid = rng.normal(size=(8, 8))
    bbox = (2, 2, 5, 5)
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 2:5] = True
    shuffled = grid.copy()
    inside = shuffled[mask]
    rng.shuffle(inside)
    shuffled[mask] = inside
    outside = shuffled[~mask]
    rng.shuffle(outside)
    shuffled[~mask] = outside
    assert abs(cnr(grid, bbox) - cnr(shuffled, bbox)) < 1e-12


def test_cnr_bbox_validation():
    with pytest.raises(MetricError):
        cnr(np.zeros((8, 8)), (0, 0, 9, 2))
    with pytest.raises(MetricError):
        cnr(np.random.default_rng(0).normal(size=(8, 8)), (0, 0, 8, 8))


# -- mean IoU --------------------------------------------------------------------------


def test_miou_indicator_map_is_one():
    grid = np.zeros((8, 8))
    grid[3:6, 2:5] = 1.0
    assert miou(grid, (2, 3, 5, 6), thresholds=(0.1, 0.5, 0.9)) == 1.0


def test_miou_all_negative_map_is_zero():
    grid = np.full((8, 8), -1.0)
    assert miou(grid, (2, 3, 5, 6)) == 0.0


def test_miou_matches_bruteforce_enumeration():
    rng = np.random.default_rng(7)
    grid = rng.uniform(-1, 1, size=(8, 8))
    bbox = (1, 1, 4, 3)
    thresholds = (0.1, 0.2, 0.3, 0.4, 0.5)
    total = 0.0
    for t in thresholds:
        inter = union = 0
        for y in range(8):
            for x in range(8):
                pred = grid[y, x] >= t
                true = 1 <= x < 4 and 1 <= y < 3
                inter += pred and true
                union += pred or true
        total += inter / union if union else 0.0
    assert abs(miou(grid, bbox, thresholds) - total / len(thresholds)) < 1e-12


def test_miou_random_map_near_area_baseline():
    rng = np.random.default_rng(8)
    bbox = (0, 0, 3, 2)  # ~9% of the grid
    vals = [miou(rng.uniform(-1, 1, size=(8, 8)), bbox, thresholds=(0.0,))
            for _ in range(200)]
    # threshold 0 keeps half the cells; IoU approx area/(area/2 + half grid)
    # bbox 6 cells, ~32 predicted, E[intersection] = 3 -> IoU near 3/35
    assert 0.04 < np.mean(vals) < 0.15


# -- macro accuracy ---------------------------------------------------------------------


def test_macro_accuracy_perfect_and_constant():
    labels = ["a", "b", "c"] * 4
    assert macro_accuracy(labels, labels) == 1.0
    assert abs(macro_accuracy(["a"] * 12, labels) - 1 / 3) < 1e-12


def test_macro_accuracy_hand_confusion():
    labels = ["x"] * 4 + ["y"] * 4 + ["z"] * 4
    preds = ["x"] * 4 + ["y", "y", "z", "z"] + ["x"] * 4
    assert abs(macro_accuracy(preds, labels) - 0.5) < 1e-12


def test_macro_accuracy_absent_class_warns_and_skips():
    with pytest.warns(UserWarning):
        value = macro_accuracy(["a", "b"], ["a", "b"], classes=("a", "b", "c"))
    assert value == 1.0


def test_macro_accuracy_relabel_invariance():
    rng = np.random.default_rng(9)
    labels = list(rng.choice(["a", "b", "c"], size=60))
    preds = list(rng.choice(["a", "b", "c"], size=60))
    base = macro_accuracy(preds, labels)
    mapping = {"a": "z", "b": "x", "c": "y"}
    swapped = macro_accuracy([mapping[p] for p in preds],
                             [mapping[l] for l in labels])
    assert abs(base - swapped) < 1e-12


# -- sentence similarity protocol -----------------------------------------------------------


def test_threshold_grid_contract():
    grid = threshold_grid(0.005)
    assert len(grid) == 401
    assert grid[0] == -1.0 and grid[-1] == 1.0
    np.testing.assert_allclose(np.diff(grid), 0.005, atol=1e-12)


def test_roc_auc_hand_cases():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [True, True, False, False]) == 0.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [True, True, False, False]) == 0.5
    # hand count: of the 4 positive/negative pairs, 3 are ordered correctly
    auc = roc_auc([0.9, 0.4, 0.6, 0.3], [True, True, False, False])
    assert abs(auc - 3 / 4) < 1e-12


def test_roc_auc_single_class_undefined():
    with pytest.raises(MetricError):
        roc_auc([0.5, 0.6], [True, True])


def embed_pair(cos):
    """2-d unit embeddings with an exact given cosine."""
    a = np.array([1.0, 0.0])
    b = np.array([cos, math.sqrt(max(0.0, 1 - cos ** 2))])
    return a, b


def test_sentence_similarity_separated_fixture():
    pairs = [(*embed_pair(0.9), True) for _ in range(10)]
    pairs += [(*embed_pair(0.1), False) for _ in range(10)]
    accuracy, auc = sentence_similarity_eval(pairs, folds=10)
    assert accuracy == 1.0 and auc == 1.0


def test_sentence_similarity_random_labels_auc_half():
    rng = np.random.default_rng(10)
    aucs = []
    for seed in range(20):
        local = np.random.default_rng(seed)
        pairs = [(*embed_pair(local.uniform(-0.9, 0.9)), bool(local.integers(2)))
                 for _ in range(40)]
        try:
            _, auc = sentence_similarity_eval(pairs)
        except MetricError:
            continue
        aucs.append(auc)
    assert abs(np.mean(aucs) - 0.5) < 0.1


def test_sentence_similarity_needs_enough_pairs():
    with pytest.raises(MetricError):
        sentence_similarity_eval([(*embed_pair(0.5), True)] * 5, folds=10)


def test_sentence_similarity_hand_threshold_case():
    # 20 pairs, cosines 0.8/0.6 for paraphrase, 0.2/0.0 for contradiction;
    # every training fold tunes to a threshold in (0.2, 0.6], held-out all correct
    pairs = []
    for i in range(10):
        pairs.append((*embed_pair(0.8 if i % 2 else 0.6), True))
        pairs.append((*embed_pair(0.2 if i % 2 else 0.0), False))
    accuracy, auc = sentence_similarity_eval(pairs)
    assert accuracy == 1.0 and auc == 1.0


# -- lexical metrics --------------------------------------------------------------------------


def test_bleu_identical_and_disjoint():
    corpus = ["a b c d", "e f g h"]
    assert abs(bleu4(corpus, corpus) - 1.0) < 1e-12
    assert bleu4(["a b c d"], ["e f g h"]) == 0.0


def test_bleu_hand_case_with_smoothing():
    # p1=3/4, p2=2/3, p3=1/2, p4 smoothed to 1/2; BP=1
    expected = (3 / 4 * 2 / 3 * 1 / 2 * 1 / 2) ** 0.25
    assert abs(bleu4(["a b c d"], ["a b c e"]) - expected) < 1e-12


def test_bleu_brevity_penalty():
    shorter = bleu4(["a b c d"], ["a b c d e f"])
    assert shorter < bleu4(["a b c d e f"], ["a b c d e f"])
    assert shorter > 0
    # a corpus too short to contain any 4-gram scores zero by convention
    assert bleu4(["a b"], ["a b c d"]) == 0.0


def test_bleu_matches_bruteforce_on_random_corpora():
    rng = np.random.default_rng(11)
    words = ["a", "b", "c", "d", "e"]

    def brute(gen_corpus, ref_corpus):
        stats = {n: [0, 0] for n in range(1, 5)}
        glen = rlen = 0
        for g, r in zip(gen_corpus, ref_corpus):
            gt, rt = g.split(), r.split()
            glen += len(gt)
            rlen += len(rt)
            for n in range(1, 5):
                gngrams, rngrams = {}, {}
                for i in range(len(gt) - n + 1):
                    key = tuple(gt[i:i + n])
                    gngrams[key] = gngrams.get(key, 0) + 1
                for i in range(len(rt) - n + 1):
                    key = tuple(rt[i:i + n])
                    rngrams[key] = rngrams.get(key, 0) + 1
                stats[n][1] += max(len(gt) - n + 1, 0)
                stats[n][0] += sum(min(c, rngrams.get(k, 0))
                                   for k, c in gngrams.items())
        logp = 0.0
        for n in range(1, 5):
            m, t = stats[n]
            if t == 0:
                return 0.0
            if m == 0:
                if n == 1:
                    return 0.0
                m, t = m + 1, t + 1
            logp += math.log(m / t) / 4
        bp = 1.0 if glen >= rlen else math.exp(1 - rlen / max(glen, 1))
        return bp * math.exp(logp)

    for trial in range(20):
        local = np.random.default_rng(trial)
        gen = [" ".join(local.choice(words, size=local.integers(4, 9)))
               for _ in range(5)]
        ref = [" ".join(local.choice(words, size=local.integers(4, 9)))
               for _ in range(5)]
        assert abs(bleu4(gen, ref) - brute(gen, ref)) < 1e-12


def test_rouge_identical_and_disjoint():
    assert rouge_l(["a b c"], ["a b c"]) == 1.0
    assert rouge_l(["a b"], ["c d"]) == 0.0


def test_rouge_hand_case():
    # LCS("a b c d", "a b c e") = 3; P = R = 3/4; F = 0.75
    assert abs(rouge_l(["a b c d"], ["a b c e"]) - 0.75) < 1e-12


def test_rouge_matches_bruteforce_lcs():
    rng = np.random.default_rng(12)
    words = ["a", "b", "c", "d"]

    def lcs(x, y):
        table = [[0] * (len(y) + 1) for _ in range(len(x) + 1)]
        for i in range(1, len(x) + 1):
            for j in range(1, len(y) + 1):
                if x[i - 1] == y[j - 1]:
                    table[i][j] = table[i - 1][j - 1] + 1
                else:
                    table[i][j] = max(table[i - 1][j], table[i][j - 1])
        return table[-1][-1]

    for trial in range(20):
        local = np.random.default_rng(100 + trial)
        gen = " ".join(local.choice(words, size=6))
        ref = " ".join(local.choice(words, size=7))
        l = lcs(gen.split(), ref.split())
        if l == 0:
            expected = 0.0
        else:
            p, r = l / 6, l / 7
            expected = 2 * p * r / (p + r)
        assert abs(rouge_l([gen], [ref]) - expected) < 1e-12


def test_lexical_metrics_contract_errors():
    with pytest.raises(MetricError):
        bleu4(["a"], [])
    with pytest.raises(MetricError):
        rouge_l(["a", "b"], ["a"])
