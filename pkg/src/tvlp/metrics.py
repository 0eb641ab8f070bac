"""Evaluation kernels: entity matching, grounding contrast, overlap, text metrics."""

import math
import warnings

import numpy as np

from .keywords import TEMPORAL_KEYWORDS


class MetricError(ValueError):
    pass


# -- temporal entity matching ---------------------------------------------------


def temporal_entities(text):
    """Distinct temporal keywords present in a whitespace-tokenized report."""
    return set(text.split()) & set(TEMPORAL_KEYWORDS)


def tem_score(generated, reference):
    """Global precision/recall of temporal entities and their harmonic mean.

    Entity sets are per-report distinct keywords. A side with zero entities
    across the whole corpus yields a vacuous precision (or recall) of 1, a
    declared convention for the undefined 0/0 case.
    """
    if len(generated) != len(reference):
        raise MetricError("generated and reference lists must align")
    overlap = gen_total = ref_total = 0
    for gen, ref in zip(generated, reference):
        e_gen, e_ref = temporal_entities(gen), temporal_entities(ref)
        overlap += len(e_gen & e_ref)
        gen_total += len(e_gen)
        ref_total += len(e_ref)
    precision = overlap / gen_total if gen_total else 1.0
    recall = overlap / ref_total if ref_total else 1.0
    tem = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, tem


# -- grounding ---------------------------------------------------------------------


def _bbox_mask(shape, bbox):
    x0, y0, x1, y1 = bbox
    h, w = shape
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise MetricError(f"bbox {bbox} out of bounds for map {shape}")
    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


def cnr(similarity_map, bbox):
    """|mean_in - mean_out| / sqrt(var_in + var_out) over map cells."""
    similarity_map = np.asarray(similarity_map, dtype=float)
    mask = _bbox_mask(similarity_map.shape, bbox)
    if mask.all() or not mask.any():
        raise MetricError("bbox must be strictly smaller than the map")
    inside, outside = similarity_map[mask], similarity_map[~mask]
    denom = inside.var() + outside.var()
    if denom == 0.0:
        raise MetricError("zero variance inside and outside the box; contrast undefined")
    return float(abs(inside.mean() - outside.mean()) / math.sqrt(denom))


DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


def miou(similarity_map, bbox, thresholds=DEFAULT_IOU_THRESHOLDS):
    """Mean IoU of thresholded maps against the box mask."""
    if not thresholds:
        raise MetricError("need at least one threshold")
    similarity_map = np.asarray(similarity_map, dtype=float)
    mask = _bbox_mask(similarity_map.shape, bbox)
    scores = []
    for t in thresholds:
        pred = similarity_map >= t
        union = (pred | mask).sum()
        scores.append((pred & mask).sum() / union if union else 0.0)
    return float(np.mean(scores))


# -- classification -----------------------------------------------------------------


def macro_accuracy(predictions, labels, classes=None):
    """Unweighted mean of per-class recall; absent classes are skipped with a warning."""
    if len(predictions) != len(labels):
        raise MetricError("predictions and labels must align")
    classes = classes or sorted(set(labels))
    recalls = []
    for cls in classes:
        idx = [i for i, lab in enumerate(labels) if lab == cls]
        if not idx:
            warnings.warn(f"class '{cls}' absent from labels; excluded from macro average")
            continue
        recalls.append(sum(predictions[i] == cls for i in idx) / len(idx))
    if not recalls:
        raise MetricError("no class present in labels")
    return float(np.mean(recalls))


# -- sentence similarity protocol -----------------------------------------------------


def threshold_grid(step=0.005):
    """Decision thresholds spanning [-1, 1] inclusive at the given step."""
    count = int(round(2.0 / step))
    return np.linspace(-1.0, 1.0, count + 1)


def roc_auc(scores, labels):
    """Rank-based AUC of ``scores`` for binary ``labels`` (ties get half credit)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined with a single-class label set")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sentence_similarity_eval(pairs, folds=10, step=0.005):
    """Cosine-threshold protocol: (accuracy via per-fold tuning, global AUC).

    ``pairs`` holds (embedding_a, embedding_b, label) with label True for
    paraphrase and False for contradiction. Folds are assigned round-robin
    by index; each fold's threshold is tuned on the remaining folds over
    the [-1, 1] grid, taking the lowest threshold among ties.
    """
    if len(pairs) < folds:
        raise MetricError(f"need at least {folds} pairs for {folds}-fold validation")
    cosines, labels = [], []
    for a, b, label in pairs:
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        cosines.append(float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b))))
        labels.append(bool(label))
    cosines = np.asarray(cosines)
    labels = np.asarray(labels)
    auc = roc_auc(cosines, labels)

    grid = threshold_grid(step)
    fold_of = np.arange(len(pairs)) % folds
    correct = 0
    for fold in range(folds):
        held = fold_of == fold
        rest_cos, rest_lab = cosines[~held], labels[~held]
        hits = [(rest_cos >= t) == rest_lab for t in grid]
        best_t = grid[int(np.argmax([h.sum() for h in hits]))]
        correct += int(((cosines[held] >= best_t) == labels[held]).sum())
    return correct / len(pairs), auc


# -- lexical report metrics --------------------------------------------------------------


def _ngram_counts(tokens, n):
    counts = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i:i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def bleu4(generated, reference, max_order=4):
    """Corpus BLEU with brevity penalty; add-one smoothing on zero higher orders.

    Inputs are aligned lists of whitespace-tokenizable strings (one
    reference per candidate). Unigram precision is never smoothed, so
    disjoint vocabularies score exactly zero.
    """
    if not reference or len(generated) != len(reference):
        raise MetricError("need aligned, non-empty generated/reference corpora")
    matches = [0] * max_order
    totals = [0] * max_order
    gen_len = ref_len = 0
    for gen, ref in zip(generated, reference):
        gt, rt = gen.split(), ref.split()
        gen_len += len(gt)
        ref_len += len(rt)
        for n in range(1, max_order + 1):
            gc, rc = _ngram_counts(gt, n), _ngram_counts(rt, n)
            totals[n - 1] += max(len(gt) - n + 1, 0)
            matches[n - 1] += sum(min(c, rc.get(k, 0)) for k, c in gc.items())
    log_precision = 0.0
    for n in range(max_order):
        m, t = matches[n], totals[n]
        if t == 0:
            return 0.0
        if m == 0:
            if n == 0:
                return 0.0
            m, t = m + 1, t + 1  # smoothing keeps higher orders finite
        log_precision += math.log(m / t) / max_order
    brevity = 1.0 if gen_len >= ref_len else math.exp(1.0 - ref_len / max(gen_len, 1))
    return float(brevity * math.exp(log_precision))


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(generated, reference):
    """Mean per-pair longest-common-subsequence F-measure (harmonic of P and R)."""
    if not reference or len(generated) != len(reference):
        raise MetricError("need aligned, non-empty generated/reference corpora")
    scores = []
    for gen, ref in zip(generated, reference):
        gt, rt = gen.split(), ref.split()
        lcs = _lcs_length(gt, rt)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, r = lcs / len(gt), lcs / len(rt)
        scores.append(2 * p * r / (p + r))
    return float(np.mean(scores))
