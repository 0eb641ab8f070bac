"""Masked-token analysis: how much the prior image helps each prediction.

For every occurrence of a token inside a single sentence, the masked
cross-entropy is computed twice: once with the real prior image and once
with the missing-prior token substituted. The per-token mean difference
(without minus with) measures reliance on the earlier image; results are
filtered to tokens with enough supporting sentences and grouped by
semantic category.
"""

import dataclasses
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class AnalysisError(ValueError):
    pass


@dataclasses.dataclass
class DeltaPriorResult:
    token: str
    n_sentences: int
    delta: float
    values: list


def report_sentences(report):
    """Period-delimited sentence segments, each with its terminal period."""
    return [part.strip() + " ." for part in report.split(".") if part.strip()]


def _masked_losses(model, entries, context_row):
    """Cross-entropy of each (masked_ids, position, target) under one context."""
    losses = []
    with T.no_grad():
        for start in range(0, len(entries), 64):
            chunk = entries[start:start + 64]
            sequences = [e[0] for e in chunk]
            context = Tensor(np.repeat(context_row[None], len(chunk), axis=0))
            enc = model.text_encoder(sequences, mode="MLM", image_context=context)
            logits = model.mlm_head(enc.token_features).data
            shifted = logits - logits.max(axis=-1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            for i, (_, pos, target) in enumerate(chunk):
                losses.append(-logp[i, pos + 1, target])  # +1 for the mode prefix
    return losses


def collect_prior_image_deltas(model, studies, tokens=None):
    """Per-token loss differences over every masked occurrence.

    ``studies`` must all carry a prior image. Masking always covers exactly
    one occurrence; the rest of the sentence is identical between the two
    context conditions. Returns {token: [delta, ...]}.
    """
    vocab = model.vocab
    wanted = set(tokens) if tokens is not None else None
    deltas = {}
    for study in studies:
        if not study.has_prior:
            raise AnalysisError(f"study {study.study_id} has no prior image")
        with T.no_grad():
            with_prior = model.encode_images(study.current_image[None],
                                             study.prior_image[None])
            without = model.encode_images(study.current_image[None], None)
            ctx_with = model.project_patches(with_prior).data[0]
            ctx_without = model.project_patches(without).data[0]
        entries, names = [], []
        for sentence in report_sentences(study.report):
            ids = vocab.tokenize(sentence)
            for pos, tid in enumerate(ids):
                word = vocab.token(tid)
                if vocab.is_special(tid) or (wanted is not None and word not in wanted):
                    continue
                masked = list(ids)
                masked[pos] = vocab.mask_id
                entries.append((masked, pos, tid))
                names.append(word)
        if not entries:
            continue
        loss_with = _masked_losses(model, entries, ctx_with)
        loss_without = _masked_losses(model, entries, ctx_without)
        for word, lw, lo in zip(names, loss_with, loss_without):
            deltas.setdefault(word, []).append(lo - lw)
    return deltas


def delta_prior_img(model, studies, token):
    """Mean benefit of the prior image for predicting one masked token."""
    values = collect_prior_image_deltas(model, studies, tokens={token}).get(token, [])
    if not values:
        raise AnalysisError(f"token '{token}' appears in no sentence of the given studies")
    return DeltaPriorResult(token, len(values), float(np.mean(values)), values)


def delta_prior_table(model, studies, min_sentences=10):
    """All tokens meeting the sentence-count filter, as DeltaPriorResults."""
    collected = collect_prior_image_deltas(model, studies)
    results = []
    for token in sorted(collected):
        values = collected[token]
        if len(values) < min_sentences:
            continue
        results.append(DeltaPriorResult(token, len(values), float(np.mean(values)), values))
    return results


def aggregate_by_category(results, category_map):
    """Per-category distribution summary rows, sorted by category name."""
    if not results:
        raise AnalysisError("no results to aggregate")
    groups = {}
    for res in results:
        category = category_map.get(res.token)
        if category is None:
            raise AnalysisError(f"token '{res.token}' has no category")
        groups.setdefault(category, []).append(res.delta)
    rows = []
    for category in sorted(groups):
        vals = np.asarray(groups[category])
        rows.append({
            "category": category,
            "n_tokens": len(vals),
            "mean": float(vals.mean()),
            "median": float(np.median(vals)),
            "q1": float(np.percentile(vals, 25)),
            "q3": float(np.percentile(vals, 75)),
            "min": float(vals.min()),
            "max": float(vals.max()),
        })
    return rows


def rank_sum_test(greater, lesser):
    """One-sided Mann-Whitney test that ``greater`` stochastically dominates.

    Normal approximation with tie correction and continuity correction;
    returns (U statistic, p-value).
    """
    a, b = np.asarray(greater, dtype=float), np.asarray(lesser, dtype=float)
    n_a, n_b = len(a), len(b)
    if n_a == 0 or n_b == 0:
        raise AnalysisError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(len(pooled))
    svals = pooled[order]
    i = 0
    tie_term = 0.0
    while i < len(pooled):
        j = i
        while j + 1 < len(pooled) and svals[j + 1] == svals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        t = j - i + 1
        tie_term += t ** 3 - t
        i = j + 1
    u = ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0
    mean = n_a * n_b / 2.0
    n = n_a + n_b
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var == 0:
        return float(u), 1.0 if u <= mean else 0.0
    z = (u - mean - 0.5) / math.sqrt(var)
    p = 0.5 * (1.0 - math.erf(z / math.sqrt(2.0)))
    return float(u), float(p)


# -- artifact writers -----------------------------------------------------------


def write_delta_csv(path, results, category_map):
    with open(path, "w") as fh:
        fh.write("token,category,n_sentences,delta\n")
        for res in sorted(results, key=lambda r: r.token):
            fh.write(f"{res.token},{category_map.get(res.token, 'Other')},"
                     f"{res.n_sentences},{res.delta:.6f}\n")


def write_category_boxplot_svg(path, rows):
    """Minimal box-and-whisker SVG, one box per category row."""
    width, box_height, pad = 640, 34, 8
    left, plot_w = 170, width - 190
    lo = min(r["min"] for r in rows)
    hi = max(r["max"] for r in rows)
    span = (hi - lo) or 1.0

    def sx(v):
        return left + (v - lo) / span * plot_w

    height = len(rows) * (box_height + pad) + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    parts.append(f'<line x1="{sx(0):.1f}" y1="10" x2="{sx(0):.1f}" y2="{height - 30}" '
                 'stroke="#999" stroke-dasharray="4"/>')
    for i, row in enumerate(rows):
        y = 16 + i * (box_height + pad)
        cy = y + box_height / 2
        parts.append(f'<text x="4" y="{cy + 4:.1f}" font-size="12">{row["category"]}'
                     f' (n={row["n_tokens"]})</text>')
        parts.append(f'<line x1="{sx(row["min"]):.1f}" y1="{cy:.1f}" '
                     f'x2="{sx(row["max"]):.1f}" y2="{cy:.1f}" stroke="#333"/>')
        parts.append(f'<rect x="{sx(row["q1"]):.1f}" y="{y:.1f}" '
                     f'width="{max(sx(row["q3"]) - sx(row["q1"]), 1.0):.1f}" '
                     f'height="{box_height}" fill="#7fb3d5" stroke="#333"/>')
        parts.append(f'<line x1="{sx(row["median"]):.1f}" y1="{y:.1f}" '
                     f'x2="{sx(row["median"]):.1f}" y2="{y + box_height:.1f}" '
                     'stroke="#111" stroke-width="2"/>')
    parts.append(f'<text x="{left}" y="{height - 12}" font-size="11">'
                 f'loss delta from adding the prior image ({lo:.3f} to {hi:.3f})</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
