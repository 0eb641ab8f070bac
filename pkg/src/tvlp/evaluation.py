"""Evaluation harness: task-level runners shared by the CLI and the test suite."""

import numpy as np

from . import analysis, curation, downstream, metrics
from .data import bbox_to_grid, corrupt_candidates
from .keywords import GENERATOR_KEYWORDS, PROGRESSION_CLASSES, token_category_map


def grounding_phrase(finding, image_size):
    from .data import location_phrase
    loc = location_phrase(finding.bbox, image_size)
    return f"there is a {finding.kind} in the {loc} ."


def evaluate_grounding(model, studies, use_prior=True, iou_thresholds=None,
                       image_size=None):
    """Phrase grounding over every finding with a bbox; contrast + overlap stats."""
    thresholds = iou_thresholds or metrics.DEFAULT_IOU_THRESHOLDS
    image_size = image_size or model.config.image.image_size
    grid = model.config.image.grid_size
    rows = []
    for study in studies:
        prior = study.prior_image if use_prior else None
        for finding in study.findings:
            phrase = grounding_phrase(finding, image_size)
            result = downstream.ground_phrase(model, study.current_image, prior, [phrase])
            gbox = bbox_to_grid(finding.bbox, image_size, grid)
            cnr_value = metrics.cnr(result.similarity_map, gbox)
            miou_value = metrics.miou(result.similarity_map, gbox, thresholds)
            flat_argmax = int(np.argmax(result.similarity_map))
            ay, ax = divmod(flat_argmax, grid)
            hit = gbox[0] <= ax < gbox[2] and gbox[1] <= ay < gbox[3]
            rows.append({"study_id": study.study_id, "kind": finding.kind,
                         "phrase": phrase, "cnr": cnr_value, "miou": miou_value,
                         "argmax_in_bbox": bool(hit), "map": result.similarity_map})
    return {
        "per_finding": rows,
        "mean_cnr": float(np.mean([r["cnr"] for r in rows])),
        "mean_miou": float(np.mean([r["miou"] for r in rows])),
        "argmax_in_bbox_rate": float(np.mean([r["argmax_in_bbox"] for r in rows])),
    }


def evaluate_zero_shot_classification(decoder, model, studies, verbalizer=None):
    """Verbalizer-prompted progression classification on multi-image studies."""
    verbalizer = verbalizer or downstream.Verbalizer.default()
    predictions, labels, rows = [], [], []
    for study in studies:
        if not study.has_prior:
            continue
        for finding in study.findings:
            if finding.progression is None:
                continue
            posterior = downstream.zero_shot_temporal_classify(
                decoder, model, study.current_image, study.prior_image,
                finding.kind, verbalizer)
            pred = max(posterior, key=posterior.get)
            predictions.append(pred)
            labels.append(finding.progression)
            rows.append({"study_id": study.study_id, "kind": finding.kind,
                         "label": finding.progression, "prediction": pred,
                         **{f"p_{c.lower()}": posterior[c] for c in PROGRESSION_CLASSES}})
    acc = metrics.macro_accuracy(predictions, labels, PROGRESSION_CLASSES)
    return {"per_finding": rows, "macro_accuracy": acc,
            "predictions": predictions, "labels": labels}


def evaluate_report_generation(decoder, model, studies, max_len=24,
                               use_prior_image=True, use_prior_report=True,
                               use_sep=True):
    """Greedy decoding over the study list plus lexical/temporal metrics."""
    generated, references, rows = [], [], []
    for study in studies:
        prior = study.prior_image if study.has_prior else None
        text = downstream.generate_report(
            decoder, model, study.current_image, prior, study.prior_report,
            max_len=max_len, use_prior_image=use_prior_image,
            use_prior_report=use_prior_report, use_sep=use_sep)
        generated.append(text)
        references.append(study.report)
        rows.append({"study_id": study.study_id, "generated": text,
                     "reference": study.report})
    precision, recall, tem = metrics.tem_score(generated, references)
    return {
        "rows": rows,
        "tem": tem, "tem_precision": precision, "tem_recall": recall,
        "bleu4": metrics.bleu4(generated, references),
        "rouge_l": metrics.rouge_l(generated, references),
    }


def evaluate_retrieval(model, studies, train_reports=None, rng=None):
    """Nearest-report retrieval: self-retrieval on the eval set, plus quality."""
    rng = rng or np.random.default_rng(0)
    reports = [s.report for s in studies]
    embeddings = downstream.study_image_embeddings(model, studies)
    self_index = downstream.ReportIndex(model, reports)
    retrieved, self_hits = [], 0
    for i, emb in enumerate(embeddings):
        _, text = self_index.retrieve(emb)
        retrieved.append(text)
        self_hits += int(text == reports[i])
    _, _, tem = metrics.tem_score(retrieved, reports)
    shuffled = list(reports)
    rng.shuffle(shuffled)
    _, _, random_tem = metrics.tem_score(shuffled, reports)
    out = {
        "self_retrieval_rate": self_hits / len(studies),
        "tem": tem,
        "random_tem": random_tem,
        "bleu4": metrics.bleu4(retrieved, reports),
        "rouge_l": metrics.rouge_l(retrieved, reports),
    }
    if train_reports:
        train_index = downstream.ReportIndex(model, train_reports)
        cross = [train_index.retrieve(emb)[1] for emb in embeddings]
        _, _, out["train_tem"] = metrics.tem_score(cross, reports)
    return out


def build_sentence_pairs(studies, rng=None):
    """Paraphrase/contradiction pairs by swapping the temporal keyword.

    Same-class swaps are paraphrases (True); cross-class swaps are
    contradictions (False).
    """
    rng = rng or np.random.default_rng(0)
    pairs = []
    for study in studies:
        for sentence in analysis.report_sentences(study.report):
            words = sentence.split()
            hits = [(i, w, cls) for i, w in enumerate(words)
                    for cls, kws in GENERATOR_KEYWORDS.items() if w in kws]
            for i, word, cls in hits:
                same = [k for k in GENERATOR_KEYWORDS[cls] if k != word]
                other_classes = [c for c in PROGRESSION_CLASSES if c != cls]
                other_cls = other_classes[int(rng.integers(len(other_classes)))]
                contra_kw = GENERATOR_KEYWORDS[other_cls][
                    int(rng.integers(len(GENERATOR_KEYWORDS[other_cls])))]
                if same:
                    para = list(words)
                    para[i] = same[int(rng.integers(len(same)))]
                    pairs.append((sentence, " ".join(para), True))
                contra = list(words)
                contra[i] = contra_kw
                pairs.append((sentence, " ".join(contra), False))
    return pairs


def evaluate_sentence_similarity(model, pairs, folds=10, step=0.005):
    embedded = [(downstream.sentence_embedding(model, a),
                 downstream.sentence_embedding(model, b), label)
                for a, b, label in pairs]
    accuracy, auc = metrics.sentence_similarity_eval(embedded, folds=folds, step=step)
    return {"accuracy": accuracy, "roc_auc": auc, "n_pairs": len(pairs)}


def evaluate_delta_prior(model, studies, min_sentences=10):
    """Loss-delta table grouped by category and the headline direction test."""
    multi = [s for s in studies if s.has_prior]
    results = analysis.delta_prior_table(model, multi, min_sentences=min_sentences)
    categories = token_category_map()
    rows = analysis.aggregate_by_category(results, categories)
    progression = [r.delta for r in results if categories.get(r.token) == "Progression"]
    stopword = [r.delta for r in results if categories.get(r.token) == "Stop word"]
    out = {"results": results, "by_category": rows,
           "progression_mean": float(np.mean(progression)) if progression else None,
           "stopword_mean": float(np.mean(stopword)) if stopword else None,
           "rank_p": None}
    if progression and stopword:
        _, p = analysis.rank_sum_test(progression, stopword)
        out["rank_p"] = p
    return out


def evaluate_curation(model, studies, n_candidates=3, margin=0.2, seed=0):
    """Corrupt-candidate selection: how often confident picks are the clean image."""
    rng = np.random.default_rng(seed)
    paired = [(s, corrupt_candidates(s, n_candidates, rng)) for s in studies]
    curated, audit = curation.curate_corpus(model, paired, margin)
    confident = [row for row in audit if row["confident"]]
    clean_hits = [row for row in confident if row["chosen_index"] == row["clean_index"]]
    return {
        "audit": audit,
        "curated_studies": curated,
        "confident_rate": len(confident) / len(audit) if audit else 0.0,
        "clean_pick_rate": len(clean_hits) / len(confident) if confident else None,
    }


def probe_labelled_subset(studies, fraction, rng):
    """Deterministic labelled subset of multi-image single-finding studies."""
    eligible = [s for s in studies
                if s.has_prior and s.findings and s.findings[0].progression]
    order = rng.permutation(len(eligible))
    keep = max(3, int(round(fraction * len(eligible))))
    return [eligible[i] for i in order[:keep]]


def evaluate_probe(model, train_studies, test_studies, label_fraction=0.1,
                   probe_epochs=40, probe_lr=1e-3, seed=0):
    """Prompt-initialized linear probe vs the zero-label prompt baseline."""
    rng = np.random.default_rng(seed)
    labelled = probe_labelled_subset(train_studies, label_fraction, rng)
    test = [s for s in test_studies
            if s.has_prior and s.findings and s.findings[0].progression]
    test_emb = downstream.study_image_embeddings(model, test)
    test_labels = [s.findings[0].progression for s in test]

    prompt_preds = downstream.prompt_classify(model, test_emb)
    prompt_acc = metrics.macro_accuracy(prompt_preds, test_labels, PROGRESSION_CLASSES)

    probe = downstream.probe_init_from_prompts(model, downstream.default_class_prompts())
    train_emb = downstream.study_image_embeddings(model, labelled)
    train_labels = [s.findings[0].progression for s in labelled]
    fitted = downstream.probe_train(probe, train_emb, train_labels,
                                    epochs=probe_epochs, lr=probe_lr, seed=seed)
    probe_preds = fitted.predict(test_emb)
    probe_acc = metrics.macro_accuracy(probe_preds, test_labels, PROGRESSION_CLASSES)
    return {"prompt_accuracy": prompt_acc, "probe_accuracy": probe_acc,
            "n_labelled": len(labelled), "n_test": len(test)}
