"""Acquisition selection: keep the candidate image closest to the report.

A frozen model trained on clean single-acquisition studies scores each
candidate against the report in the joint space; the top candidate is kept
when its margin over the runner-up exceeds the confidence threshold.
"""

import dataclasses

import numpy as np

from . import objectives as obj
from . import tensor as T

DEFAULT_MARGIN = 0.2


class CurationError(ValueError):
    pass


@dataclasses.dataclass
class CurationDecision:
    chosen_index: int
    score: float
    runner_up: float | None      # best remaining score, None with one candidate
    confident: bool
    scores: list


def decide_from_scores(scores, margin=DEFAULT_MARGIN):
    """Margin rule on raw scores; argmax wins, ties to the lowest index.

    ``confident`` requires the winner to beat the best remaining candidate
    by more than ``margin``; with a single candidate it holds vacuously.
    """
    scores = [float(s) for s in scores]
    if not scores:
        raise CurationError("need at least one candidate score")
    chosen = int(np.argmax(scores))
    if len(scores) == 1:
        return CurationDecision(0, scores[0], None, True, scores)
    runner_up = max(s for i, s in enumerate(scores) if i != chosen)
    confident = (scores[chosen] - runner_up) > margin
    return CurationDecision(chosen, scores[chosen], runner_up, confident, scores)


def select_candidate(model, candidate_images, report, margin=DEFAULT_MARGIN):
    """Score candidates against the report in the joint space, then decide."""
    if not len(candidate_images):
        raise CurationError("need at least one candidate image")
    with T.no_grad():
        stack = np.stack(candidate_images)
        decomposed = model.encode_images(stack, None)
        v_bar = obj.pooled_image_embedding(model.project_patches(decomposed)).data
        _, r_proj, _, _ = model.embed_texts([report])
    return decide_from_scores((v_bar @ r_proj.data[0]).tolist(), margin)


def curate_corpus(model, studies_with_candidates, margin=DEFAULT_MARGIN,
                  keep_first_when_unsure=True):
    """Replace each study's image with its confidently-selected candidate.

    ``studies_with_candidates`` pairs each study with a CandidateSet. When
    the margin test fails the first-listed acquisition is kept (or the
    study is dropped if ``keep_first_when_unsure`` is False); every decision
    lands in the audit rows.
    """
    curated, audit = [], []
    for study, candidates in studies_with_candidates:
        decision = select_candidate(model, candidates.images, study.report, margin)
        if decision.confident:
            image = candidates.images[decision.chosen_index]
            kept = decision.chosen_index
        elif keep_first_when_unsure:
            image = candidates.images[0]
            kept = 0
        else:
            image = None
            kept = -1
        audit.append({
            "study_id": study.study_id,
            "scores": [round(s, 6) for s in decision.scores],
            "chosen_index": decision.chosen_index,
            "kept_index": kept,
            "confident": decision.confident,
            "clean_index": candidates.clean_index,
        })
        if image is not None:
            curated.append(dataclasses.replace(study, current_image=image))
    return curated, audit
