"""Frozen keyword lists: temporal-entity set, verbalizer classes, categories.

These drive report generation templates, the temporal entity-matching
metric, zero-shot class mapping, and the token-category aggregation, so
they live in one place and never change at runtime.
"""

PROGRESSION_CLASSES = ("Improving", "Stable", "Worsening")

# Temporal entities counted by the entity-matching metric (44 words).
TEMPORAL_KEYWORDS = (
    "bigger", "change", "cleared", "constant", "decrease", "decreased",
    "decreasing", "elevated", "elevation", "enlarged", "enlargement",
    "enlarging", "expanded", "greater", "growing", "improved", "improvement",
    "improving", "increase", "increased", "increasing", "larger", "new",
    "persistence", "persistent", "persisting", "progression", "progressive",
    "reduced", "removal", "resolution", "resolved", "resolving", "smaller",
    "stability", "stable", "stably", "unchanged", "unfolded", "worse",
    "worsen", "worsened", "worsening", "unaltered",
)

# Next-token to progression-class mapping for zero-shot prompting.
VERBALIZER_TOKENS = {
    "Improving": ("better", "cleared", "decreased", "decreasing", "improved",
                  "improving", "reduced", "resolved", "resolving", "smaller"),
    "Stable": ("constant", "stable", "unchanged"),
    "Worsening": ("bigger", "developing", "enlarged", "enlarging", "greater",
                  "growing", "increased", "increasing", "larger", "new",
                  "progressing", "progressive", "worse", "worsened", "worsening"),
}

# Words the synthetic report generator actually emits per class; every one
# of these appears in both the temporal-entity list and the verbalizer.
GENERATOR_KEYWORDS = {
    "Improving": ("cleared", "decreased", "improving", "resolving", "smaller"),
    "Stable": ("constant", "stable", "unchanged"),
    "Worsening": ("bigger", "enlarging", "increased", "larger", "new", "worsening"),
}

FINDING_KINDS = ("disc", "bar", "ring")
LOCATION_WORDS = ("upper", "lower", "left", "right")
STRUCTURE_WORDS = ("there", "is", "a", "the", "in", "no", "findings", ".")

TOKEN_CATEGORIES = (
    "Progression", "Support devices", "Other", "Stop word", "Positional",
    "Meta", "Anatomy", "Descriptive", "Size or degree", "Finding", "Uncertain",
)


def corpus_words():
    """Every non-special word the synthetic corpus vocabulary contains."""
    extra = sorted(set(sum((list(v) for v in VERBALIZER_TOKENS.values()), []))
                   - set(TEMPORAL_KEYWORDS))
    return tuple(sorted(set(TEMPORAL_KEYWORDS) | set(extra) | set(FINDING_KINDS)
                        | set(LOCATION_WORDS) | set(STRUCTURE_WORDS)))


def token_category_map():
    """Semantic category for every corpus word, for the loss-delta analysis."""
    progression = set(TEMPORAL_KEYWORDS)
    for toks in VERBALIZER_TOKENS.values():
        progression.update(toks)
    categories = {}
    for word in corpus_words():
        if word in progression:
            categories[word] = "Progression"
        elif word in FINDING_KINDS:
            categories[word] = "Finding"
        elif word in LOCATION_WORDS:
            categories[word] = "Positional"
        elif word == "findings":
            categories[word] = "Meta"
        elif word == ".":
            categories[word] = "Other"
        else:
            categories[word] = "Stop word"
    return categories
