"""Deterministic longitudinal image-report corpus with known ground truth.

Each study is a 64x64 grayscale image with one or two geometric findings,
an optional earlier image of the same finding at a size dictated by the
progression label (plus a small pose perturbation), and a templated
lowercase report whose temporal keyword matches the label exactly.
"""

import dataclasses
import json
import math
import os

import numpy as np

from .keywords import FINDING_KINDS, GENERATOR_KEYWORDS, PROGRESSION_CLASSES

FINDING_INTENSITY = 0.6
STABLE_JITTER = 0.05          # fractional size noise for Stable pairs
CHANGE_FACTOR = (1.3, 1.6)    # size ratio range for Improving/Worsening
POSE_ROTATION_DEG = 15.0
POSE_TRANSLATION_AT_64 = 4.0
SIZE_RANGE_AT_64 = (5.0, 9.0)  # finding half-extent, scaled with image size


def _size_range(image_size):
    scale = image_size / 64.0
    return SIZE_RANGE_AT_64[0] * scale, SIZE_RANGE_AT_64[1] * scale


def _pose_translation(image_size):
    return POSE_TRANSLATION_AT_64 * image_size / 64.0


class DataConfigError(ValueError):
    pass


@dataclasses.dataclass
class Finding:
    kind: str
    progression: str | None          # class name, or None for single-image studies
    bbox: tuple                      # (x0, y0, x1, y1) half-open pixel rect
    keyword: str | None = None       # temporal keyword used in the report
    prior_bbox: tuple | None = None  # where the finding sits in the prior image


@dataclasses.dataclass
class SyntheticStudy:
    study_id: str
    current_image: np.ndarray
    prior_image: np.ndarray | None
    report: str
    prior_report: str | None
    findings: list

    @property
    def has_prior(self):
        return self.prior_image is not None


@dataclasses.dataclass
class CorpusSplit:
    train: list
    val: list
    test: list
    seed: int
    fraction_with_prior: float
    image_size: int

    def all_studies(self):
        return self.train + self.val + self.test


@dataclasses.dataclass
class CandidateSet:
    """Acquisition candidates for one study; exactly one is uncorrupted."""
    images: list
    clean_index: int
    corruptions: list                # per-candidate label, "clean" included


# -- geometry -------------------------------------------------------------


@dataclasses.dataclass
class _Shape:
    kind: str
    cx: float
    cy: float
    size: float
    angle: float = 0.0

    def mask(self, n):
        ys, xs = np.mgrid[0:n, 0:n].astype(float)
        dx, dy = xs - self.cx, ys - self.cy
        if self.kind == "disc":
            return dx ** 2 + dy ** 2 <= self.size ** 2
        if self.kind == "ring":
            d2 = dx ** 2 + dy ** 2
            return (d2 <= self.size ** 2) & (d2 >= (0.45 * self.size) ** 2)
        if self.kind == "bar":
            c, s = math.cos(self.angle), math.sin(self.angle)
            u = dx * c + dy * s
            v = -dx * s + dy * c
            return (np.abs(u) <= self.size) & (np.abs(v) <= 0.55 * self.size)
        raise DataConfigError(f"unknown finding kind '{self.kind}'")

    def bbox(self, n):
        if self.kind == "bar":
            c, s = abs(math.cos(self.angle)), abs(math.sin(self.angle))
            ext_x = self.size * c + 0.55 * self.size * s
            ext_y = self.size * s + 0.55 * self.size * c
        else:
            ext_x = ext_y = self.size
        x0 = max(0, math.floor(self.cx - ext_x))
        y0 = max(0, math.floor(self.cy - ext_y))
        x1 = min(n, math.ceil(self.cx + ext_x) + 1)
        y1 = min(n, math.ceil(self.cy + ext_y) + 1)
        return (x0, y0, x1, y1)


def _render(shapes, n, rng):
    # random per-study gradient: background intensity carries no consistent
    # positional meaning, so text can only ground on the findings themselves
    gx, gy = rng.uniform(-0.05, 0.05, size=2)
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    img = 0.12 + gx * (xs / n - 0.5) + gy * (ys / n - 0.5)
    img += rng.uniform(-0.02, 0.02, size=(n, n))
    for shape in shapes:
        img = np.where(shape.mask(n), img + FINDING_INTENSITY, img)
    return np.clip(img, 0.0, 1.0)


def location_phrase(bbox, n):
    """Coarse quadrant of a pixel bbox, e.g. 'upper left'."""
    cx = 0.5 * (bbox[0] + bbox[2])
    cy = 0.5 * (bbox[1] + bbox[3])
    vert = "upper" if cy < n / 2 else "lower"
    horiz = "left" if cx < n / 2 else "right"
    return f"{vert} {horiz}"


def bbox_to_grid(bbox, image_size, grid_size):
    """Patch-grid rect covering a pixel bbox.

    Cells whose centers fall inside the bbox; a thin box that straddles no
    center (a steep narrow bar) falls back to every intersecting cell along
    that axis, so the result is never empty.
    """
    stride = image_size / grid_size

    def axis(lo, hi):
        c0 = max(0, math.ceil((lo - stride / 2) / stride))
        c1 = min(grid_size, math.floor((hi - stride / 2) / stride) + 1)
        if c1 <= c0:
            c0 = max(0, min(grid_size - 1, math.floor(lo / stride)))
            c1 = min(grid_size, max(c0 + 1, math.ceil(hi / stride)))
        return c0, c1

    x0, y0, x1, y1 = bbox
    gx0, gx1 = axis(x0, x1)
    gy0, gy1 = axis(y0, y1)
    return (gx0, gy0, gx1, gy1)


# -- reports --------------------------------------------------------------


def compose_report(findings, image_size=64, rng=None):
    """One lowercase sentence per finding; temporal keyword iff labeled."""
    if not findings:
        return "no findings ."
    sentences = []
    for f in findings:
        loc = location_phrase(f.bbox, image_size)
        if f.progression is None:
            sentences.append(f"there is a {f.kind} in the {loc} .")
        else:
            kw = f.keyword
            if kw is None:
                options = GENERATOR_KEYWORDS[f.progression]
                kw = options[int(rng.integers(len(options)))] if rng is not None else options[0]
            # keyword follows "<kind> is" verbatim so next-token prompting
            # with that bigram stays inside the training distribution
            sentences.append(f"the {loc} {f.kind} is {kw} .")
    return " ".join(sentences)


# -- generation -----------------------------------------------------------


def _sample_shape(rng, n, kinds_in_use):
    kinds = [k for k in FINDING_KINDS if k not in kinds_in_use]
    kind = kinds[int(rng.integers(len(kinds)))]
    lo, hi = _size_range(n)
    size = rng.uniform(lo, hi)
    margin = hi * CHANGE_FACTOR[1] + _pose_translation(n) + 2
    cx = rng.uniform(margin, n - margin)
    cy = rng.uniform(margin, n - margin)
    angle = rng.uniform(0, math.pi) if kind == "bar" else 0.0
    return _Shape(kind, cx, cy, size, angle)


def _prior_shape(shape, label, rng, n):
    if label == "Worsening":
        size = shape.size / rng.uniform(*CHANGE_FACTOR)
    elif label == "Improving":
        size = shape.size * rng.uniform(*CHANGE_FACTOR)
    else:
        size = shape.size * rng.uniform(1 - STABLE_JITTER, 1 + STABLE_JITTER)
    rot = math.radians(rng.uniform(-POSE_ROTATION_DEG, POSE_ROTATION_DEG))
    shift = _pose_translation(n)
    tx, ty = rng.uniform(-shift, shift, size=2)
    c, s = math.cos(rot), math.sin(rot)
    half = n / 2.0
    dx, dy = shape.cx - half, shape.cy - half
    cx = half + dx * c - dy * s + tx
    cy = half + dx * s + dy * c + ty
    pad = size * 1.5 + 1
    cx = float(np.clip(cx, pad, n - pad))
    cy = float(np.clip(cy, pad, n - pad))
    return _Shape(shape.kind, cx, cy, size, shape.angle + rot)


def progression_keyword(kind, label):
    """Deterministic report keyword for a (finding kind, class) pair.

    Keeping the wording a function of visible study content means a correct
    decoder can reproduce the reference keyword exactly, so entity-matching
    measures temporal understanding instead of sampling luck.
    """
    options = GENERATOR_KEYWORDS[label]
    return options[FINDING_KINDS.index(kind) % len(options)]


def _overlaps(a, b, n):
    ax0, ay0, ax1, ay1 = a.bbox(n)
    bx0, by0, bx1, by1 = b.bbox(n)
    return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


def _split_counts(total, fractions):
    raw = [total * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainders = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in remainders[: total - sum(counts)]:
        counts[i] += 1
    return counts


def generate_corpus(seed, n_studies, fraction_with_prior=0.68, image_size=64,
                    split_fractions=(0.8, 0.1, 0.1), max_findings=1,
                    class_prior=None):
    """Build a reproducible train/val/test corpus of longitudinal studies.

    Multi-image counts and progression-label marginals are assigned by
    stratified shuffling, so they match the requested fractions to within
    one study instead of drifting with sampling noise.
    """
    if n_studies < 10:
        raise DataConfigError("need at least 10 studies")
    if not 0.0 <= fraction_with_prior <= 1.0:
        raise DataConfigError("fraction_with_prior must lie in [0, 1]")
    hi = _size_range(image_size)[1]
    if image_size <= 2 * (hi * CHANGE_FACTOR[1] + _pose_translation(image_size) + 2):
        raise DataConfigError(f"image_size {image_size} too small for the configured findings")
    class_prior = class_prior or {c: 1.0 / 3.0 for c in PROGRESSION_CLASSES}

    rng = np.random.default_rng(seed)
    n_multi = int(round(fraction_with_prior * n_studies))
    has_prior_flags = np.zeros(n_studies, dtype=bool)
    has_prior_flags[:n_multi] = True
    rng.shuffle(has_prior_flags)

    # stratified labels for every finding slot of multi-image studies
    counts_per_study = [int(rng.integers(1, max_findings + 1)) for _ in range(n_studies)]
    n_multi_findings = sum(c for c, m in zip(counts_per_study, has_prior_flags) if m)
    label_counts = _split_counts(n_multi_findings,
                                 [class_prior[c] for c in PROGRESSION_CLASSES])
    label_pool = [c for c, k in zip(PROGRESSION_CLASSES, label_counts) for _ in range(k)]
    rng.shuffle(label_pool)
    label_iter = iter(label_pool)

    studies = []
    for idx in range(n_studies):
        multi = bool(has_prior_flags[idx])
        shapes = []
        for _ in range(counts_per_study[idx]):
            for _ in range(50):
                cand = _sample_shape(rng, image_size, [s.kind for s in shapes])
                if all(not _overlaps(cand, other, image_size) for other in shapes):
                    shapes.append(cand)
                    break
        findings = []
        prior_shapes = []
        for shape in shapes:
            if multi:
                label = next(label_iter)
                keyword = progression_keyword(shape.kind, label)
                prior_shapes.append(_prior_shape(shape, label, rng, image_size))
            else:
                label, keyword = None, None
            prior_bbox = prior_shapes[-1].bbox(image_size) if multi else None
            findings.append(Finding(shape.kind, label, shape.bbox(image_size),
                                    keyword, prior_bbox))

        current = _render(shapes, image_size, rng)
        prior = _render(prior_shapes, image_size, rng) if multi else None
        report = compose_report(findings, image_size)
        prior_report = None
        if multi:
            prior_findings = [Finding(s.kind, None, s.bbox(image_size)) for s in prior_shapes]
            prior_report = compose_report(prior_findings, image_size)
        studies.append(SyntheticStudy(f"study{idx:05d}", current, prior,
                                      report, prior_report, findings))

    n_train, n_val, n_test = _split_counts(n_studies, split_fractions)
    return CorpusSplit(studies[:n_train], studies[n_train:n_train + n_val],
                       studies[n_train + n_val:], seed, fraction_with_prior, image_size)


# -- acquisition candidates ------------------------------------------------


def _corrupt(image, kind, bbox, rng):
    n = image.shape[0]
    if kind == "noise":
        return rng.uniform(0.0, 1.0, size=image.shape)
    if kind == "invert":
        return 1.0 - image
    if kind == "crop":
        # keep a quadrant that excludes the finding center (limited field of view)
        cx = 0.5 * (bbox[0] + bbox[2]) >= n / 2
        cy = 0.5 * (bbox[1] + bbox[3]) >= n / 2
        out = np.zeros_like(image)
        xs = slice(n // 2, n) if not cx else slice(0, n // 2)
        ys = slice(n // 2, n) if not cy else slice(0, n // 2)
        out[ys, xs] = image[ys, xs]
        return out
    raise DataConfigError(f"unknown corruption '{kind}'")


def corrupt_candidates(study, n_candidates, rng=None):
    """Clean current image plus corrupted re-acquisitions, order shuffled."""
    if n_candidates < 2:
        raise DataConfigError("need at least 2 candidates")
    rng = rng or np.random.default_rng(0)
    bbox = study.findings[0].bbox if study.findings else (0, 0, 1, 1)
    kinds = ["noise", "crop", "invert"]
    entries = [("clean", study.current_image.copy())]
    for i in range(n_candidates - 1):
        kind = kinds[i % len(kinds)]
        entries.append((kind, _corrupt(study.current_image, kind, bbox, rng)))
    order = rng.permutation(len(entries))
    images = [entries[i][1] for i in order]
    labels = [entries[i][0] for i in order]
    return CandidateSet(images, labels.index("clean"), labels)


# -- serialization ----------------------------------------------------------


def write_pgm(path, image):
    """Binary 8-bit PGM; values are expected in [0, 1]."""
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise DataConfigError(f"{path}: not a binary PGM file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8).reshape(h, w)
    return data.astype(float) / maxval


def _study_record(study, split, image_dir):
    rec = {
        "study_id": study.study_id,
        "split": split,
        "report": study.report,
        "prior_report": study.prior_report,
        "has_prior": study.has_prior,
        "current_image": f"{image_dir}/{study.study_id}_current.pgm",
        "prior_image": f"{image_dir}/{study.study_id}_prior.pgm" if study.has_prior else None,
        "findings": [
            {"kind": f.kind, "progression": f.progression,
             "bbox": list(f.bbox), "keyword": f.keyword,
             "prior_bbox": list(f.prior_bbox) if f.prior_bbox else None}
            for f in study.findings
        ],
    }
    return rec


def save_corpus(corpus, out_dir):
    """Directory layout: meta.json, index.jsonl, images/*.pgm."""
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)
    meta = {
        "seed": corpus.seed,
        "fraction_with_prior": corpus.fraction_with_prior,
        "image_size": corpus.image_size,
        "n_studies": len(corpus.all_studies()),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "index.jsonl"), "w") as fh:
        for split in ("train", "val", "test"):
            for study in getattr(corpus, split):
                fh.write(json.dumps(_study_record(study, split, "images"), sort_keys=True))
                fh.write("\n")
                write_pgm(os.path.join(image_dir, f"{study.study_id}_current.pgm"),
                          study.current_image)
                if study.has_prior:
                    write_pgm(os.path.join(image_dir, f"{study.study_id}_prior.pgm"),
                              study.prior_image)


def load_corpus(corpus_dir):
    with open(os.path.join(corpus_dir, "meta.json")) as fh:
        meta = json.load(fh)
    splits = {"train": [], "val": [], "test": []}
    with open(os.path.join(corpus_dir, "index.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            current = read_pgm(os.path.join(corpus_dir, rec["current_image"]))
            prior = None
            if rec["has_prior"]:
                prior = read_pgm(os.path.join(corpus_dir, rec["prior_image"]))
            findings = [Finding(f["kind"], f["progression"], tuple(f["bbox"]),
                                f.get("keyword"),
                                tuple(f["prior_bbox"]) if f.get("prior_bbox") else None)
                        for f in rec["findings"]]
            splits[rec["split"]].append(SyntheticStudy(
                rec["study_id"], current, prior, rec["report"],
                rec["prior_report"], findings))
    return CorpusSplit(splits["train"], splits["val"], splits["test"],
                       meta["seed"], meta["fraction_with_prior"], meta["image_size"])
