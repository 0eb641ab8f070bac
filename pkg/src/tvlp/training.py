"""Pre-training loop: homogeneous batch sampler, AdamW, warmup schedule.

Batches are drawn without replacement separately from the single-image and
multi-image subsets and never mixed, with batch tags interleaved in
proportion to remaining coverage. The same affine/intensity augmentation
is applied to both images of a study.
"""

import dataclasses
import json
import math

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError


class TrainingDiverged(RuntimeError):
    pass


@dataclasses.dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    base_lr: float = 3e-4          # toy default; see paper_preset for the reference values
    warmup_fraction: float = 0.03
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    rotation_deg: float = 30.0
    shear_deg: float = 15.0
    brightness: float = 0.1
    contrast: float = 0.1
    loss_weights: dict | None = None

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for contrastive batches")

    @classmethod
    def paper_preset(cls, **overrides):
        """Reference hyper-parameters (assume pretrained init and large batches)."""
        return cls(base_lr=2e-5, batch_size=240, epochs=50, **overrides)


# -- sampler ----------------------------------------------------------------


def plan_epoch(singles, multis, batch_size, rng):
    """Homogeneous batch plan covering both subsets exactly once.

    Returns a list of ("SINGLE" | "MULTI", [studies]) pairs. Tags are
    interleaved by drawing proportionally to the remaining batch counts, so
    the mixture tracks dataset coverage; the final batch of a subset may be
    short but never mixed.
    """

    def batches(items):
        items = list(items)
        rng.shuffle(items)
        return [items[i:i + batch_size] for i in range(0, len(items), batch_size)]

    queues = {"SINGLE": batches(singles), "MULTI": batches(multis)}
    plan = []
    while queues["SINGLE"] or queues["MULTI"]:
        n_s, n_m = len(queues["SINGLE"]), len(queues["MULTI"])
        tag = "SINGLE" if rng.random() < n_s / (n_s + n_m) else "MULTI"
        plan.append((tag, queues[tag].pop(0)))
    return plan


# -- augmentation -------------------------------------------------------------


def affine_warp(image, angle_rad, shear_rad):
    """Rotate+shear about the image center with bilinear sampling, zero fill."""
    if angle_rad == 0.0 and shear_rad == 0.0:
        return image.copy()
    n = image.shape[0]
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    fwd = np.array([[c, -s], [s, c]]) @ np.array([[1.0, math.tan(shear_rad)], [0.0, 1.0]])
    inv = np.linalg.inv(fwd)
    half = (n - 1) / 2.0
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    src_x = inv[0, 0] * (xs - half) + inv[0, 1] * (ys - half) + half
    src_y = inv[1, 0] * (xs - half) + inv[1, 1] * (ys - half) + half
    x0 = np.floor(src_x).astype(int)
    y0 = np.floor(src_y).astype(int)
    fx, fy = src_x - x0, src_y - y0
    out = np.zeros_like(image)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < n) & (yi >= 0) & (yi < n)
            weight = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            out[valid] += weight[valid] * image[yi[valid], xi[valid]]
    return out


def transform_bbox(bbox, angle_rad, shear_rad, n):
    """Axis-aligned hull of a pixel bbox under the same forward transform."""
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    fwd = np.array([[c, -s], [s, c]]) @ np.array([[1.0, math.tan(shear_rad)], [0.0, 1.0]])
    half = (n - 1) / 2.0
    x0, y0, x1, y1 = bbox
    corners = np.array([[x0, y0], [x1 - 1, y0], [x0, y1 - 1], [x1 - 1, y1 - 1]], dtype=float)
    moved = (corners - half) @ fwd.T + half
    gx0 = max(0, math.floor(moved[:, 0].min()))
    gy0 = max(0, math.floor(moved[:, 1].min()))
    gx1 = min(n, math.ceil(moved[:, 0].max()) + 1)
    gy1 = min(n, math.ceil(moved[:, 1].max()) + 1)
    return (gx0, gy0, gx1, gy1)


def augment_pair(current, prior, rng, config):
    """One sampled transform applied identically to both images of a study."""
    angle = math.radians(rng.uniform(-config.rotation_deg, config.rotation_deg))
    shear = math.radians(rng.uniform(-config.shear_deg, config.shear_deg))
    brightness = rng.uniform(-config.brightness, config.brightness)
    contrast = rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)

    def apply(img):
        out = affine_warp(img, angle, shear)
        if brightness != 0.0 or contrast != 1.0:
            out = np.clip(contrast * (out - 0.5) + 0.5 + brightness, 0.0, 1.0)
        return out

    params = {"angle": angle, "shear": shear, "brightness": brightness,
              "contrast": contrast}
    return apply(current), (apply(prior) if prior is not None else None), params


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Adaptive moments with decoupled weight decay; exempt params skip decay."""

    def __init__(self, params, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if not getattr(p, "decay_exempt", False) and self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def learning_rate(step, total_steps, base_lr, warmup_fraction):
    """Linear warmup to base_lr, then linear decay to zero at the last step."""
    warmup = max(1, math.ceil(warmup_fraction * total_steps))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    return base_lr * (total_steps - step) / max(1, total_steps - warmup)


# -- loop ---------------------------------------------------------------------


@dataclasses.dataclass
class TrainResult:
    log: list
    val_losses: list
    best_epoch: int
    best_state: dict          # parameter name -> array at the best epoch
    total_steps: int


def _augmented_batch(batch, rng, config):
    out = []
    for study in batch:
        cur, pri, _ = augment_pair(study.current_image, study.prior_image, rng, config)
        out.append(dataclasses.replace(study, current_image=cur, prior_image=pri))
    return out


def evaluate_loss(model, studies, batch_size, seed=1234):
    """Mean total loss over a study list with deterministic masking."""
    rng = np.random.default_rng(seed)
    singles = [s for s in studies if not s.has_prior]
    multis = [s for s in studies if s.has_prior]
    total, count = 0.0, 0
    with T.no_grad():
        for subset in (singles, multis):
            for i in range(0, len(subset), batch_size):
                batch = subset[i:i + batch_size]
                if len(batch) < 2:
                    continue
                losses = model.forward_batch(batch, rng)
                total += losses.total.item() * len(batch)
                count += len(batch)
    return total / max(count, 1)


def train(model, corpus, config, log_path=None):
    """Pre-train on the corpus; the best-validation state is restored and returned."""
    rng = np.random.default_rng(config.seed)
    singles = [s for s in corpus.train if not s.has_prior]
    multis = [s for s in corpus.train if s.has_prior]
    batches_per_epoch = (math.ceil(len(singles) / config.batch_size) if singles else 0) \
        + (math.ceil(len(multis) / config.batch_size) if multis else 0)
    total_steps = config.epochs * batches_per_epoch

    optimizer = AdamW(model.parameters(), weight_decay=config.weight_decay,
                      betas=config.betas, eps=config.adam_eps)
    names = [name for name, _ in model.named_parameters()]
    effective_weights = dict(model.config.loss_weights)
    if config.loss_weights:
        effective_weights.update(config.loss_weights)
    log, val_losses = [], []
    best = (float("inf"), -1, None)
    log_file = open(log_path, "w") if log_path else None
    header = {"loss_weights": effective_weights, "base_lr": config.base_lr,
              "total_steps": total_steps}
    if log_file:
        log_file.write(json.dumps(header, sort_keys=True) + "\n")
    step = 0
    try:
        for epoch in range(config.epochs):
            for tag, batch in plan_epoch(singles, multis, config.batch_size, rng):
                if len(batch) < 2:
                    continue  # contrastive losses need at least two samples
                if config.augment:
                    batch = _augmented_batch(batch, rng, config)
                lr = learning_rate(step, total_steps, config.base_lr, config.warmup_fraction)
                try:
                    losses = model.forward_batch(batch, rng, config.loss_weights)
                    optimizer.zero_grad()
                    T.backward(losses.total)
                except NonFiniteError as err:
                    raise TrainingDiverged(
                        f"non-finite loss at step {step} (epoch {epoch}): {err}") from err
                optimizer.step(lr)
                entry = {"step": step, "epoch": epoch, "tag": tag, "lr": lr}
                entry.update(losses.scalars())
                log.append(entry)
                if log_file:
                    log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                step += 1
            val = evaluate_loss(model, corpus.val, config.batch_size,
                                seed=config.seed + 7919)
            val_losses.append(val)
            if log_file:
                log_file.write(json.dumps({"epoch": epoch, "val_loss": val},
                                          sort_keys=True) + "\n")
            if val < best[0]:
                state = {name: p.data.copy() for name, p in model.named_parameters()}
                best = (val, epoch, state)
    finally:
        if log_file:
            log_file.close()

    if best[2] is not None:
        params = dict(model.named_parameters())
        for name in names:
            params[name].data = best[2][name].copy()
    return TrainResult(log, val_losses, best[1], best[2] or {}, step)
