"""Joint-space projections, similarity kernels, and contrastive losses."""

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


class ObjectiveError(ValueError):
    pass


class ProjectionHead(nn.Module):
    """Two-layer perceptron mapping encoder features into the joint space."""

    def __init__(self, in_dim, hidden_dim, out_dim, rng):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim, rng)
        self.fc2 = nn.Linear(hidden_dim, out_dim, rng)

    def __call__(self, x):
        return self.fc2(T.relu(self.fc1(x)))


def pooled_image_embedding(v_proj):
    """Mean patch projection per sample, unit-normalized: (B, L, D) -> (B, D)."""
    return T.l2_normalize(T.mean(v_proj, axis=1), axis=-1)


def global_similarity(image_embedding, text_embedding):
    """Cosine of unit vectors; accepts (D,) pairs or (B, D) stacks."""
    prod = T.mul(image_embedding, text_embedding)
    return T.sum_(prod, axis=-1)


def local_similarity(token_proj, v_proj, attn_temperature=0.1):
    """Attention-weighted token-to-patch cosine agreement, averaged over tokens.

    For each text token, patches are softmax-weighted by cosine match at
    ``attn_temperature``, aggregated, and compared back to the token.
    token_proj: (M, D); v_proj: (L, D); returns a scalar Tensor.
    """
    tok = T.l2_normalize(token_proj, axis=-1)
    patch = T.l2_normalize(v_proj, axis=-1)
    cos = T.matmul(tok, T.transpose(patch, (1, 0)))
    weights = T.softmax(T.mul(cos, 1.0 / attn_temperature), axis=-1)
    agg = T.l2_normalize(T.matmul(weights, v_proj), axis=-1)
    return T.mean(T.sum_(T.mul(tok, agg), axis=-1))


def local_similarity_matrix(token_proj, token_counts, v_proj, attn_temperature=0.1):
    """All-pairs local similarities for a batch: rows = texts, cols = images.

    token_proj: (B, M, D) padded token projections; token_counts gives how
    many leading rows of each sample are real (non-special) tokens.
    """
    b, m, d = token_proj.shape
    l = v_proj.shape[1]
    tok_flat = T.reshape(token_proj, (b * m, d))
    tok_norm = T.l2_normalize(tok_flat, axis=-1)
    include = np.zeros((b, m), dtype=bool)
    for i, count in enumerate(token_counts):
        include[i, :count] = True
    weights_rows = include.reshape(b * m, 1) / np.maximum(
        np.asarray(token_counts, dtype=float), 1.0).repeat(m)[:, None]

    columns = []
    for j in range(b):
        patches = v_proj[j]
        patch_norm = T.l2_normalize(patches, axis=-1)
        cos = T.matmul(tok_norm, T.transpose(patch_norm, (1, 0)))
        attn = T.softmax(T.mul(cos, 1.0 / attn_temperature), axis=-1)
        agg = T.l2_normalize(T.matmul(attn, patches), axis=-1)
        per_token = T.sum_(T.mul(tok_norm, agg), axis=-1, keepdims=True)
        weighted = T.mul(per_token, Tensor(weights_rows))
        col = T.sum_(T.reshape(weighted, (b, m)), axis=1, keepdims=True)
        columns.append(col)
    return T.concatenate(columns, axis=1)


def info_nce(similarity_matrix, temperature):
    """Symmetric contrastive loss over a square cross-modal similarity matrix.

    Matched pairs sit on the diagonal; the loss averages row-wise and
    column-wise cross-entropy of similarities scaled by 1/temperature.
    """
    n = similarity_matrix.shape[0]
    if similarity_matrix.shape != (n, n) or n < 2:
        raise ObjectiveError(f"need a square matrix with N >= 2, got {similarity_matrix.shape}")
    if temperature <= 0:
        raise ObjectiveError("temperature must be positive")
    logits = T.mul(similarity_matrix, 1.0 / temperature)
    labels = np.arange(n)
    forward = T.cross_entropy(logits, labels)
    backward_ = T.cross_entropy(T.transpose(logits, (1, 0)), labels)
    return T.mul(T.add(forward, backward_), 0.5)
