"""Closed-vocabulary tokenizer and a small bidirectional text transformer.

The encoder is conditioned by the first token: one reserved id marks the
contrastive pass (its output feature is the global text vector), another
marks the masked-prediction pass, which may additionally cross-attend to
projected image patch features.
"""

import dataclasses
import json

import numpy as np

from . import nn
from . import tensor as T

PAD, CLS, MLM, MASK, SEP, EOS = "[PAD]", "[CLS]", "[MLM]", "[MASK]", "[SEP]", "[EOS]"
SPECIAL_TOKENS = (PAD, CLS, MLM, MASK, SEP, EOS)


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Bidirectional token/id map; special tokens occupy the lowest ids."""

    def __init__(self, words):
        self._tokens = list(SPECIAL_TOKENS)
        seen = set(self._tokens)
        for w in words:
            if w in seen:
                raise VocabularyError(f"duplicate word '{w}'")
            seen.add(w)
            self._tokens.append(w)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token '{token}'") from None

    def token(self, idx):
        return self._tokens[idx]

    @property
    def pad_id(self):
        return self._ids[PAD]

    @property
    def cls_id(self):
        return self._ids[CLS]

    @property
    def mlm_id(self):
        return self._ids[MLM]

    @property
    def mask_id(self):
        return self._ids[MASK]

    @property
    def sep_id(self):
        return self._ids[SEP]

    @property
    def eos_id(self):
        return self._ids[EOS]

    def is_special(self, idx):
        return idx < len(SPECIAL_TOKENS)

    def tokenize(self, text):
        """Whitespace tokenization over the closed vocabulary."""
        return [self.id(w) for w in text.split()]

    def detokenize(self, ids):
        return " ".join(self._tokens[i] for i in ids)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self._ids, fh, sort_keys=True, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            ids = json.load(fh)
        ordered = sorted(ids, key=ids.get)
        if tuple(ordered[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError(f"{path}: special tokens missing or out of order")
        return cls(ordered[len(SPECIAL_TOKENS):])


def build_vocabulary():
    """Vocabulary over the full closed word list of the synthetic corpus."""
    from .keywords import corpus_words
    return Vocabulary(corpus_words())


def mask_tokens(ids, p, rng, vocab):
    """Independently replace non-special positions with [MASK] at rate p.

    If p > 0 and the draw selects nothing, one eligible position is forced
    so the masked-prediction loss is never vacuous.
    """
    ids = list(ids)
    eligible = [i for i, t in enumerate(ids) if not vocab.is_special(t)]
    positions = [i for i in eligible if p > 0 and rng.random() < p]
    if not positions and p > 0 and eligible:
        positions = [eligible[int(rng.integers(len(eligible)))]]
    masked = list(ids)
    for i in positions:
        masked[i] = vocab.mask_id
    return masked, positions


@dataclasses.dataclass
class TextEncoding:
    token_features: object   # Tensor (B, M, D); position 0 is the mode token
    summary: object          # Tensor (B, D) feature at the mode token
    ids: np.ndarray          # (B, M) padded input ids as encoded
    lengths: list
    input_features: object = None  # Tensor (B, M, D): embeddings before any mixing


class TextEncoder(nn.Module):
    def __init__(self, vocab, dim=64, n_heads=4, n_layers=2, max_len=64,
                 cross_dim=None, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        self.token_embedding = nn.Embedding(len(vocab), dim, rng)
        self.position_embedding = nn.Embedding(max_len, dim, rng)
        self.layers = nn.ModuleList([
            nn.TransformerLayer(dim, n_heads, 4 * dim, rng, cross_dim=cross_dim)
            for _ in range(n_layers)
        ])

    def pad_batch(self, sequences, prefix_id=None):
        """Left-align sequences into an id matrix; returns (ids, lengths)."""
        seqs = [([prefix_id] if prefix_id is not None else []) + list(s) for s in sequences]
        lengths = [len(s) for s in seqs]
        width = max(lengths)
        if width > self.max_len:
            raise VocabularyError(f"sequence length {width} exceeds max_len {self.max_len}")
        ids = np.full((len(seqs), width), self.vocab.pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
        return ids, lengths

    def __call__(self, sequences, mode="CLS", image_context=None):
        """Encode token-id sequences; image_context is a Tensor (B, L, D_ctx).

        mode "CLS" is the contrastive pass and never sees image context;
        mode "MLM" may cross-attend to it in every layer.
        """
        if mode not in ("CLS", "MLM"):
            raise VocabularyError(f"unknown encoding mode '{mode}'")
        if mode == "CLS" and image_context is not None:
            raise VocabularyError("contrastive mode does not take image context")
        prefix = self.vocab.cls_id if mode == "CLS" else self.vocab.mlm_id
        ids, lengths = self.pad_batch(sequences, prefix_id=prefix)
        b, m = ids.shape
        h = T.add(self.token_embedding(ids),
                  self.position_embedding.weight[np.arange(m)])
        input_features = h
        mask = nn.padding_mask(lengths, m)
        for layer in self.layers:
            h = layer(h, self_mask=mask, context=image_context)
        summary = h[:, 0, :]
        return TextEncoding(h, summary, ids, lengths, input_features)
