"""The joint pre-training model: encoders, projections, and the total loss."""

import dataclasses

import numpy as np

from . import nn
from . import objectives as obj
from . import tensor as T
from .image_encoder import EncoderConfig, ImageEncoder
from .text_encoder import TextEncoder, mask_tokens


@dataclasses.dataclass
class ModelConfig:
    image: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    text_dim: int = 64
    text_heads: int = 4
    text_layers: int = 2
    max_text_len: int = 64
    joint_dim: int = 32
    projection_hidden: int = 64
    nce_temperature: float = 0.07
    local_attn_temperature: float = 0.1
    mask_probability: float = 0.45
    loss_weights: dict = dataclasses.field(
        default_factory=lambda: {"global": 1.0, "local": 0.5, "mlm": 1.0})


@dataclasses.dataclass
class BatchLosses:
    total: object
    global_contrastive: object
    local_contrastive: object
    mlm: object

    def scalars(self):
        return {
            "total": self.total.item(),
            "global": self.global_contrastive.item(),
            "local": self.local_contrastive.item(),
            "mlm": self.mlm.item(),
        }


class PretrainModel(nn.Module):
    def __init__(self, vocab, config=None, seed=0):
        super().__init__()
        self.config = config or ModelConfig()
        self.vocab = vocab
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.image_encoder = ImageEncoder(cfg.image, rng)
        self.text_encoder = TextEncoder(vocab, dim=cfg.text_dim, n_heads=cfg.text_heads,
                                        n_layers=cfg.text_layers, max_len=cfg.max_text_len,
                                        cross_dim=cfg.joint_dim, rng=rng)
        self.project_image = obj.ProjectionHead(2 * cfg.image.dim, cfg.projection_hidden,
                                                cfg.joint_dim, rng)
        self.project_text = obj.ProjectionHead(cfg.text_dim, cfg.projection_hidden,
                                               cfg.joint_dim, rng)
        # vocabulary head starts near-uniform so the masked loss opens at ln|V|
        self.mlm_head = nn.Linear(cfg.text_dim, len(vocab), rng,
                                  init_scale=nn.EMBED_INIT_SCALE)

    # -- encoding helpers ---------------------------------------------------

    def encode_images(self, current, prior=None, capture_attention=False):
        """current/prior: numpy (B, H, W); returns the decomposed representation."""
        cur = T.Tensor(np.asarray(current))
        pri = T.Tensor(np.asarray(prior)) if prior is not None else None
        return self.image_encoder.decompose(cur, pri, capture_attention=capture_attention)

    def project_patches(self, decomposed):
        return self.project_image(decomposed.v)

    def embed_studies(self, studies, use_prior=True, capture_attention=False):
        """Patch projections and pooled image embedding for a study batch.

        The batch must be homogeneous in prior availability when use_prior
        is set (the sampler guarantees this during training).
        """
        current = np.stack([s.current_image for s in studies])
        prior = None
        if use_prior and all(s.has_prior for s in studies):
            prior = np.stack([s.prior_image for s in studies])
        decomposed = self.encode_images(current, prior, capture_attention)
        v_proj = self.project_patches(decomposed)
        return decomposed, v_proj, obj.pooled_image_embedding(v_proj)

    def embed_texts(self, texts):
        """Contrastive-mode text embeddings: (encoding, r_proj, token_proj, counts)."""
        sequences = [self.vocab.tokenize(t) for t in texts]
        enc = self.text_encoder(sequences, mode="CLS")
        r_proj = T.l2_normalize(self.project_text(enc.summary), axis=-1)
        # the local objective consumes pre-mixing token features (embedding +
        # position): contextual features are free to collapse onto the
        # sentence summary, which would reduce token-patch alignment to the
        # global objective and starve patch-level structure
        token_proj = self.project_text(enc.input_features[:, 1:, :])
        counts = [len(s) for s in sequences]
        return enc, r_proj, token_proj, counts

    # -- losses ---------------------------------------------------------------

    def mlm_loss(self, sequences, mask_positions, v_proj):
        """Image-guided masked-token cross-entropy over the masked positions.

        ``sequences`` are already-masked id lists; ``mask_positions`` holds
        (sample_index, position, original_id) triples indexed into the raw
        sequences (before the mode prefix is added).
        """
        if not mask_positions:
            raise obj.ObjectiveError("masked-token loss needs at least one masked position")
        enc = self.text_encoder(sequences, mode="MLM", image_context=v_proj)
        logits = self.mlm_head(enc.token_features)
        b, m = enc.ids.shape
        targets = np.full((b, m), -1, dtype=np.int64)
        for sample, pos, original in mask_positions:
            targets[sample, pos + 1] = original  # +1 for the mode prefix
        flat = T.reshape(logits, (b * m, len(self.vocab)))
        return T.cross_entropy(flat, targets.reshape(-1), ignore_index=-1)

    def forward_batch(self, studies, rng, loss_weights=None):
        """All three pre-training losses on a homogeneous study batch."""
        cfg = self.config
        weights = dict(cfg.loss_weights)
        if loss_weights:
            weights.update(loss_weights)
        _, v_proj, v_bar = self.embed_studies(studies)
        _, r_proj, token_proj, counts = self.embed_texts([s.report for s in studies])

        sim_global = T.matmul(v_bar, T.transpose(r_proj, (1, 0)))
        loss_global = obj.info_nce(sim_global, cfg.nce_temperature)

        sim_local = obj.local_similarity_matrix(token_proj, counts, v_proj,
                                                cfg.local_attn_temperature)
        loss_local = obj.info_nce(T.transpose(sim_local, (1, 0)), cfg.nce_temperature)

        masked_batch, positions = [], []
        for i, study in enumerate(studies):
            ids = self.vocab.tokenize(study.report)
            masked, pos = mask_tokens(ids, cfg.mask_probability, rng, self.vocab)
            masked_batch.append(masked)
            positions.extend((i, p, ids[p]) for p in pos)
        loss_mlm = self.mlm_loss(masked_batch, positions, v_proj)

        total = T.add(T.add(T.mul(loss_global, weights["global"]),
                            T.mul(loss_local, weights["local"])),
                      T.mul(loss_mlm, weights["mlm"]))
        return BatchLosses(total, loss_global, loss_local, loss_mlm)
