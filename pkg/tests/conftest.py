import os

# small matrices: BLAS thread fan-out costs more than it saves, and single
# threaded runs are what the timing bounds assume
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

try:
    from threadpoolctl import threadpool_limits
    threadpool_limits(1)
except ImportError:
    pass

from tvlp.data import generate_corpus
from tvlp.image_encoder import EncoderConfig
from tvlp.model import ModelConfig, PretrainModel
from tvlp.text_encoder import build_vocabulary


def tiny_model_config(**overrides):
    """Small-but-real model: 16x16 images, 4x4 grid, narrow widths."""
    image = EncoderConfig(image_size=16, grid_size=4, dim=16, n_layers=2, n_heads=2,
                          use_temporal_encodings=overrides.pop("use_temporal_encodings", True),
                          use_decomposition=overrides.pop("use_decomposition", True))
    return ModelConfig(image=image, text_dim=16, text_heads=2, text_layers=2,
                       max_text_len=48, joint_dim=8, projection_hidden=16, **overrides)


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


@pytest.fixture(scope="session")
def tiny_model(vocab):
    return PretrainModel(vocab, tiny_model_config(), seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(seed=3, n_studies=60, fraction_with_prior=0.6, image_size=16)


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(seed=7, n_studies=40, fraction_with_prior=0.68, image_size=64)


def random_studies(corpus, n, with_prior=None):
    studies = corpus.all_studies()
    if with_prior is not None:
        studies = [s for s in studies if s.has_prior == with_prior]
    return studies[:n]


class EndToEndRun:
    """Artifacts of the full synthetic pipeline shared across trained-model tests."""

    def __init__(self):
        import time
        from tvlp.downstream import DecoderFinetuneConfig, finetune_decoder
        from tvlp.model import PretrainModel
        from tvlp.training import TrainConfig, train

        start = time.time()
        self.vocab = build_vocabulary()
        self.corpus = generate_corpus(
            seed=1, n_studies=2400, fraction_with_prior=0.68, image_size=64,
            split_fractions=(2000 / 2400, 200 / 2400, 200 / 2400))
        self.model = PretrainModel(self.vocab, seed=0)
        self.train_result = train(self.model, self.corpus, TrainConfig(
            batch_size=32, epochs=30, base_lr=6e-4, augment=True,
            rotation_deg=10.0, shear_deg=5.0, brightness=0.05, contrast=0.05,
            seed=0))
        self.decoder = finetune_decoder(
            self.model, self.corpus, DecoderFinetuneConfig(epochs=12, seed=0))
        self.decoder_no_prior = finetune_decoder(
            self.model, self.corpus,
            DecoderFinetuneConfig(epochs=12, seed=0, use_prior_image=False,
                                  use_prior_report=False))
        self.elapsed = time.time() - start


@pytest.fixture(scope="session")
def e2e():
    return EndToEndRun()
