"""Adapters of the pre-trained model: grounding, decoding, probes, retrieval."""

import dataclasses

import numpy as np

from . import nn
from . import objectives as obj
from . import tensor as T
from .keywords import PROGRESSION_CLASSES, VERBALIZER_TOKENS
from .tensor import Tensor


class DownstreamError(ValueError):
    pass


class UndefinedPosteriorError(ValueError):
    """Every verbalizer class received zero probability mass."""


# -- text prompt embeddings --------------------------------------------------


def marginalized_prompt_embedding(model, phrases):
    """Joint-space embedding of one or more phrases.

    Per-phrase projections are averaged before the final unit-normalization,
    so duplicated phrases change nothing.
    """
    if not phrases:
        raise DownstreamError("need at least one phrase")
    with T.no_grad():
        sequences = [model.vocab.tokenize(p) for p in phrases]
        enc = model.text_encoder(sequences, mode="CLS")
        projected = model.project_text(enc.summary)
        mean = projected.data.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise DownstreamError("prompt embedding collapsed to zero")
    return mean / norm


def sentence_embedding(model, text):
    """Raw conditioning-token feature of a sentence (pre-projection)."""
    with T.no_grad():
        enc = model.text_encoder([model.vocab.tokenize(text)], mode="CLS")
    return enc.summary.data[0].copy()


def study_image_embeddings(model, studies, use_prior=True):
    """Pooled joint-space image embeddings (N, D) for a list of studies."""
    out = []
    with T.no_grad():
        for study in studies:
            prior = study.prior_image if (use_prior and study.has_prior) else None
            dec = model.encode_images(study.current_image[None],
                                      None if prior is None else prior[None])
            v_bar = obj.pooled_image_embedding(model.project_patches(dec))
            out.append(v_bar.data[0].copy())
    return np.stack(out)


# -- phrase grounding ---------------------------------------------------------


@dataclasses.dataclass
class GroundingResult:
    similarity_map: np.ndarray     # (grid, grid) cosine scores in [-1, 1]
    phrases: list


def ground_phrase(model, current_image, prior_image=None, phrases=()):
    """Cosine map between the marginalized phrase embedding and each patch."""
    phrases = list(phrases)
    text_emb = marginalized_prompt_embedding(model, phrases)
    g = model.config.image.grid_size
    with T.no_grad():
        dec = model.encode_images(current_image[None],
                                  None if prior_image is None else prior_image[None])
        v_proj = model.project_patches(dec).data[0]
    norms = np.linalg.norm(v_proj, axis=-1, keepdims=True)
    cells = (v_proj / norms) @ text_emb
    return GroundingResult(cells.reshape(g, g), phrases)


# -- report decoder -----------------------------------------------------------


class ReportDecoder(nn.Module):
    """Causal transformer over report tokens with patch cross-attention."""

    def __init__(self, vocab, dim, n_heads, n_layers, max_len, cross_dim, rng):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_len = max_len
        self.token_embedding = nn.Embedding(len(vocab), dim, rng)
        self.position_embedding = nn.Embedding(max_len, dim, rng)
        self.layers = nn.ModuleList([
            nn.TransformerLayer(dim, n_heads, 4 * dim, rng, cross_dim=cross_dim)
            for _ in range(n_layers)
        ])
        self.head = nn.Linear(dim, len(vocab), rng)

    @classmethod
    def from_pretrained(cls, model, rng=None):
        """Initialize from the pre-trained text weights; cross-attention stays fresh."""
        cfg = model.config
        rng = rng if rng is not None else np.random.default_rng(0)
        decoder = cls(model.vocab, cfg.text_dim, cfg.text_heads, cfg.text_layers,
                      cfg.max_text_len, cfg.joint_dim, rng)
        source = dict(model.text_encoder.named_parameters())
        for name, param in decoder.named_parameters():
            if name.startswith("head."):
                src = dict(model.mlm_head.named_parameters())[name[len("head."):]]
                param.data = src.data.copy()
            elif name in source and "cross" not in name:
                param.data = source[name].data.copy()
        return decoder

    def __call__(self, sequences, context, prefix_lengths=None):
        """Next-token logits for padded sequences under a causal mask.

        ``prefix_lengths`` marks per-sample leading positions (prior-report
        prompt) whose embeddings are gradient-stopped: the loss on current
        tokens must not train embedding rows that only the prompt uses.
        """
        lengths = [len(s) for s in sequences]
        width = max(lengths)
        if width > self.max_len:
            raise DownstreamError(f"decoder input of {width} exceeds max_len {self.max_len}")
        ids = np.full((len(sequences), width), self.vocab.pad_id, dtype=np.int64)
        for i, s in enumerate(sequences):
            ids[i, : len(s)] = s
        h = T.add(self.token_embedding(ids),
                  self.position_embedding.weight[np.arange(width)])
        if prefix_lengths is not None:
            keep = np.ones((len(sequences), width, self.dim))
            for i, n in enumerate(prefix_lengths):
                keep[i, :n, :] = 0.0
            frozen = Tensor(h.data * (1.0 - keep))
            h = T.add(T.mul(h, Tensor(keep)), frozen)
        mask = nn.causal_mask(width) + nn.padding_mask(lengths, width)
        for layer in self.layers:
            h = layer(h, self_mask=mask, context=context)
        return self.head(h), ids, lengths


def decoder_inputs(vocab, report, prior_report=None, use_prior_report=True, use_sep=True):
    """(prefix_ids, current_ids) for fine-tuning or prompting the decoder.

    The separator doubles as the start token, so it is always present when
    there is no prompt even under the no-separator ablation.
    """
    prefix = []
    if use_prior_report and prior_report:
        prefix = vocab.tokenize(prior_report)
        if use_sep:
            prefix.append(vocab.sep_id)
    else:
        prefix = [vocab.sep_id]
    current = vocab.tokenize(report) + [vocab.eos_id] if report is not None else []
    return prefix, current


@dataclasses.dataclass
class DecoderFinetuneConfig:
    epochs: int = 12
    lr: float = 3e-4
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0
    use_prior_image: bool = True
    use_prior_report: bool = True
    use_sep: bool = True
    prior_report_dropout: float = 0.0   # per-study chance of hiding the prompt


def _decoding_contexts(model, studies, use_prior_image):
    contexts = []
    with T.no_grad():
        for study in studies:
            prior = study.prior_image if (use_prior_image and study.has_prior) else None
            dec = model.encode_images(study.current_image[None],
                                      None if prior is None else prior[None])
            contexts.append(model.project_patches(dec).data[0])
    return contexts


def _decoder_batch_loss(decoder, batch_seqs, batch_ctx, prefix_lengths):
    logits, ids, _ = decoder(batch_seqs, Tensor(np.stack(batch_ctx)),
                             prefix_lengths=prefix_lengths)
    b, m = ids.shape
    targets = np.full((b, m), -1, dtype=np.int64)
    for i, seq in enumerate(batch_seqs):
        start = prefix_lengths[i]
        for p in range(start - 1, len(seq) - 1):
            targets[i, p] = seq[p + 1]
    flat = T.reshape(logits, (b * m, logits.shape[-1]))
    return T.cross_entropy(flat, targets.reshape(-1), ignore_index=-1)


def finetune_decoder(model, corpus, config=None):
    """Train a report decoder on frozen image features; best-val state kept."""
    from .training import AdamW  # local import to avoid a module cycle

    config = config or DecoderFinetuneConfig()
    rng = np.random.default_rng(config.seed)
    decoder = ReportDecoder.from_pretrained(model, rng)
    vocab = model.vocab

    def prepare(studies, dropout_rng=None):
        contexts = _decoding_contexts(model, studies, config.use_prior_image)
        entries = []
        for study, ctx in zip(studies, contexts):
            use_prompt = config.use_prior_report
            if use_prompt and dropout_rng is not None and config.prior_report_dropout > 0:
                use_prompt = dropout_rng.random() >= config.prior_report_dropout
            prefix, current = decoder_inputs(vocab, study.report, study.prior_report,
                                             use_prompt, config.use_sep)
            entries.append((prefix + current, ctx, len(prefix)))
        return entries

    val_entries = prepare(corpus.val)
    optimizer = AdamW(decoder.parameters(), weight_decay=config.weight_decay)
    best = (float("inf"), None)
    train_contexts = _decoding_contexts(model, corpus.train, config.use_prior_image)
    order = np.arange(len(corpus.train))
    for _ in range(config.epochs):
        rng.shuffle(order)
        for i in range(0, len(order), config.batch_size):
            chunk = order[i:i + config.batch_size]
            seqs, ctxs, prefixes = [], [], []
            for j in chunk:
                study = corpus.train[j]
                use_prompt = config.use_prior_report
                if use_prompt and config.prior_report_dropout > 0:
                    use_prompt = rng.random() >= config.prior_report_dropout
                prefix, current = decoder_inputs(vocab, study.report, study.prior_report,
                                                 use_prompt, config.use_sep)
                seqs.append(prefix + current)
                ctxs.append(train_contexts[j])
                prefixes.append(len(prefix))
            loss = _decoder_batch_loss(decoder, seqs, ctxs, prefixes)
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step(config.lr)
        with T.no_grad():
            val = 0.0
            for i in range(0, len(val_entries), config.batch_size):
                chunk = val_entries[i:i + config.batch_size]
                val += _decoder_batch_loss(decoder, [e[0] for e in chunk],
                                           [e[1] for e in chunk],
                                           [e[2] for e in chunk]).item() * len(chunk)
            val /= max(len(val_entries), 1)
        if val < best[0]:
            best = (val, {n: p.data.copy() for n, p in decoder.named_parameters()})
    if best[1] is not None:
        for name, p in decoder.named_parameters():
            p.data = best[1][name].copy()
    return decoder


_GENERATION_BANNED = ("[PAD]", "[CLS]", "[MLM]", "[MASK]", "[SEP]")


def generate_report(decoder, model, current_image, prior_image=None, prior_report=None,
                    max_len=24, mode="greedy", rng=None, use_prior_image=True,
                    use_prior_report=True, use_sep=True):
    """Decode a report conditioned on images and the optional previous report."""
    if max_len < 1:
        raise DownstreamError("max_len must be at least 1")
    if mode not in ("greedy", "sampled"):
        raise DownstreamError(f"unknown decoding mode '{mode}'")
    vocab = model.vocab
    with T.no_grad():
        prior = prior_image if use_prior_image else None
        dec = model.encode_images(current_image[None],
                                  None if prior is None else prior[None])
        context = Tensor(model.project_patches(dec).data)
    prefix, _ = decoder_inputs(vocab, None, prior_report, use_prior_report, use_sep)
    ids = list(prefix)
    banned = [vocab.id(tok) for tok in _GENERATION_BANNED]
    generated = []
    for _ in range(max_len):
        with T.no_grad():
            logits, _, _ = decoder([ids], context)
        row = logits.data[0, len(ids) - 1].copy()
        row[banned] = -np.inf
        if mode == "greedy":
            nxt = int(np.argmax(row))
        else:
            probs = np.exp(row - row.max())
            probs /= probs.sum()
            nxt = int((rng or np.random.default_rng(0)).choice(len(probs), p=probs))
        if nxt == vocab.eos_id:
            break
        generated.append(nxt)
        ids.append(nxt)
        if len(ids) >= decoder.max_len:
            break
    return vocab.detokenize(generated)


# -- zero-shot temporal classification ----------------------------------------


@dataclasses.dataclass
class Verbalizer:
    """Class-to-token-list mapping used to pool next-token probabilities."""

    mapping: dict

    def __post_init__(self):
        seen = {}
        for cls, toks in self.mapping.items():
            for t in toks:
                if t in seen:
                    raise DownstreamError(f"token '{t}' in both {seen[t]} and {cls}")
                seen[t] = cls

    @classmethod
    def default(cls):
        return cls({k: tuple(v) for k, v in VERBALIZER_TOKENS.items()})

    def validate_vocabulary(self, vocab):
        for toks in self.mapping.values():
            for t in toks:
                if t not in vocab:
                    raise DownstreamError(f"verbalizer token '{t}' missing from vocabulary")


def class_posterior_from_next_token(probs, verbalizer, vocab):
    """Pool next-token probabilities into the three progression classes."""
    masses = {}
    for cls in PROGRESSION_CLASSES:
        toks = verbalizer.mapping[cls]
        masses[cls] = float(sum(probs[vocab.id(t)] for t in toks))
    total = sum(masses.values())
    if total == 0.0:
        raise UndefinedPosteriorError("all verbalizer classes have zero mass")
    return {cls: m / total for cls, m in masses.items()}


def zero_shot_temporal_classify(decoder, model, current_image, prior_image,
                                finding_name, verbalizer=None):
    """Posterior over progression classes from the prompt '<finding> is'."""
    vocab = model.vocab
    verbalizer = verbalizer or Verbalizer.default()
    verbalizer.validate_vocabulary(vocab)
    if finding_name not in vocab:
        raise DownstreamError(f"finding '{finding_name}' not in vocabulary")
    with T.no_grad():
        dec = model.encode_images(current_image[None],
                                  None if prior_image is None else prior_image[None])
        context = Tensor(model.project_patches(dec).data)
        prompt = [vocab.sep_id, vocab.id(finding_name), vocab.id("is")]
        logits, _, _ = decoder([prompt], context)
    row = logits.data[0, len(prompt) - 1]
    probs = np.exp(row - row.max())
    probs /= probs.sum()
    return class_posterior_from_next_token(probs, verbalizer, vocab)


# -- few-shot linear probe ------------------------------------------------------


@dataclasses.dataclass
class LinearProbe:
    weight: np.ndarray          # (n_classes, D) rows in the joint space
    bias: np.ndarray            # (n_classes,)
    classes: tuple = PROGRESSION_CLASSES

    def logits(self, embeddings):
        return embeddings @ self.weight.T + self.bias

    def predict(self, embeddings):
        idx = np.argmax(self.logits(embeddings), axis=-1)
        return [self.classes[i] for i in idx]


def probe_init_from_prompts(model, class_prompts):
    """Linear head whose rows are marginalized prompt embeddings, bias zero."""
    rows = [marginalized_prompt_embedding(model, class_prompts[cls])
            for cls in PROGRESSION_CLASSES]
    return LinearProbe(np.stack(rows), np.zeros(len(rows)))


def default_class_prompts():
    from .keywords import GENERATOR_KEYWORDS
    return {cls: [f"is {kw}" for kw in GENERATOR_KEYWORDS[cls]]
            for cls in PROGRESSION_CLASSES}


def prompt_classify(model, embeddings, class_prompts=None):
    """Zero-label classification by cosine to class prompt embeddings."""
    probe = probe_init_from_prompts(model, class_prompts or default_class_prompts())
    return probe.predict(embeddings)


def probe_train(probe, embeddings, labels, epochs=40, lr=1e-3, batch_size=32, seed=0):
    """Fit the probe on frozen embeddings with class-weighted cross-entropy."""
    rng = np.random.default_rng(seed)
    label_idx = np.array([probe.classes.index(lab) for lab in labels])
    counts = np.bincount(label_idx, minlength=len(probe.classes)).astype(float)
    class_weights = counts.sum() / np.maximum(counts, 1.0) / len(probe.classes)

    weight = nn.Parameter(probe.weight.copy())
    bias = nn.Parameter(probe.bias.copy(), decay_exempt=True)
    from .training import AdamW
    optimizer = AdamW([weight, bias], weight_decay=0.0)
    order = np.arange(len(embeddings))
    for _ in range(epochs):
        rng.shuffle(order)
        for i in range(0, len(order), batch_size):
            chunk = order[i:i + batch_size]
            x = Tensor(embeddings[chunk])
            logits = T.add(T.matmul(x, T.transpose(weight, (1, 0))), bias)
            lp = T.log_softmax(logits, axis=-1)
            picked = lp[np.arange(len(chunk)), label_idx[chunk]]
            w = class_weights[label_idx[chunk]]
            loss = T.mul(T.sum_(T.mul(picked, Tensor(-w))), 1.0 / w.sum())
            optimizer.zero_grad()
            T.backward(loss)
            optimizer.step(lr)
    return LinearProbe(weight.data.copy(), bias.data.copy(), probe.classes)


# -- nearest-neighbour report retrieval ----------------------------------------


class ReportIndex:
    """Joint-space index of corpus reports for nearest-neighbour retrieval."""

    def __init__(self, model, reports):
        if not reports:
            raise DownstreamError("cannot index an empty report corpus")
        self.reports = list(reports)
        embs = []
        with T.no_grad():
            for i in range(0, len(reports), 64):
                chunk = reports[i:i + 64]
                _, r_proj, _, _ = model.embed_texts(chunk)
                embs.append(r_proj.data.copy())
        self.embeddings = np.concatenate(embs, axis=0)

    def retrieve(self, image_embedding):
        """Index and text of the closest report; ties break to the lowest index."""
        scores = self.embeddings @ image_embedding
        idx = int(np.argmax(scores))
        return idx, self.reports[idx]
