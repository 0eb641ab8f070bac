"""Acceptance gate: every criterion at its stated tolerance, one line each.

Criterion 5 drives the shared end-to-end fixture (2000/200/200 studies at
64x64, default model, decoder fine-tunes with and without prior context);
the others run compact dedicated checks. Each test prints a PASS line with
the measured numbers so the gate is auditable from the pytest log.
"""

import math
import time

import numpy as np
import pytest

from tvlp import evaluation, metrics, objectives as obj, tensor as T
from tvlp.curation import decide_from_scores
from tvlp.data import generate_corpus
from tvlp.image_encoder import EncoderConfig, ImageEncoder, TemporalFusion
from tvlp.model import ModelConfig, PretrainModel
from tvlp.tensor import Tensor, check_gradients
from tvlp.text_encoder import build_vocabulary
from tvlp.training import TrainConfig, train

from conftest import tiny_model_config


def report(criterion, detail):
    print(f"ACCEPTANCE {criterion}: PASS ({detail})")


# -- criterion 1: gradient suite ------------------------------------------------------


def test_criterion_1_gradient_suite(vocab, small_corpus):
    start = time.time()
    rng = np.random.default_rng(0)
    checks = []

    def op_check(name, f, arrays, h=1e-5):
        inputs = [Tensor(a, requires_grad=True, name=name) for a in arrays]
        rep = check_gradients(f, inputs, h=h, tol=1e-4,
                              rng=np.random.default_rng(1))
        checks.append((name, rep.max_error))
        assert rep.passed, (name, rep)

    a34, b34 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) + 2.0
    probe34 = Tensor(rng.normal(size=(3, 4)))
    op_check("add", lambda i: T.sum_(T.mul(T.add(i[0], i[1]), probe34)), [a34, b34])
    op_check("sub", lambda i: T.sum_(T.mul(T.sub(i[0], i[1]), probe34)), [a34, b34])
    op_check("mul", lambda i: T.sum_(T.mul(T.mul(i[0], i[1]), probe34)), [a34, b34])
    op_check("div", lambda i: T.sum_(T.mul(T.div(i[0], i[1]), probe34)), [a34, b34])
    probe35 = Tensor(rng.normal(size=(3, 5)))
    op_check("matmul", lambda i: T.sum_(T.mul(T.matmul(i[0], i[1]), probe35)),
             [rng.normal(size=(3, 4)), rng.normal(size=(4, 5))])
    op_check("softmax", lambda i: T.sum_(T.mul(T.softmax(i[0], axis=-1), probe34)),
             [rng.normal(size=(3, 4))])
    op_check("log_softmax", lambda i: T.sum_(T.mul(T.log_softmax(i[0], axis=-1),
                                                   probe34)), [rng.normal(size=(3, 4))])
    op_check("layer_norm",
             lambda i: T.sum_(T.mul(T.layer_norm(i[0], i[1], i[2]), probe34)),
             [rng.normal(size=(3, 4)), np.ones(4), np.zeros(4)])
    targets = np.array([0, 2, 1])
    op_check("cross_entropy", lambda i: T.cross_entropy(i[0], targets),
             [rng.normal(size=(3, 4))])
    op_check("relu", lambda i: T.sum_(T.mul(T.relu(i[0]), probe34)),
             [rng.normal(size=(3, 4)) + 0.2])
    op_check("gelu", lambda i: T.sum_(T.mul(T.gelu(i[0]), probe34)),
             [rng.normal(size=(3, 4))])
    op_check("tanh", lambda i: T.sum_(T.mul(T.tanh(i[0]), probe34)),
             [rng.normal(size=(3, 4))])
    op_check("exp", lambda i: T.sum_(T.mul(T.exp(i[0]), probe34)),
             [rng.normal(size=(3, 4))])
    op_check("log", lambda i: T.sum_(T.mul(T.log(i[0]), probe34)),
             [np.abs(rng.normal(size=(3, 4))) + 0.5])
    ids = np.array([[0, 2], [1, 0]])
    probe_emb = Tensor(rng.normal(size=(2, 2, 3)))
    op_check("embedding", lambda i: T.sum_(T.mul(T.embedding(i[0], ids), probe_emb)),
             [rng.normal(size=(4, 3))])
    probe_conv = Tensor(rng.normal(size=(2, 3, 3, 3)))
    op_check("conv2d", lambda i: T.sum_(T.mul(T.conv2d(i[0], i[1], i[2],
                                                       stride=2, padding=1),
                                              probe_conv)),
             [rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3)),
              rng.normal(size=3)])
    probe25 = Tensor(rng.normal(size=(2, 5)))
    op_check("concatenate",
             lambda i: T.sum_(T.mul(T.concatenate([i[0], i[1]], axis=1), probe25)),
             [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))])
    probe32 = Tensor(rng.normal(size=(3, 2)))
    op_check("sum", lambda i: T.sum_(T.mul(T.sum_(i[0], axis=1), probe32)),
             [rng.normal(size=(3, 4, 2))])
    probe4 = Tensor(rng.normal(size=4))
    op_check("mean", lambda i: T.sum_(T.mul(T.mean(i[0], axis=0), probe4)),
             [rng.normal(size=(3, 4))])
    op_check("l2_normalize",
             lambda i: T.sum_(T.mul(T.l2_normalize(i[0], axis=-1), probe34)),
             [rng.normal(size=(3, 4)) + 0.3])

    # the full three-component pre-training loss on a 2-sample batch
    model = PretrainModel(vocab, tiny_model_config(), seed=9)
    batch = [s for s in small_corpus.train if s.has_prior][:2]

    def full_loss(_):
        return model.forward_batch(batch, np.random.default_rng(7)).total

    rep = check_gradients(full_loss, model.parameters(), tol=1e-4, h=1e-6,
                          max_checks_per_input=2, rng=np.random.default_rng(2))
    assert rep.passed, rep
    elapsed = time.time() - start
    assert elapsed < 120.0
    worst = max(err for _, err in checks)
    report(1, f"{len(checks)} ops + full loss, worst rel err {max(worst, rep.max_error):.2e}, "
              f"{elapsed:.0f}s")


# -- criterion 2: architecture invariants ----------------------------------------------


def test_criterion_2_architecture_invariants():
    config = EncoderConfig(image_size=32, grid_size=8, dim=16, n_layers=2, n_heads=2)
    vocab = build_vocabulary()
    swap_worst = pad_worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        enc = ImageEncoder(config, np.random.default_rng(1000 + seed))
        current = Tensor(rng.uniform(0, 1, size=(2, 32, 32)))
        prior = Tensor(rng.uniform(0, 1, size=(2, 32, 32)))
        with_prior = enc.decompose(current, prior)
        without = enc.decompose(current)
        assert np.array_equal(with_prior.p_current.data, without.p_current.data)
        for row in without.p_diff.data.reshape(-1, config.dim):
            assert np.array_equal(row, enc.missing_prior.data)

        fusion = TemporalFusion(config, np.random.default_rng(2000 + seed))
        a = Tensor(rng.normal(size=(1, config.n_patches, config.dim)))
        b = Tensor(rng.normal(size=(1, config.n_patches, config.dim)))
        ta = Tensor(rng.normal(size=config.dim))
        tb = Tensor(rng.normal(size=config.dim))
        out_a, out_b = fusion(a, b, ta, tb)
        sw_a, sw_b = fusion(b, a, tb, ta)
        swap_worst = max(swap_worst,
                         np.abs(sw_a.data - out_b.data).max(),
                         np.abs(sw_b.data - out_a.data).max())
        assert swap_worst <= 1e-6

        from tvlp.text_encoder import TextEncoder
        text = TextEncoder(vocab, dim=16, n_heads=2, n_layers=2, max_len=32,
                           rng=np.random.default_rng(3000 + seed))
        short = vocab.tokenize("the disc is worsening .")
        longer = vocab.tokenize("there is a bar in the lower right .")
        alone = text([short], mode="CLS").summary.data[0]
        padded = text([short, longer], mode="CLS").summary.data[0]
        pad_worst = max(pad_worst, np.abs(alone - padded).max())
        assert pad_worst <= 1e-6
    report(2, f"10 seeds; swap dev {swap_worst:.1e}, pad dev {pad_worst:.1e}, "
              "static/missing-prior exact")


# -- criterion 3: loss calibration ------------------------------------------------------


def test_criterion_3_loss_calibration(vocab, small_corpus):
    # contrastive at chance: unit temperature, where similarity noise is
    # negligible against the softmax scale (the 0.07 training temperature
    # amplifies that noise far above ln N; see the decisions ledger)
    losses = []
    for seed in range(10):
        r1 = np.random.default_rng(100 + seed)
        img = r1.normal(size=(32, 32))
        img /= np.linalg.norm(img, axis=1, keepdims=True)
        txt = r1.normal(size=(32, 32))
        txt /= np.linalg.norm(txt, axis=1, keepdims=True)
        losses.append(obj.info_nce(Tensor(img @ txt.T), 1.0).item())
    nce_mean = float(np.mean(losses))
    assert abs(nce_mean - math.log(32)) <= 0.2

    mlm_losses = []
    for seed in range(10):
        model = PretrainModel(vocab, tiny_model_config(), seed=seed)
        out = model.forward_batch(small_corpus.train[:4], np.random.default_rng(seed))
        mlm_losses.append(out.mlm.item())
    mlm_mean = float(np.mean(mlm_losses))
    assert abs(mlm_mean - math.log(len(vocab))) <= 0.5
    report(3, f"nce {nce_mean:.3f} vs ln32 {math.log(32):.3f}; "
              f"mlm {mlm_mean:.3f} vs lnV {math.log(len(vocab)):.3f}")


# -- criterion 4: metric oracles ---------------------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(0)
    n_fixtures = 0

    from tvlp.keywords import TEMPORAL_KEYWORDS
    words = list(TEMPORAL_KEYWORDS[:8]) + ["disc", "bar", "the", "in"]
    for trial in range(22):
        local = np.random.default_rng(trial)
        gen = [" ".join(local.choice(words, size=6)) for _ in range(8)]
        ref = [" ".join(local.choice(words, size=6)) for _ in range(8)]
        inter = gtot = rtot = 0
        for g, r in zip(gen, ref):
            eg = set(g.split()) & set(TEMPORAL_KEYWORDS)
            er = set(r.split()) & set(TEMPORAL_KEYWORDS)
            inter += len(eg & er)
            gtot += len(eg)
            rtot += len(er)
        p = inter / gtot if gtot else 1.0
        r_ = inter / rtot if rtot else 1.0
        expected = 2 * p * r_ / (p + r_) if p + r_ else 0.0
        got = metrics.tem_score(gen, ref)[2]
        assert got == expected
        n_fixtures += 1

    for trial in range(22):
        local = np.random.default_rng(50 + trial)
        grid = local.normal(size=(8, 8))
        bbox = (int(local.integers(0, 4)), int(local.integers(0, 4)),
                int(local.integers(5, 8)), int(local.integers(5, 8)))
        mask = np.zeros((8, 8), dtype=bool)
        mask[bbox[1]:bbox[3], bbox[0]:bbox[2]] = True
        inside, outside = grid[mask], grid[~mask]
        expected_cnr = abs(inside.mean() - outside.mean()) / math.sqrt(
            inside.var() + outside.var())
        assert abs(metrics.cnr(grid, bbox) - expected_cnr) < 1e-10
        thresholds = (0.1, 0.3, 0.5)
        total = 0.0
        for t in thresholds:
            pred = grid >= t
            union = (pred | mask).sum()
            total += (pred & mask).sum() / union if union else 0.0
        assert metrics.miou(grid, bbox, thresholds) == pytest.approx(
            total / 3, abs=1e-15)
        n_fixtures += 1

    classes = ("Improving", "Stable", "Worsening")
    for trial in range(22):
        local = np.random.default_rng(200 + trial)
        labels = list(local.choice(classes, size=30))
        preds = list(local.choice(classes, size=30))
        recalls = []
        for cls in classes:
            idx = [i for i, lab in enumerate(labels) if lab == cls]
            if idx:
                recalls.append(np.mean([preds[i] == cls for i in idx]))
        assert metrics.macro_accuracy(preds, labels, classes) == np.mean(recalls)
        n_fixtures += 1

    vocab_words = ["a", "b", "c", "d", "e"]
    from test_metrics import test_bleu_matches_bruteforce_on_random_corpora
    test_bleu_matches_bruteforce_on_random_corpora()
    from test_metrics import test_rouge_matches_bruteforce_lcs
    test_rouge_matches_bruteforce_lcs()
    n_fixtures += 40

    from test_objectives import local_similarity_bruteforce
    for trial in range(22):
        local = np.random.default_rng(300 + trial)
        tokens = local.normal(size=(3, 6))
        patches = local.normal(size=(5, 6))
        ours = obj.local_similarity(Tensor(tokens), Tensor(patches), 0.1).item()
        assert abs(ours - local_similarity_bruteforce(tokens, patches, 0.1)) < 1e-10
        n_fixtures += 1
    report(4, f"{n_fixtures} fixtures across tem/cnr/miou/macro/bleu/rouge/local-sim")


# -- criterion 5: end-to-end synthetic run ------------------------------------------------


def test_criterion_5a_grounding(e2e):
    res = evaluation.evaluate_grounding(e2e.model, e2e.corpus.test)
    assert res["mean_cnr"] >= 1.0
    assert res["argmax_in_bbox_rate"] >= 0.70
    report("5a", f"cnr {res['mean_cnr']:.2f} >= 1.0, "
                 f"argmax-in-bbox {res['argmax_in_bbox_rate']:.2f} >= 0.70, "
                 f"miou {res['mean_miou']:.3f}")


def test_criterion_5b_zero_shot_classification(e2e):
    res = evaluation.evaluate_zero_shot_classification(e2e.decoder, e2e.model,
                                                       e2e.corpus.test)
    assert res["macro_accuracy"] >= 0.70
    report("5b", f"verbalizer macro-accuracy {res['macro_accuracy']:.3f} >= 0.70 "
                 f"(chance 0.33, n={len(res['labels'])})")


def test_criterion_5c_report_generation_gap(e2e):
    with_priors = evaluation.evaluate_report_generation(
        e2e.decoder, e2e.model, e2e.corpus.test)
    without = evaluation.evaluate_report_generation(
        e2e.decoder_no_prior, e2e.model, e2e.corpus.test,
        use_prior_image=False, use_prior_report=False)
    gap = with_priors["tem"] - without["tem"]
    assert gap >= 0.05
    report("5c", f"tem with priors {with_priors['tem']:.3f}, without "
                 f"{without['tem']:.3f}, gap {gap:.3f} >= 0.05")


def test_criterion_5d_delta_prior_analysis(e2e):
    res = evaluation.evaluate_delta_prior(e2e.model, e2e.corpus.test)
    assert res["progression_mean"] is not None and res["stopword_mean"] is not None
    assert res["progression_mean"] > res["stopword_mean"]
    assert res["rank_p"] < 0.05
    report("5d", f"delta progression {res['progression_mean']:.3f} > "
                 f"stop words {res['stopword_mean']:.3f}, rank p {res['rank_p']:.1e}")


def test_criterion_5_time_budget(e2e):
    assert e2e.elapsed < 1800.0
    report("5-time", f"pipeline {e2e.elapsed:.0f}s < 1800s")


# -- criterion 6: ablation direction matrix ------------------------------------------------


def ablation_model_config(name):
    image = EncoderConfig(image_size=64, grid_size=8, dim=32, n_layers=2, n_heads=4,
                          use_temporal_encodings=(name != "no_temporal_encodings"),
                          use_decomposition=(name != "no_decomposition"))
    return ModelConfig(image=image, text_dim=32, text_heads=4, text_layers=2,
                       max_text_len=64, joint_dim=16, projection_hidden=32)


@pytest.fixture(scope="module")
def ablation_runs(vocab):
    """Seed-matched mini pretrains for the encoder/pre-training arms."""
    corpus = generate_corpus(seed=5, n_studies=320, fraction_with_prior=0.68,
                             image_size=64, split_fractions=(0.75, 0.05, 0.2))
    arms = {}
    for seed in range(4):
        for name in ("baseline", "no_temporal_encodings", "no_decomposition",
                     "no_local_loss"):
            model = PretrainModel(vocab, ablation_model_config(name), seed=seed)
            weights = None if name != "no_local_loss" else {"local": 0.0}
            train(model, corpus, TrainConfig(
                batch_size=32, epochs=15, base_lr=1e-3, augment=False,
                seed=seed, loss_weights=weights))
            arms[(name, seed)] = model
    return corpus, arms


def seed_gap(values):
    return float(np.mean(values))


def test_criterion_6_pretraining_ablations(vocab, ablation_runs):
    corpus, arms = ablation_runs

    def probe_acc(model, seed):
        res = evaluation.evaluate_probe(model, corpus.train, corpus.test,
                                        label_fraction=1.0, seed=seed)
        return res["probe_accuracy"]

    def cnr_of(model):
        return evaluation.evaluate_grounding(model, corpus.test)["mean_cnr"]

    acc_gaps = [probe_acc(arms[("baseline", s)], s)
                - probe_acc(arms[("no_temporal_encodings", s)], s) for s in range(4)]
    assert seed_gap(acc_gaps) >= 0.0

    cnr_gaps_decomp = [cnr_of(arms[("baseline", s)])
                       - cnr_of(arms[("no_decomposition", s)]) for s in range(4)]
    assert seed_gap(cnr_gaps_decomp) >= 0.0

    cnr_gaps_local = [cnr_of(arms[("baseline", s)])
                      - cnr_of(arms[("no_local_loss", s)]) for s in range(4)]
    assert seed_gap(cnr_gaps_local) >= 0.0

    report("6 (pre-training)", "mean gaps over 4 seeds: "
           f"temporal-enc acc {seed_gap(acc_gaps):+.3f}, "
           f"decomposition cnr {seed_gap(cnr_gaps_decomp):+.3f}, "
           f"local-loss cnr {seed_gap(cnr_gaps_local):+.3f} (all >= 0)")


def test_criterion_6_separator_ablation(e2e):
    """Seed-matched decoder pairs from the shared pre-trained model."""
    from tvlp.downstream import DecoderFinetuneConfig, finetune_decoder

    tem_gaps = []
    for seed in range(4):
        with_sep = finetune_decoder(e2e.model, e2e.corpus, DecoderFinetuneConfig(
            epochs=6, seed=seed, prior_report_dropout=0.5))
        no_sep = finetune_decoder(e2e.model, e2e.corpus, DecoderFinetuneConfig(
            epochs=6, seed=seed, use_sep=False, prior_report_dropout=0.5))
        tem_with = evaluation.evaluate_report_generation(
            with_sep, e2e.model, e2e.corpus.test)["tem"]
        tem_without = evaluation.evaluate_report_generation(
            no_sep, e2e.model, e2e.corpus.test, use_sep=False)["tem"]
        tem_gaps.append(tem_with - tem_without)
    assert seed_gap(tem_gaps) >= 0.0
    report("6 (separator)", f"mean tem gap over 4 seeds {seed_gap(tem_gaps):+.3f} >= 0")


# -- criterion 7: curation ---------------------------------------------------------------


def test_criterion_7_curation(e2e):
    res = evaluation.evaluate_curation(e2e.model, e2e.corpus.test,
                                       n_candidates=3, margin=0.2, seed=0)
    assert res["clean_pick_rate"] is not None
    assert res["clean_pick_rate"] >= 0.95
    d = decide_from_scores([0.9, 0.5], margin=0.2)
    assert d.confident and d.chosen_index == 0 and d.runner_up == 0.5
    d = decide_from_scores([0.60, 0.55], margin=0.2)
    assert not d.confident and d.chosen_index == 0
    assert decide_from_scores([0.4]).confident
    report(7, f"clean pick rate {res['clean_pick_rate']:.3f} >= 0.95 "
              f"(confident on {res['confident_rate']:.2f} of studies); margin fixtures exact")


# -- criterion 8: sampler -----------------------------------------------------------------


def test_criterion_8_sampler(vocab):
    from tvlp.training import plan_epoch
    corpus = generate_corpus(seed=6, n_studies=1000, fraction_with_prior=0.68,
                             image_size=16)
    singles = [s for s in corpus.all_studies() if not s.has_prior]
    multis = [s for s in corpus.all_studies() if s.has_prior]
    plan = plan_epoch(singles, multis, 32, np.random.default_rng(3))
    covered = 0
    multi_covered = 0
    for tag, batch in plan:
        kinds = {s.has_prior for s in batch}
        assert kinds == {tag == "MULTI"}
        covered += len(batch)
        multi_covered += len(batch) if tag == "MULTI" else 0
    assert covered == 1000
    fraction = multi_covered / covered
    assert abs(fraction - len(multis) / 1000) < 0.02

    small = generate_corpus(seed=8, n_studies=40, fraction_with_prior=0.6,
                            image_size=16)
    states = []
    for _ in range(2):
        model = PretrainModel(vocab, tiny_model_config(), seed=11)
        train(model, small, TrainConfig(batch_size=8, epochs=2, base_lr=1e-3,
                                        augment=True, rotation_deg=5.0,
                                        shear_deg=2.0, seed=11))
        states.append({n: p.data.copy() for n, p in model.named_parameters()})
    for name in states[0]:
        assert np.array_equal(states[0][name], states[1][name])
    report(8, f"homogeneous plan, multi fraction {fraction:.3f} vs {len(multis)/1000:.3f}, "
              "two seeded runs bit-identical")


# -- criterion 9: sentence-similarity protocol ----------------------------------------------


def test_criterion_9_sentence_protocol():
    grid = metrics.threshold_grid(0.005)
    assert len(grid) == 401 and grid[0] == -1.0 and grid[-1] == 1.0

    def pair(cos):
        return (np.array([1.0, 0.0]),
                np.array([cos, math.sqrt(max(0.0, 1 - cos ** 2))]))

    # hand-computed AUC fixture: one inversion among 5x5 pairs -> 24/25
    pairs = [( *pair(c), True) for c in (0.9, 0.8, 0.7, 0.6, 0.25)]
    pairs += [(*pair(c), False) for c in (0.3, 0.2, 0.1, 0.0, -0.2)]
    accuracy, auc = metrics.sentence_similarity_eval(pairs, folds=10)
    assert auc == pytest.approx(24 / 25)

    separated = [(*pair(0.8), True) for _ in range(10)]
    separated += [(*pair(-0.1), False) for _ in range(10)]
    accuracy, auc = metrics.sentence_similarity_eval(separated, folds=10)
    assert accuracy == 1.0 and auc == 1.0
    report(9, "grid exact, hand AUC 24/25, separated fixture accuracy 1.0")
