"""Command-line entry point for reproducible corpus/train/eval runs.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every command snapshots its effective config, seed, and version into the
output directory so a run can be reproduced exactly.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__, checkpoint, config as cfgmod, data, evaluation
from .analysis import write_category_boxplot_svg, write_delta_csv
from .config import ConfigError
from .data import DataConfigError, write_pgm
from .downstream import ReportDecoder, finetune_decoder
from .model import PretrainModel
from .text_encoder import build_vocabulary
from .training import TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

EVAL_TASKS = ("grounding", "temporal-cls", "report-gen", "retrieval",
              "sentence-sim", "delta-prior", "curation")

SUMMARY_COLUMNS = (
    "method", "task", "cnr", "miou", "argmax_in_bbox", "macro_accuracy",
    "tem", "bleu4", "rouge_l", "self_retrieval", "sentence_accuracy",
    "sentence_auc", "confident_rate", "clean_pick_rate", "delta_progression",
    "delta_stopword", "delta_rank_p", "prompt_accuracy", "probe_accuracy",
)


def _effective_config(args):
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
    for item in args.override or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like key=value")
        key, value = item.split("=", 1)
        cfgmod.apply_override(cfg, key, value)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfgmod.validate_config(cfg)
    return cfg


def _prepare_out(out_dir, cfg):
    parent = os.path.dirname(os.path.abspath(out_dir))
    if not os.path.isdir(parent):
        raise DataConfigError(f"parent directory of '{out_dir}' does not exist")
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.save_config(cfg, os.path.join(out_dir, "config.json"))
    with open(os.path.join(out_dir, "run_info.json"), "w") as fh:
        json.dump({"version": __version__, "seed": cfg["seed"]}, fh, sort_keys=True)
        fh.write("\n")


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _load_model(cfg, checkpoint_path):
    vocab = build_vocabulary()
    model = PretrainModel(vocab, cfgmod.model_config(cfg), seed=cfg["seed"])
    checkpoint.load_module(checkpoint_path, model)
    return model


def _load_decoder(cfg, model, decoder_path):
    decoder = ReportDecoder.from_pretrained(model)
    checkpoint.load_module(decoder_path, decoder)
    return decoder


# -- commands ------------------------------------------------------------------


def cmd_generate(args):
    cfg = _effective_config(args)
    _prepare_out(args.out, cfg)
    d = cfg["data"]
    corpus = data.generate_corpus(
        cfg["seed"], d["n_studies"], d["fraction_with_prior"], d["image_size"],
        tuple(d["split_fractions"]), d["max_findings"])
    data.save_corpus(corpus, args.out)
    print(f"wrote {d['n_studies']} studies to {args.out}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _effective_config(args)
    _prepare_out(args.out, cfg)
    corpus = data.load_corpus(args.corpus)
    vocab = build_vocabulary()
    model = PretrainModel(vocab, cfgmod.model_config(cfg), seed=cfg["seed"])
    result = train(model, corpus, cfgmod.train_config(cfg),
                   log_path=os.path.join(args.out, "train_log.jsonl"))
    checkpoint.save_module(os.path.join(args.out, "model.ckpt"), model)
    vocab.save(os.path.join(args.out, "vocab.json"))
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump({"best_epoch": result.best_epoch, "val_losses": result.val_losses,
                   "total_steps": result.total_steps}, fh, sort_keys=True)
        fh.write("\n")
    print(f"best validation loss {min(result.val_losses):.4f} "
          f"at epoch {result.best_epoch}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_finetune(args):
    cfg = _effective_config(args)
    _prepare_out(args.out, cfg)
    corpus = data.load_corpus(args.corpus)
    model = _load_model(cfg, args.checkpoint)
    if args.task == "report-gen":
        decoder = finetune_decoder(model, corpus, cfgmod.decoder_config(cfg))
        checkpoint.save_module(os.path.join(args.out, "decoder.ckpt"), decoder)
        print(f"decoder checkpoint in {args.out}")
    elif args.task == "probe":
        d = cfg["downstream"]
        result = evaluation.evaluate_probe(
            model, corpus.train, corpus.test, d["probe_label_fraction"],
            d["probe_epochs"], d["probe_lr"], cfg["seed"])
        with open(os.path.join(args.out, "probe_summary.json"), "w") as fh:
            json.dump(result, fh, sort_keys=True)
            fh.write("\n")
        print(f"probe macro-accuracy {result['probe_accuracy']:.3f} "
              f"(prompt baseline {result['prompt_accuracy']:.3f})")
    else:
        raise ConfigError(f"unknown finetune task '{args.task}'")
    return EXIT_OK


def _run_eval_task(task, cfg, corpus, model, decoder, out_dir, summary_rows):
    met = cfg["metrics"]
    down = cfg["downstream"]
    if task == "grounding":
        res = evaluation.evaluate_grounding(
            model, corpus.test, use_prior=down["use_prior_image"],
            iou_thresholds=tuple(met["iou_thresholds"]))
        heat_dir = os.path.join(out_dir, "grounding_maps")
        os.makedirs(heat_dir, exist_ok=True)
        for row in res["per_finding"]:
            heat = (row.pop("map") + 1.0) / 2.0
            write_pgm(os.path.join(heat_dir, f"{row['study_id']}_{row['kind']}.pgm"), heat)
        _write_csv(os.path.join(out_dir, "grounding.csv"),
                   ("study_id", "kind", "phrase", "cnr", "miou", "argmax_in_bbox"),
                   res["per_finding"])
        summary_rows.append({"method": "pretrained", "task": task,
                             "cnr": res["mean_cnr"], "miou": res["mean_miou"],
                             "argmax_in_bbox": res["argmax_in_bbox_rate"]})
    elif task == "temporal-cls":
        if decoder is None:
            raise ConfigError("temporal-cls needs --decoder")
        res = evaluation.evaluate_zero_shot_classification(decoder, model, corpus.test)
        _write_csv(os.path.join(out_dir, "temporal_cls.csv"),
                   ("study_id", "kind", "label", "prediction",
                    "p_improving", "p_stable", "p_worsening"), res["per_finding"])
        summary_rows.append({"method": "zero-shot-verbalizer", "task": task,
                             "macro_accuracy": res["macro_accuracy"]})
        probe = evaluation.evaluate_probe(
            model, corpus.train, corpus.test, down["probe_label_fraction"],
            down["probe_epochs"], down["probe_lr"], cfg["seed"])
        summary_rows.append({"method": "linear-probe", "task": task,
                             "macro_accuracy": probe["probe_accuracy"],
                             "prompt_accuracy": probe["prompt_accuracy"],
                             "probe_accuracy": probe["probe_accuracy"]})
    elif task == "report-gen":
        if decoder is None:
            raise ConfigError("report-gen needs --decoder")
        res = evaluation.evaluate_report_generation(
            decoder, model, corpus.test, max_len=down["max_report_len"],
            use_prior_image=down["use_prior_image"],
            use_prior_report=down["use_prior_report"], use_sep=down["use_sep"])
        with open(os.path.join(out_dir, "generated_reports.jsonl"), "w") as fh:
            for row in res["rows"]:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        summary_rows.append({"method": "decoder", "task": task, "tem": res["tem"],
                             "bleu4": res["bleu4"], "rouge_l": res["rouge_l"]})
    elif task == "retrieval":
        res = evaluation.evaluate_retrieval(
            model, corpus.test, [s.report for s in corpus.train],
            rng=np.random.default_rng(cfg["seed"]))
        summary_rows.append({"method": "nearest-report", "task": task,
                             "tem": res["tem"], "bleu4": res["bleu4"],
                             "rouge_l": res["rouge_l"],
                             "self_retrieval": res["self_retrieval_rate"]})
    elif task == "sentence-sim":
        pairs = evaluation.build_sentence_pairs(
            corpus.test, np.random.default_rng(cfg["seed"]))
        res = evaluation.evaluate_sentence_similarity(
            model, pairs, met["sentence_folds"], met["sentence_step"])
        summary_rows.append({"method": "text-encoder", "task": task,
                             "sentence_accuracy": res["accuracy"],
                             "sentence_auc": res["roc_auc"]})
    elif task == "delta-prior":
        res = evaluation.evaluate_delta_prior(model, corpus.test,
                                              met["delta_min_sentences"])
        from .keywords import token_category_map
        write_delta_csv(os.path.join(out_dir, "delta_prior.csv"),
                        res["results"], token_category_map())
        if res["by_category"]:
            write_category_boxplot_svg(os.path.join(out_dir, "delta_prior.svg"),
                                       res["by_category"])
        summary_rows.append({"method": "masked-delta", "task": task,
                             "delta_progression": res["progression_mean"],
                             "delta_stopword": res["stopword_mean"],
                             "delta_rank_p": res["rank_p"]})
    elif task == "curation":
        res = evaluation.evaluate_curation(
            model, corpus.test, met["curation_candidates"],
            met["curation_margin"], cfg["seed"])
        _write_csv(os.path.join(out_dir, "curation_audit.csv"),
                   ("study_id", "scores", "chosen_index", "kept_index",
                    "confident", "clean_index"), res["audit"])
        summary_rows.append({"method": "margin-curation", "task": task,
                             "confident_rate": res["confident_rate"],
                             "clean_pick_rate": res["clean_pick_rate"]})
    else:
        raise ConfigError(f"unknown eval task '{task}' (valid: {', '.join(EVAL_TASKS)})")


def cmd_eval(args):
    cfg = _effective_config(args)
    tasks = [t for t in (args.tasks or "").split(",") if t]
    if not tasks:
        raise ConfigError(f"no tasks given; valid tasks: {', '.join(EVAL_TASKS)}")
    for task in tasks:
        if task not in EVAL_TASKS:
            raise ConfigError(f"unknown eval task '{task}' (valid: {', '.join(EVAL_TASKS)})")
    _prepare_out(args.out, cfg)
    corpus = data.load_corpus(args.corpus)
    model = _load_model(cfg, args.checkpoint)
    decoder = _load_decoder(cfg, model, args.decoder) if args.decoder else None
    summary_rows = []
    for task in tasks:
        _run_eval_task(task, cfg, corpus, model, decoder, args.out, summary_rows)
    _write_csv(os.path.join(args.out, "summary.csv"), SUMMARY_COLUMNS, summary_rows)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary_rows, fh, sort_keys=True, default=float, indent=2)
        fh.write("\n")
    for row in summary_rows:
        printable = {k: v for k, v in row.items() if v is not None}
        print(json.dumps(printable, sort_keys=True, default=float))
    return EXIT_OK


def cmd_ablate(args):
    cfg = _effective_config(args)
    _prepare_out(args.out, cfg)
    corpus = data.load_corpus(args.corpus)
    arms = [a for a in (args.arms or ",".join(sorted(cfgmod.ABLATIONS))).split(",") if a]
    rows = []

    def pretrain_and_ground(arm_cfg, name):
        vocab = build_vocabulary()
        model = PretrainModel(vocab, cfgmod.model_config(arm_cfg), seed=arm_cfg["seed"])
        train(model, corpus, cfgmod.train_config(arm_cfg))
        res = evaluation.evaluate_grounding(model, corpus.test)
        probe = evaluation.evaluate_probe(
            model, corpus.train, corpus.test,
            arm_cfg["downstream"]["probe_label_fraction"],
            arm_cfg["downstream"]["probe_epochs"],
            arm_cfg["downstream"]["probe_lr"], arm_cfg["seed"])
        rows.append({"method": name, "task": "ablation", "cnr": res["mean_cnr"],
                     "miou": res["mean_miou"],
                     "macro_accuracy": probe["probe_accuracy"]})
        return model

    baseline_model = pretrain_and_ground(cfg, "baseline")
    baseline_decoder = finetune_decoder(baseline_model, corpus, cfgmod.decoder_config(cfg))
    gen = evaluation.evaluate_report_generation(baseline_decoder, baseline_model, corpus.test)
    rows[-1]["tem"] = gen["tem"]

    for arm in arms:
        arm_cfg = cfgmod.apply_ablation(cfg, arm)
        if any(key.startswith(("model.", "losses.")) for key in cfgmod.ABLATIONS[arm]):
            pretrain_and_ground(arm_cfg, arm)
        else:
            d = arm_cfg["downstream"]
            decoder = finetune_decoder(baseline_model, corpus, cfgmod.decoder_config(arm_cfg))
            res = evaluation.evaluate_report_generation(
                decoder, baseline_model, corpus.test, max_len=d["max_report_len"],
                use_prior_image=d["use_prior_image"],
                use_prior_report=d["use_prior_report"], use_sep=d["use_sep"])
            rows.append({"method": arm, "task": "ablation", "tem": res["tem"],
                         "bleu4": res["bleu4"], "rouge_l": res["rouge_l"]})
    _write_csv(os.path.join(args.out, "ablation_summary.csv"), SUMMARY_COLUMNS, rows)
    for row in rows:
        print(json.dumps({k: v for k, v in row.items() if v is not None},
                         sort_keys=True, default=float))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", help="path to a JSON run config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--override", action="append", metavar="KEY=VALUE",
                        help="dot-path config override, repeatable")


def build_parser():
    parser = argparse.ArgumentParser(prog="tvlp",
                                     description="temporal vision-language pre-training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pre-train on a corpus")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the decoder or the probe")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", choices=("report-gen", "probe"), default="report-gen")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="run evaluation tasks")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--decoder", help="decoder checkpoint for decoding tasks")
    p.add_argument("--tasks", help=f"comma-separated from: {', '.join(EVAL_TASKS)}")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation toggle matrix")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--arms", help="comma-separated ablation names (default: all)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataConfigError, FileNotFoundError, checkpoint.CheckpointError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
