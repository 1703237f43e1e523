"""Command-line interface: one subcommand per pipeline stage plus a
config-driven end-to-end runner.

Exit codes: 0 success, 1 stage failure (message on stderr as
`error: [stage] ...`), 2 usage errors (argparse).
"""

import argparse
import os
import sys

import numpy as np

from .data import load_dataset, load_score_matrix, save_dataset, save_score_matrix
from .errors import NoiseLensError, ValidationError
from .experiment import load_experiment_config, parse_pair_map, run_experiment
from .losses import MarginConfig
from .noise import (
    DEFAULT_BUDGET_BOUNDS,
    DEFAULT_BUDGET_SD,
    NoiseSpec,
    inject_noise,
    make_blobs,
    save_corruption_record,
)
from .priors import (
    compute_class_prior,
    estimate_transition_matrix,
    load_class_prior,
    load_transition_matrix,
    save_class_prior,
    save_transition_matrix,
)
from .report import (
    accuracy,
    confidence_histogram,
    format_records,
    format_table,
    histogram_rows,
    top_k_accuracy,
)
from .scorer import ScorerConfig, cosine_softmax_score, load_embedding_bank, load_embedding_table
from .selection import (
    DEFAULT_CONFIDENCE_THRESHOLD,
    DEFAULT_CONSISTENCY_THRESHOLD,
    apply_mask,
    load_mask,
    save_mask,
    select_by_confidence,
    select_by_prompt_consistency,
)
from .trainer import TrainConfig, load_classifier, predict, save_classifier, train

_NOISE_NAMES = {"sym": "symmetric", "asym": "asymmetric", "idn": "instance_dependent"}


def _resolve_threads(value) -> int:
    if value is None:
        value = os.environ.get("NOISELENS_THREADS", "1")
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise ValidationError(f"thread count {value!r} is not an integer") from None
    if threads < 1:
        raise ValidationError("thread count must be at least 1")
    return threads


def _cmd_synth(args) -> int:
    dataset = make_blobs(args.classes, args.per_class, args.dim, args.sep, args.seed)
    record = None
    spec = None
    if args.noise != "none":
        kind = _NOISE_NAMES[args.noise]
        pair_map = None
        if kind == "asymmetric":
            if not args.pair_map:
                raise ValidationError("asymmetric noise requires --pair-map")
            pair_map = parse_pair_map(args.pair_map, args.classes)
        noise_seed = args.noise_seed if args.noise_seed is not None else args.seed + 1
        bounds = DEFAULT_BUDGET_BOUNDS
        if args.budget_bounds:
            parts = args.budget_bounds.split(",")
            if len(parts) != 2:
                raise ValidationError("--budget-bounds must be 'low,high'")
            bounds = (float(parts[0]), float(parts[1]))
        spec = NoiseSpec(
            kind=kind,
            rate=args.rate,
            seed=noise_seed,
            pair_map=pair_map,
            budget_sd=args.budget_sd,
            budget_bounds=bounds,
        )
        dataset, record = inject_noise(dataset, spec)
    save_dataset(args.out, dataset, fmt="binary" if args.binary else "text")
    if args.corruption_out:
        if record is None:
            raise ValidationError("--corruption-out requires --noise")
        save_corruption_record(args.corruption_out, record, spec)
    return 0


def _cmd_score(args) -> int:
    dataset = load_dataset(args.dataset)
    if args.bank:
        bank = load_embedding_bank(args.bank)
        if bank.num_classes != dataset.num_classes:
            raise ValidationError(
                f"bank has {bank.num_classes} classes, dataset has {dataset.num_classes}"
            )
        if args.embeddings:
            embeddings = load_embedding_table(args.embeddings, dataset)
        else:
            embeddings = dataset.features
        scores = cosine_softmax_score(
            embeddings, bank, ScorerConfig(temperature=args.temperature), sample_ids=dataset.ids
        )
    else:
        scores = load_score_matrix(args.scores_file, dataset)
    save_score_matrix(args.out, scores)
    return 0


def _cmd_select(args) -> int:
    dataset = load_dataset(args.dataset)
    scores = load_score_matrix(args.scores, dataset)
    if args.criterion == "confidence":
        mask = select_by_confidence(dataset, scores, args.rho)
    else:
        if not args.scores_b:
            raise ValidationError("prompt-consistency requires --scores-b")
        scores_b = load_score_matrix(args.scores_b, dataset)
        mask = select_by_prompt_consistency(dataset, scores, scores_b, args.mu)
    save_mask(args.out, mask)
    return 0


def _cmd_priors(args) -> int:
    dataset = load_dataset(args.dataset)
    scores = load_score_matrix(args.scores, dataset)
    mask = load_mask(args.mask)
    subset = apply_mask(dataset, mask)
    matrix = estimate_transition_matrix(dataset, scores)
    prior = compute_class_prior(subset, dataset.label_space)
    save_transition_matrix(args.tm_out, matrix)
    save_class_prior(args.prior_out, prior)
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    mask = load_mask(args.mask)
    subset = apply_mask(dataset, mask)
    matrix = load_transition_matrix(args.tm)
    prior = load_class_prior(args.prior)
    margin = MarginConfig(delta=args.delta, t=args.t, s=args.s, gamma=args.gamma)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.wd,
        momentum=args.momentum,
        seed=args.seed,
        shuffle=not args.no_shuffle,
    )
    report = train(subset, matrix, prior, margin, cfg)
    save_classifier(args.out, report.classifier)
    return 0


def _cmd_report(args) -> int:
    formatter = format_table if args.format == "table" else format_records
    if args.classifier:
        if not args.dataset:
            raise ValidationError("--classifier reports require --dataset")
        dataset = load_dataset(args.dataset)
        classifier = load_classifier(args.classifier)
        reference = dataset.true_labels if dataset.has_ground_truth else dataset.noisy_labels
        prediction = predict(classifier, dataset)
        row = {
            "samples": dataset.num_samples,
            "accuracy": accuracy(prediction.labels, reference),
        }
        if args.top_k:
            row[f"top{args.top_k}_accuracy"] = top_k_accuracy(
                prediction.probabilities, reference, args.top_k
            )
        sys.stdout.write(formatter([row]))
        return 0
    if args.scores:
        if not args.dataset:
            raise ValidationError("--scores reports require --dataset")
        dataset = load_dataset(args.dataset)
        scores = load_score_matrix(args.scores, dataset)
        confidences = scores.values[np.arange(dataset.num_samples), dataset.noisy_labels]
        histogram = confidence_histogram(confidences, source=os.path.basename(args.scores))
        sys.stdout.write(formatter(histogram_rows(histogram)))
        return 0
    raise ValidationError("report needs --classifier or --scores")


def _cmd_run(args) -> int:
    config = load_experiment_config(args.config)
    result = run_experiment(config)
    if result.status != 0:
        sys.stderr.write(f"error: [{result.stage}] {result.error}\n")
        return 1
    sys.stdout.write(f"{result.output_dir}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noiselens",
        description="Surrogate-guided clean-sample selection and margin-adjusted training.",
    )
    parser.add_argument(
        "--threads",
        default=None,
        help="cap on worker threads (default: NOISELENS_THREADS or 1)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset with label noise")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--sep", type=float, required=True)
    p.add_argument("--noise", choices=("none", "sym", "asym", "idn"), default="none")
    p.add_argument("--rate", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-seed", type=int, default=None, help="default: --seed + 1")
    p.add_argument("--pair-map", default=None, help="'src:dst,...' or 'cycle' (asym only)")
    p.add_argument("--budget-sd", type=float, default=DEFAULT_BUDGET_SD)
    p.add_argument("--budget-bounds", default=None, help="'low,high' (idn only)")
    p.add_argument("--out", required=True)
    p.add_argument("--corruption-out", default=None)
    p.add_argument("--binary", action="store_true")
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("score", help="score a dataset with a class-embedding bank or score file")
    p.add_argument("--dataset", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--bank")
    group.add_argument("--scores-file")
    p.add_argument("--temperature", type=float, default=0.01)
    p.add_argument("--embeddings", default=None, help="image embeddings keyed by sample id")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("select", help="flag clean samples by confidence or prompt consistency")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--scores-b", default=None)
    p.add_argument("--criterion", choices=("confidence", "prompt-consistency"), required=True)
    p.add_argument("--rho", type=float, default=DEFAULT_CONFIDENCE_THRESHOLD)
    p.add_argument("--mu", type=float, default=DEFAULT_CONSISTENCY_THRESHOLD)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_select)

    p = sub.add_parser("priors", help="estimate the transition matrix and clean-subset prior")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--tm-out", required=True)
    p.add_argument("--prior-out", required=True)
    p.set_defaults(handler=_cmd_priors)

    p = sub.add_parser("train", help="train a linear head on the selected subset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--tm", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--s", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--wd", type=float, default=0.0)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-shuffle", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("report", help="accuracy or confidence-histogram reports")
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--classifier", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--scores", default=None)
    p.add_argument("--top-k", type=int, default=0)
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("run", help="run a full experiment from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(handler=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        _resolve_threads(args.threads)
        return args.handler(args)
    except NoiseLensError as exc:
        sys.stderr.write(f"error: [{stage}] {exc}\n")
        return 1
    except OSError as exc:
        sys.stderr.write(f"error: [{stage}] {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
