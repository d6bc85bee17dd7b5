"""Command-line entry point wiring the full pipeline.

Subcommands: simulate, prepare, train, evaluate, explain, gradcheck.
Every run is deterministic given its config and seeds.  Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import date
from typing import Iterable

import numpy as np

from . import cycles as cycles_mod
from . import explain as explain_mod
from . import ingest as ingest_mod
from . import metrics as metrics_mod
from . import synth as synth_mod
from . import trainer as trainer_mod
from .codec import (
    CONTINUOUS_FEATURES,
    SPLIT_NAMES,
    AgeStats,
    Batch,
    EncodedDataset,
    FeatureSchema,
    HistoryStore,
    default_schema,
    encode_days,
    encode_user,
    load_dataset,
    make_batch,
    save_dataset,
)
from .ingest import DailyLog, QcReport, UserProfile
from .predictors import MODEL_VARIANTS, build_model, load_checkpoint, save_checkpoint
from .trainer import DEFAULT_FRACTIONS, Hyper, HyperGrid, assign_split


# ---------------------------------------------------------------------------
# Pipeline assembly (library API; the subcommands are thin wrappers)
# ---------------------------------------------------------------------------

def user_continuous_means(logs: Iterable[DailyLog]) -> dict[str, float]:
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for log in logs:
        if log.feature in CONTINUOUS_FEATURES and log.value is not None:
            sums[log.feature] = sums.get(log.feature, 0.0) + log.value
            counts[log.feature] = counts.get(log.feature, 0) + 1
    return {f: sums[f] / counts[f] for f in sums}


def _history_triplets(
    logs: Iterable[DailyLog], schema: FeatureSchema, means: dict[str, float]
) -> tuple[list[int], list[int], list[float]]:
    """Per-log sparse day-vector entries (date ordinal, slot, value)."""
    dates: list[int] = []
    slots: list[int] = []
    values: list[float] = []
    for log in logs:
        ordinal = log.date.toordinal()
        if log.feature in schema.binary_slot:
            dates.append(ordinal)
            slots.append(schema.binary_slot[log.feature])
            values.append(1.0)
        elif log.feature in schema.continuous_presence_slot and log.value is not None:
            dates.extend((ordinal, ordinal))
            slots.extend(
                (schema.continuous_presence_slot[log.feature],
                 schema.continuous_value_slot[log.feature])
            )
            # centered on the user's own mean: history spans many cycles
            values.extend((1.0, log.value - means.get(log.feature, 0.0)))
    return dates, slots, values


def prepare_dataset(
    user_stream: Iterable[tuple[list[DailyLog], UserProfile | None]],
    schema: FeatureSchema | None = None,
    split_seed: int = 0,
    fractions=DEFAULT_FRACTIONS,
    with_history: bool = False,
    report: QcReport | None = None,
    qc_bounds: dict | None = None,
    min_logs: int = ingest_mod.MIN_LOGS_PER_USER,
    activity_before_qc: bool = False,
) -> EncodedDataset:
    """Filter, segment, label, and encode a stream of per-user logs.

    The user split is baked into the dataset (hash of user id under
    split_seed), and age standardization is fit on training users only.
    """
    schema = schema or default_schema()
    report = report if report is not None else QcReport()

    day_blocks: list[np.ndarray] = []
    mask_blocks: list[np.ndarray] = []
    labels: list[int] = []
    user_index: list[int] = []
    start_ordinals: list[int] = []
    split_codes: list[int] = []
    user_ids: list[str] = []
    user_profiles: list[UserProfile | None] = []
    user_means: list[dict[str, float]] = []
    user_splits: list[int] = []
    hist_dates: list[list[int]] = []
    hist_slots: list[list[int]] = []
    hist_values: list[list[float]] = []

    total_retained = 0
    for user_logs, profile in user_stream:
        report.rows_read += len(user_logs)
        if activity_before_qc:
            user_logs = ingest_mod.filter_active_users(user_logs, report, min_logs)
            user_logs = ingest_mod.qc_continuous(user_logs, report, qc_bounds)
        else:
            user_logs = ingest_mod.qc_continuous(user_logs, report, qc_bounds)
            user_logs = ingest_mod.filter_active_users(user_logs, report, min_logs)
        user_logs = ingest_mod.truncate_after_positive(user_logs, report)
        total_retained += len(user_logs)
        if not user_logs:
            continue
        examples = cycles_mod.examples_for_user(user_logs)
        if not examples:
            continue
        uid = user_logs[0].user_id
        uidx = len(user_ids)
        user_ids.append(uid)
        user_profiles.append(profile)
        means = user_continuous_means(user_logs)
        user_means.append(means)
        split = assign_split(uid, split_seed, fractions)
        user_splits.append(split)
        if with_history:
            d, s, v = _history_triplets(user_logs, schema, means)
            hist_dates.append(d)
            hist_slots.append(s)
            hist_values.append(v)
        for ex in examples:
            day_matrix, mask, _ = encode_days(ex, schema)
            day_blocks.append(day_matrix.astype(np.float32))
            mask_blocks.append(mask.astype(np.uint8))
            labels.append(ex.label)
            user_index.append(uidx)
            start_ordinals.append(ex.start_date.toordinal())
            split_codes.append(split)
    report.finalize(total_retained)

    if not labels:
        raise ValueError("no labeled examples survived filtering")

    # age standardization on training users with a recorded age
    train_ages = [
        p.age
        for p, s in zip(user_profiles, user_splits)
        if s == 0 and p is not None and p.age is not None
    ]
    age_stats = None
    if len(train_ages) >= 2:
        arr = np.asarray(train_ages, dtype=float)
        std = float(arr.std(ddof=0))
        age_stats = AgeStats(float(arr.mean()), std if std > 0 else 1.0)

    user_vec_table = np.stack(
        [
            encode_user(p, m, schema, age_stats)
            for p, m in zip(user_profiles, user_means)
        ]
    ).astype(np.float32)

    history = None
    if with_history:
        lengths = [len(d) for d in hist_dates]
        indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        history = HistoryStore(
            indptr=indptr,
            date_ord=np.concatenate([np.asarray(d, dtype=np.int32) for d in hist_dates])
            if lengths
            else np.empty(0, np.int32),
            slot=np.concatenate([np.asarray(s, dtype=np.int32) for s in hist_slots])
            if lengths
            else np.empty(0, np.int32),
            value=np.concatenate([np.asarray(v, dtype=np.float32) for v in hist_values])
            if lengths
            else np.empty(0, np.float32),
        )

    user_index_arr = np.asarray(user_index, dtype=np.int32)
    labels_arr = np.asarray(labels, dtype=np.uint8)
    dataset = EncodedDataset(
        schema=schema,
        day_matrix=np.stack(day_blocks),
        day_mask=np.stack(mask_blocks),
        user_vector=user_vec_table[user_index_arr],
        label=labels_arr,
        user_index=user_index_arr,
        start_ordinal=np.asarray(start_ordinals, dtype=np.int32),
        split=np.asarray(split_codes, dtype=np.uint8),
        user_ids=user_ids,
        history=history,
        meta={
            "split_seed": split_seed,
            "fractions": list(fractions),
            "positive_fraction": float(labels_arr.mean()),
            "age_stats": None if age_stats is None else [age_stats.mean, age_stats.std],
        },
    )
    return dataset


def dataset_from_cohort(
    cohort_users: Iterable[tuple[list[DailyLog], UserProfile, dict, list[dict]]],
    **kwargs,
) -> EncodedDataset:
    """prepare_dataset over a synthetic user stream (truth rows dropped)."""
    return prepare_dataset(
        ((logs, profile) for logs, profile, _, _ in cohort_users), **kwargs
    )


def split_batch(dataset: EncodedDataset, split_name: str, with_history: bool = False) -> Batch:
    idx = dataset.indices_for(SPLIT_NAMES.index(split_name))
    return make_batch(dataset, idx, with_history)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec_kwargs = json.load(open(args.spec_json)) if args.spec_json else {}
    if args.users is not None:
        spec_kwargs["n_users"] = args.users
    if args.kind is not None:
        spec_kwargs["kind"] = args.kind
    spec_kwargs["seed"] = args.seed
    spec = synth_mod.WorldSpec(**spec_kwargs)
    os.makedirs(args.out_dir, exist_ok=True)
    cohort = synth_mod.gen_cohort(spec)
    synth_mod.write_cohort(
        cohort,
        os.path.join(args.out_dir, "logs.csv"),
        os.path.join(args.out_dir, "profiles.csv"),
        os.path.join(args.out_dir, "truth.json"),
    )
    print(
        f"simulated {len(cohort.profiles)} users, {len(cohort.logs)} logs, "
        f"planted positive rate {cohort.truth.positive_rate():.3f} -> {args.out_dir}"
    )
    return 0


def cmd_prepare(args) -> int:
    schema = (
        FeatureSchema.from_json(open(args.schema).read()) if args.schema else default_schema()
    )
    report = QcReport()
    logs = ingest_mod.read_log_file(args.logs, schema, report, strict=args.strict)
    profiles = ingest_mod.read_profile_file(args.profiles) if args.profiles else {}
    grouped = cycles_mod.group_by_user(logs)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    dataset = prepare_dataset(
        ((user_logs, profiles.get(uid)) for uid, user_logs in grouped.items()),
        schema=schema,
        split_seed=args.split_seed,
        fractions=fractions,
        with_history=args.with_history,
        report=report,
        min_logs=args.min_logs,
    )
    save_dataset(dataset, args.out)
    if args.schema_out:
        with open(args.schema_out, "w") as fh:
            fh.write(schema.to_json() + "\n")
    if args.qc_report:
        with open(args.qc_report, "w") as fh:
            fh.write(report.to_json() + "\n")
    if not report.conserved():
        raise RuntimeError("QC accounting violated: read != retained + dropped")
    print(
        f"prepared {len(dataset)} examples from {len(dataset.user_ids)} users; "
        f"positive fraction {dataset.meta['positive_fraction']:.3f} -> {args.out}"
    )
    return 0


def _hyper_from_args(args) -> Hyper:
    return Hyper(
        learning_rate=args.learning_rate,
        hidden_size=args.hidden_size,
        num_layers=args.num_layers,
        batch_size=args.batch_size,
        dropout=args.dropout,
        l2=args.l2,
        embed_size=args.embed_size,
    )


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    if args.grid:
        grid = HyperGrid(**json.load(open(args.grid)))
        result = trainer_mod.grid_search(
            args.model, dataset, grid, args.seed, args.epochs, args.patience,
            args.optimizer, n_jobs=args.threads,
        )
        hyper, report = result.best, result.best_report
        model, report = trainer_mod.train(
            args.model, dataset, hyper, args.seed, args.epochs, args.patience, args.optimizer
        )
        if args.grid_report:
            with open(args.grid_report, "w") as fh:
                fh.write(result.to_json() + "\n")
    else:
        model, report = trainer_mod.train(
            args.model, dataset, _hyper_from_args(args), args.seed, args.epochs,
            args.patience, args.optimizer,
        )
    save_checkpoint(model, args.out, extra={"data": os.path.basename(args.data)})
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report.to_json() + "\n")
    if args.timing:
        with open(args.timing, "w") as fh:
            json.dump({"wall_clock_sec": report.wall_clock_sec}, fh)
            fh.write("\n")
    line = (
        f"trained {args.model}: best val AUC {report.best_val_auc():.4f} "
        f"at epoch {report.chosen_epoch} -> {args.out}"
    )
    if args.model == "bms":
        line += f"; learned risks {json.dumps(model.risks(), sort_keys=True)}"
    print(line)
    return 0


def cmd_evaluate(args) -> int:
    dataset = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    idx = dataset.indices_for(SPLIT_NAMES.index(args.split))
    scores = trainer_mod.predict_dataset(model, dataset, idx)
    result = metrics_mod.evaluate(scores, dataset.label[idx], model.variant)
    payload = result.to_dict()
    if model.variant == "bms":
        payload["learned_risks"] = model.risks()
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(metrics_mod.results_to_csv([result]))
    print(
        f"{model.variant} on {args.split}: AUC {result.auc:.4f}; "
        f"single-cycle p_preg top {result.top.positive_rate:.3f} vs "
        f"bottom {result.bottom.positive_rate:.3f}; six-cycle "
        f"{result.top.six_cycle_rate:.3f} vs {result.bottom.six_cycle_rate:.3f}"
    )
    return 0


def cmd_explain(args) -> int:
    dataset = load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    batch = split_batch(dataset, args.split, with_history=model.variant == "embedding")
    curves = []
    if args.bundle:
        linear = model.linear_params if model.variant == "logistic" else None
        curves = explain_mod.sex_trend_bundle(model, batch, linear, model.schema)
    else:
        if not args.feature:
            raise ValueError("--feature is required unless --bundle is given")
        if args.method == "coefficients":
            if model.variant != "logistic":
                raise ValueError("coefficient trends exist only for the logistic model")
            curves = [explain_mod.lr_trend(model.linear_params, model.schema, args.feature)]
        else:
            curves = [explain_mod.trend_curve(model, batch, args.feature)]
    csv_text = explain_mod.trends_to_csv(curves)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv_text)
        print(f"wrote {sum(len(c.values) for c in curves)} trend rows -> {args.out}")
    else:
        print(csv_text, end="")
    return 0


def _synthetic_batch(schema: FeatureSchema, batch_size: int, seed: int, with_history: bool) -> Batch:
    """Small random batch for gradient checking: plausible shapes, no files."""
    rng = np.random.default_rng(seed)
    D = schema.day_width
    day = (rng.random((batch_size, 24, D)) < 0.08).astype(float)
    for f in schema.continuous_features:
        present = rng.random((batch_size, 24)) < 0.4
        day[:, :, schema.continuous_presence_slot[f]] = present
        day[:, :, schema.continuous_value_slot[f]] = present * rng.normal(
            0, 0.5, (batch_size, 24)
        )
    mask = np.ones((batch_size, 24))
    for b in range(batch_size):
        if rng.random() < 0.5:
            mask[b, rng.integers(18, 24) :] = 0.0
    day *= mask[:, :, None]
    user = rng.normal(0, 0.5, (batch_size, schema.user_width))
    label = (rng.random(batch_size) < 0.5).astype(float)
    history = rng.normal(0, 0.3, (batch_size, 180, D)) * (
        rng.random((batch_size, 180, 1)) < 0.3
    ) if with_history else None
    return Batch(day=day, mask=mask, user=user, label=label, history=history)


def cmd_gradcheck(args) -> int:
    from .neural import grad_check

    schema = default_schema()
    hyper = {
        "hidden_size": args.hidden_size,
        "num_layers": args.num_layers,
        "dropout": args.dropout,
        "l2": args.l2,
    }
    tolerance = args.tolerance or (1e-6 if args.model == "logistic" else 1e-4)
    model = build_model(args.model, schema, hyper, args.seed)
    batch = _synthetic_batch(schema, args.batch_size, args.seed, args.model == "embedding")
    report = grad_check(model, batch, tolerance, seed=args.seed)
    print(f"{args.model}: {report}")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="pregpred",
        description="Cycle-tracking pregnancy prediction pipeline",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    sub_map = {}

    def add(name, func, help_text):
        p = subs.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON file of defaults for this subcommand")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker threads for parallel sections")
        sub_map[name] = p
        return p

    p = add("simulate", cmd_simulate, "generate a synthetic cohort with planted truth")
    p.add_argument("--users", type=int, default=None, help="number of users")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kind", choices=synth_mod.GENERATIVE_KINDS, default=None,
                   help="outcome process")
    p.add_argument("--spec-json", help="JSON file overriding any WorldSpec field")
    p.add_argument("--out-dir", default="cohort", help="output directory")

    p = add("prepare", cmd_prepare, "ingest logs and emit the encoded dataset")
    p.add_argument("--logs", required=True, help="log file (csv/jsonl, optionally .gz)")
    p.add_argument("--profiles", help="profile csv")
    p.add_argument("--schema", help="schema JSON (default: built-in)")
    p.add_argument("--out", default="dataset.bin")
    p.add_argument("--schema-out", help="write the schema JSON here")
    p.add_argument("--qc-report", help="write the QC report JSON here")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--fractions", default="0.8,0.1,0.1", help="train,val,test user fractions")
    p.add_argument("--with-history", action="store_true",
                   help="store per-user history for the embedding model")
    p.add_argument("--min-logs", type=int, default=ingest_mod.MIN_LOGS_PER_USER)
    p.add_argument("--strict", action="store_true", help="abort on malformed input lines")

    p = add("train", cmd_train, "train one model variant")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, choices=MODEL_VARIANTS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="checkpoint.bin")
    p.add_argument("--report", help="write the training report JSON here")
    p.add_argument("--timing", help="write wall-clock timing sidecar here")
    p.add_argument("--grid", help="JSON file with HyperGrid lists; runs grid search")
    p.add_argument("--grid-report", help="write all grid-point reports here")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--hidden-size", type=int, default=32)
    p.add_argument("--num-layers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--embed-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--optimizer", choices=list(trainer_mod.OPTIMIZERS), default="adam")

    p = add("evaluate", cmd_evaluate, "score a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--out", help="write the evaluation JSON here")
    p.add_argument("--csv", help="write the summary CSV here")

    p = add("explain", cmd_explain, "perturbation or coefficient time trends")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--feature", help="binary feature name, e.g. sex:unprotected")
    p.add_argument("--method", choices=("perturb", "coefficients"), default="perturb")
    p.add_argument("--bundle", action="store_true",
                   help="emit trends for all three sex-act features")
    p.add_argument("--out", help="write CSV here (default: stdout)")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    p.add_argument("--model", required=True, choices=MODEL_VARIANTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-size", type=int, default=8)
    p.add_argument("--num-layers", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--tolerance", type=float, default=None,
                   help="default 1e-6 for logistic, 1e-4 for recurrent variants")

    return parser, sub_map


SEED_REQUIRED = {"simulate", "train"}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sub_map = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = json.load(fh)
        sub_map[args.command].set_defaults(**config)
        args = parser.parse_args(argv)
    if args.command in SEED_REQUIRED and args.seed is None:
        sub_map[args.command].error("--seed is required")  # exits with code 2
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
