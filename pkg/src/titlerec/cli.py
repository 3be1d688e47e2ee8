"""Command-line pipeline: ingest -> stats -> train -> recommend -> evaluate.

Each command reads and writes named artifacts inside a working directory,
so every stage can be rerun and inspected on its own. All randomness is
seeded through the config; identical inputs, config and seed produce
byte-identical artifacts.

The holdout convention is shared by every stage that needs it: the final
``holdout_days`` calendar days of the joined transaction log are reserved
as ground truth, and training, customer profiles and the popularity
ranking used for serving all draw from the remaining earlier window.

Artifacts (inside the workdir):
    prepared_articles.tsv  cleaned one-line text per article
    transactions.tsv       catalog-joined purchase log
    sessions.tsv           per-customer-day purchase groups (full log)
    popularity.txt         full-log popularity ranking, one id per line
    ingest_summary.json    row counts and the missing-description histogram
    stats.txt              text-length and missing-description histograms
    vocab.txt              one token per line, line number = id
    checkpoint.bin         encoder weights (TRENC001)
    loss_log.tsv           step, mlm, np, total per training step
    index.bin              article embedding matrix (TRECIDX1)
    submission.csv         customer_id,prediction rows
    eval_report.json       map_at_12 / scored / excluded
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import corpus, evaluation, index as index_mod, objectives
from . import encoder as enc
from .errors import (
    CheckpointMismatchError,
    InvalidConfigError,
    MissingArtifactError,
    TitlerecError,
    WorkdirLockedError,
)
from .ioutil import atomic_write_text
from .tokenizer import FIRST_WORD_ID, Vocabulary, build_vocab, encode_single

PREPARED_FILE = "prepared_articles.tsv"
TRANSACTIONS_FILE = "transactions.tsv"
SESSIONS_FILE = "sessions.tsv"
POPULARITY_FILE = "popularity.txt"
INGEST_SUMMARY_FILE = "ingest_summary.json"
STATS_FILE = "stats.txt"
VOCAB_FILE = "vocab.txt"
CHECKPOINT_FILE = "checkpoint.bin"
LOSS_LOG_FILE = "loss_log.tsv"
INDEX_FILE = "index.bin"
SUBMISSION_FILE = "submission.csv"
EVAL_REPORT_FILE = "eval_report.json"
LOCK_FILE = ".lock"

LOSS_LOG_HEADER = "step\tmlm\tnp\ttotal"


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the pipeline; a JSON config file may set any field
    and command-line flags override the file."""

    articles: str | None = None
    transactions: str | None = None
    workdir: str = "workdir"
    customer_list: str | None = None
    text_columns: tuple[str, ...] = corpus.DEFAULT_TEXT_COLUMNS
    min_freq: int = 1
    max_vocab: int = 30000
    max_len: int = 48
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    dropout_rate: float = 0.0
    layer_norm_epsilon: float = 1e-5
    epochs: int = 1
    batch_size: int = 16
    max_steps: int | None = None
    seed: int = 0
    negatives_per_positive: int = 1
    learning_rate: float = 1e-3
    holdout_days: int = 7
    top_n: int = 12
    pooling: str = "mean"

    def encoder_config(self, vocab_size: int) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            d_ff=self.d_ff,
            max_len=self.max_len,
            dropout_rate=self.dropout_rate,
            layer_norm_epsilon=self.layer_norm_epsilon,
        )


def load_config(config_path: str | None, overrides: dict) -> PipelineConfig:
    """Defaults, then config-file values, then non-None flag overrides."""
    known = {f.name for f in fields(PipelineConfig)}
    config = PipelineConfig()
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"{config_path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise InvalidConfigError(f"{config_path}: top-level value must be an object")
        unknown = sorted(set(raw) - known)
        if unknown:
            raise InvalidConfigError(f"{config_path}: unknown option(s) {', '.join(unknown)}")
        if "text_columns" in raw:
            raw["text_columns"] = tuple(raw["text_columns"])
        config = replace(config, **raw)
    applicable = {k: v for k, v in overrides.items() if k in known and v is not None}
    if "text_columns" in applicable:
        applicable["text_columns"] = tuple(applicable["text_columns"])
    return replace(config, **applicable)


@contextmanager
def workdir_lock(workdir: Path):
    """Advisory single-writer lock: a .lock file created exclusively."""
    workdir.mkdir(parents=True, exist_ok=True)
    lock_path = workdir / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise WorkdirLockedError(
            f"{workdir} is in use (remove {lock_path} if no other run is active)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode("ascii"))
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `{produced_by}` first")
    return path


def _write_json(path: Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_ingest(config: PipelineConfig) -> str:
    if config.articles is None or config.transactions is None:
        raise InvalidConfigError("ingest needs --articles and --transactions paths")
    workdir = Path(config.workdir)
    articles = corpus.load_articles(config.articles)
    prepared = corpus.prepare_articles(articles, config.text_columns)
    transactions = corpus.load_transactions(config.transactions)
    joined_pairs, dropped = corpus.join_transactions(transactions, prepared)
    joined = [tx for tx, _ in joined_pairs]
    sessions = corpus.group_sessions(joined)
    popularity = index_mod.popularity_ranking(joined)

    corpus.save_prepared(prepared, workdir / PREPARED_FILE)
    corpus.save_transactions(joined, workdir / TRANSACTIONS_FILE)
    corpus.save_sessions(sessions, workdir / SESSIONS_FILE)
    atomic_write_text(workdir / POPULARITY_FILE, "".join(f"{a}\n" for a in popularity))
    histogram = corpus.missing_description_histogram(articles)
    _write_json(
        workdir / INGEST_SUMMARY_FILE,
        {
            "articles": len(articles),
            "transactions": len(transactions),
            "joined": len(joined),
            "dropped": dropped,
            "sessions": len(sessions),
            "missing_description": {k: list(v) for k, v in histogram.items()},
        },
    )
    return (
        f"articles={len(articles)} transactions={len(transactions)} "
        f"joined={len(joined)} dropped={dropped} sessions={len(sessions)}"
    )


def cmd_stats(config: PipelineConfig) -> str:
    workdir = Path(config.workdir)
    prepared = corpus.load_prepared(_require(workdir / PREPARED_FILE, "titlerec ingest"))
    if not prepared:
        raise MissingArtifactError("prepared corpus is empty; rerun ingest on real data")
    summary = json.loads(
        _require(workdir / INGEST_SUMMARY_FILE, "titlerec ingest").read_text(encoding="utf-8")
    )
    lines = ["# text length histogram", "length\tcount"]
    for length, count in corpus.text_length_histogram(prepared).items():
        lines.append(f"{length}\t{count}")
    lines.append("")
    lines.append("# missing descriptions by index_name")
    lines.append("index_name\twith_desc\twithout_desc")
    for name, (with_desc, without_desc) in sorted(summary["missing_description"].items()):
        lines.append(f"{name}\t{with_desc}\t{without_desc}")
    report = "\n".join(lines) + "\n"
    atomic_write_text(workdir / STATS_FILE, report)
    return report.rstrip("\n")


def cmd_train(config: PipelineConfig) -> str:
    workdir = Path(config.workdir)
    prepared = corpus.load_prepared(_require(workdir / PREPARED_FILE, "titlerec ingest"))
    joined = corpus.load_saved_transactions(
        _require(workdir / TRANSACTIONS_FILE, "titlerec ingest")
    )
    train_window, _ = evaluation.temporal_split(joined, config.holdout_days)

    vocab = build_vocab(prepared, config.min_freq, config.max_vocab)
    vocab.save(workdir / VOCAB_FILE)
    params = enc.init_params(config.encoder_config(len(vocab)), config.seed)
    state = objectives.init_optimizer(params, config.learning_rate)
    rng = np.random.default_rng(config.seed)

    encoded_titles = [encode_single(p.text, vocab, config.max_len) for p in prepared]
    encoded_titles = [
        seq for seq in encoded_titles if any(t >= FIRST_WORD_ID for t in seq.ids)
    ]
    sessions = corpus.group_sessions(train_window)
    inventory = [p.article_id for p in prepared]
    titles_by_id = {p.article_id: p.text for p in prepared}

    batch = config.batch_size
    step_budget = math.inf if config.max_steps is None else config.max_steps
    log_lines = [LOSS_LOG_HEADER]
    steps_done = 0
    last_total = None
    for _ in range(config.epochs):
        if steps_done >= step_budget:
            break
        title_order = rng.permutation(len(encoded_titles)) if encoded_titles else []
        pairs = objectives.sample_pairs(
            sessions, inventory, config.negatives_per_positive, rng
        ) if sessions else []
        encoded_pairs = (
            objectives.encode_training_pairs(pairs, titles_by_id, vocab, config.max_len)
            if pairs
            else []
        )
        pair_order = rng.permutation(len(encoded_pairs)) if encoded_pairs else []
        n_steps = max(
            math.ceil(len(encoded_titles) / batch), math.ceil(len(encoded_pairs) / batch)
        )
        for s in range(n_steps):
            if steps_done >= step_budget:
                break
            masked_batch = []
            for i in title_order[s * batch : (s + 1) * batch]:
                masked_batch.append(objectives.apply_masking(encoded_titles[i], vocab, rng))
            pair_batch = [encoded_pairs[i] for i in pair_order[s * batch : (s + 1) * batch]]
            if not masked_batch and not pair_batch:
                continue
            params, state, record = objectives.train_step(params, state, masked_batch, pair_batch)
            log_lines.append(
                f"{record.step}\t{record.mlm_mean!r}\t{record.np_mean!r}\t{record.total!r}"
            )
            steps_done += 1
            last_total = record.total

    enc.save_checkpoint(params, workdir / CHECKPOINT_FILE)
    atomic_write_text(workdir / LOSS_LOG_FILE, "\n".join(log_lines) + "\n")
    if last_total is None:
        return f"steps=0 vocab={len(vocab)} (no trainable sequences; checkpoint is the seed init)"
    return f"steps={steps_done} vocab={len(vocab)} final_total={last_total:.6f}"


def _load_customer_universe(config: PipelineConfig, joined) -> list[str]:
    universe = {tx.customer_id for tx in joined if tx.customer_id}
    if config.customer_list is not None:
        for line in Path(config.customer_list).read_text(encoding="utf-8").splitlines():
            if line.strip():
                universe.add(line.strip())
    return sorted(universe)


def cmd_recommend(config: PipelineConfig) -> str:
    workdir = Path(config.workdir)
    vocab = Vocabulary.load(_require(workdir / VOCAB_FILE, "titlerec train"))
    params = enc.load_checkpoint(
        _require(workdir / CHECKPOINT_FILE, "titlerec train"),
        expected_config=config.encoder_config(len(vocab)),
    )
    prepared = corpus.load_prepared(_require(workdir / PREPARED_FILE, "titlerec ingest"))
    joined = corpus.load_saved_transactions(
        _require(workdir / TRANSACTIONS_FILE, "titlerec ingest")
    )
    train_window, _ = evaluation.temporal_split(joined, config.holdout_days)

    index_path = workdir / INDEX_FILE
    if index_path.exists():
        article_index = index_mod.load_index(index_path)
        if article_index.article_ids != tuple(p.article_id for p in prepared):
            raise CheckpointMismatchError(
                f"{index_path} does not cover the prepared catalog; delete it to rebuild"
            )
    else:
        article_index = index_mod.build_index(prepared, params, vocab, config.pooling)
        index_mod.save_index(article_index, index_path)

    popularity = index_mod.popularity_ranking(train_window)
    prepared_by_id = {p.article_id: p for p in prepared}
    history: dict[str, list] = {}
    for tx in train_window:
        history.setdefault(tx.customer_id, []).append((tx, prepared_by_id[tx.article_id]))

    rows = []
    for customer_id in _load_customer_universe(config, joined):
        profile = index_mod.customer_profile(
            customer_id, history.get(customer_id, []), article_index
        )
        picks = index_mod.recommend(profile, article_index, popularity, config.top_n)
        rows.append(evaluation.SubmissionRow(customer_id, tuple(picks)))
    evaluation.write_submission(rows, workdir / SUBMISSION_FILE)
    return f"customers={len(rows)} articles={len(article_index)}"


def cmd_evaluate(config: PipelineConfig, spot_check_customer: str | None = None) -> str:
    workdir = Path(config.workdir)
    joined = corpus.load_saved_transactions(
        _require(workdir / TRANSACTIONS_FILE, "titlerec ingest")
    )
    train_window, holdout = evaluation.temporal_split(joined, config.holdout_days)
    truth = evaluation.build_ground_truth(holdout)
    rows = evaluation.read_submission(_require(workdir / SUBMISSION_FILE, "titlerec recommend"))
    report = evaluation.map_at_12(rows, truth)
    _write_json(
        workdir / EVAL_REPORT_FILE,
        {
            "map_at_12": report.map_at_12,
            "scored": report.scored_customer_count,
            "excluded": report.excluded_customer_count,
        },
    )
    summary = (
        f"map_at_12={report.map_at_12:.6f} scored={report.scored_customer_count} "
        f"excluded={report.excluded_customer_count}"
    )
    if spot_check_customer is None:
        return summary
    if config.articles is None:
        raise InvalidConfigError("--customer spot check needs --articles for product types")
    articles = corpus.load_articles(config.articles)
    prepared_by_id = {p.article_id: p for p in corpus.load_prepared(workdir / PREPARED_FILE)}
    purchase_rows = [
        (tx, prepared_by_id[tx.article_id])
        for tx in train_window
        if tx.customer_id == spot_check_customer
    ]
    recommended = [
        (article_id, None)
        for row in rows
        if row.customer_id == spot_check_customer
        for article_id in row.article_ids
    ]
    spot = evaluation.manual_eval_report(
        spot_check_customer, purchase_rows, recommended, articles
    )
    return summary + "\n\n" + spot.rstrip("\n")


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file; flags override it")
    shared.add_argument("--workdir", help="artifact directory (default: workdir)")
    shared.add_argument("--seed", type=int, help="seed for every random draw")
    shared.add_argument("--articles", help="articles CSV path")
    shared.add_argument("--transactions", help="transactions CSV path")
    shared.add_argument("--customer-list", dest="customer_list", help="extra customer ids, one per line")
    shared.add_argument("--text-columns", dest="text_columns", nargs="+", help="catalog text columns to merge")
    shared.add_argument("--min-freq", dest="min_freq", type=int)
    shared.add_argument("--max-vocab", dest="max_vocab", type=int)
    shared.add_argument("--max-len", dest="max_len", type=int)
    shared.add_argument("--d-model", dest="d_model", type=int)
    shared.add_argument("--n-heads", dest="n_heads", type=int)
    shared.add_argument("--n-layers", dest="n_layers", type=int)
    shared.add_argument("--d-ff", dest="d_ff", type=int)
    shared.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    shared.add_argument("--epochs", type=int)
    shared.add_argument("--batch-size", dest="batch_size", type=int)
    shared.add_argument("--max-steps", dest="max_steps", type=int)
    shared.add_argument("--learning-rate", dest="learning_rate", type=float)
    shared.add_argument(
        "--negatives-per-positive", dest="negatives_per_positive", type=int
    )
    shared.add_argument("--holdout-days", dest="holdout_days", type=int)
    shared.add_argument("--top-n", dest="top_n", type=int)
    shared.add_argument("--pooling", choices=["mean", "cls"])

    parser = argparse.ArgumentParser(
        prog="titlerec",
        description="Train a title encoder and serve top-12 article recommendations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[shared], help="load, clean and join the input CSVs")
    sub.add_parser("stats", parents=[shared], help="corpus histograms from the ingest artifacts")
    sub.add_parser("train", parents=[shared], help="build the vocabulary and train the encoder")
    sub.add_parser("recommend", parents=[shared], help="embed, index and write the submission")
    evaluate = sub.add_parser("evaluate", parents=[shared], help="score the submission with MAP@12")
    evaluate.add_argument("--customer", help="also print a manual spot-check report for one customer")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    spot_check = args.pop("customer", None)
    try:
        config = load_config(config_path, args)
        with workdir_lock(Path(config.workdir)):
            if command == "ingest":
                output = cmd_ingest(config)
            elif command == "stats":
                output = cmd_stats(config)
            elif command == "train":
                output = cmd_train(config)
            elif command == "recommend":
                output = cmd_recommend(config)
            else:
                output = cmd_evaluate(config, spot_check)
    except TitlerecError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: InputFileError: {exc}", file=sys.stderr)
        return 1
    print(output)
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
