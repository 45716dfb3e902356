"""Command-line entry point.

Subcommands: index, fill, train-ranker, train-coherence, build-data,
build-backward-data, eval, bench, sample. All runs are seeded and outputs are
byte-identical across reruns with the same flags (timing files excluded).
Exit codes: 0 ok, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import coherence as coh
from . import corpus, evalkit, extractor, index, rankers, readers, supervision

ENDPOINT_ENV = "TABLEFILL_READER_ENDPOINT"


class ValidationError(Exception):
    pass


def _add_reader_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--reader", choices=["stub", "remote"], default="stub")
    parser.add_argument("--endpoint", default=None,
                        help=f"reader service URL (default: ${ENDPOINT_ENV})")
    parser.add_argument("--reader-seed", type=int, default=0)
    parser.add_argument("--dim", type=int, default=16, help="stub embedding dimension")


def _make_reader(args) -> readers.ReaderContract:
    if args.reader == "remote":
        endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise ValidationError(
                f"remote reader needs --endpoint or ${ENDPOINT_ENV}"
            )
        return readers.RemoteReader(endpoint)
    if args.endpoint:
        raise ValidationError("--endpoint only applies to --reader remote")
    return readers.StubReader(seed=args.reader_seed, d=args.dim)


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k1", type=int, default=30)
    parser.add_argument("--k2", type=int, default=30)
    parser.add_argument("--k3", type=int, default=5)
    parser.add_argument("--boost-weight", type=float, default=1.0)
    parser.add_argument("--jobs", type=int, default=1)


def _pipeline_config(args) -> rankers.PipelineConfig:
    cfg = rankers.PipelineConfig(
        k1=args.k1, k2=args.k2, k3=args.k3, boost_weight=args.boost_weight
    )
    cfg.validate()
    return cfg


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ValidationError(f"{what} not found: {path}")
    return path


def _load_single_table(path: str) -> extractor.PartialTable:
    tables = extractor.load_tables(_require_file(path, "table file"))
    if len(tables) != 1:
        raise ValidationError(f"{path}: expected exactly one table, found {len(tables)}")
    return tables[0]


def _load_ranker_params(args, reader: readers.ReaderContract) -> rankers.MLPParams:
    if args.ranker_params:
        return rankers.load_params(_require_file(args.ranker_params, "ranker params"))
    # untrained mode: zero weights score every candidate identically
    return rankers.zero_mlp(5 * reader.dim(), 1)


def cmd_index(args) -> int:
    cfg = corpus.ChunkConfig(chunk_size=args.chunk_size, stride=args.stride)
    cfg.validate()
    docs = corpus.read_corpus_jsonl(_require_file(args.corpus, "corpus file"))
    idx = index.build_index(corpus.chunk_corpus(docs, cfg))
    index.save_index(idx, args.out)
    print(f"indexed {idx.size} passages from {args.corpus} -> {args.out}")
    return 0


def cmd_fill(args) -> int:
    idx = index.load_index(_require_file(args.index, "index file"))
    reader = _make_reader(args)
    table = _load_single_table(args.table)
    cfg = _pipeline_config(args)
    ranker_params = _load_ranker_params(args, reader)
    if args.no_coherence:
        cells, report = extractor.fill_table_baseline(
            table, idx, reader, ranker_params, cfg, jobs=args.jobs
        )
    else:
        if args.coherence_params:
            coherence_params = coh.load_coherence(
                _require_file(args.coherence_params, "coherence params")
            )
        else:
            coherence_params = coh.zero_coherence(reader.dim())
        cells, report = extractor.fill_table(
            table, idx, reader, ranker_params, coherence_params, cfg, jobs=args.jobs
        )
    extractor.write_cells_jsonl(cells, args.out)
    if args.timing_out:
        with open(args.timing_out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    filled = sum(1 for c in cells if c.status == "filled")
    print(f"filled {filled}/{len(cells)} cells -> {args.out}")
    return 0


def _examples_from_jsonl(path, idx, reader):
    examples = []
    for rec in supervision.read_training_jsonl(path):
        question = rec["question"]
        feats = {"positives": [], "negatives": []}
        for kind in ("positives", "negatives"):
            for span_rec in rec[kind]:
                passage = idx.store.get(span_rec["passage_id"])
                if passage is None:
                    raise ValidationError(
                        f"{path}: unknown passage {span_rec['passage_id']!r}"
                    )
                span = readers.AnswerSpan.make(
                    passage.passage_id,
                    span_rec["start"],
                    span_rec["end"],
                    " ".join(passage.tokens[span_rec["start"]: span_rec["end"] + 1]),
                    0.0,
                    0.0,
                )
                encoding = reader.encode(question, passage)
                feats[kind].append(rankers.featurize(encoding, span).h)
        examples.append(
            rankers.RankerExample(
                question=question,
                pos_features=feats["positives"],
                neg_features=feats["negatives"],
            )
        )
    return examples


def cmd_train_ranker(args) -> int:
    idx = index.load_index(_require_file(args.index, "index file"))
    reader = _make_reader(args)
    examples = _examples_from_jsonl(
        _require_file(args.training_data, "training data"), idx, reader
    )
    params = rankers.init_mlp(
        5 * reader.dim(), args.hidden, args.seed, dropout_rate=args.dropout
    )
    result = rankers.train_answer_ranker(
        params, examples, epochs=args.epochs, lr=args.lr, rng_seed=args.seed
    )
    rankers.save_params(result.params, args.out)
    first = result.loss_trace[0] if result.loss_trace else float("nan")
    last = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(
        f"trained answer ranker on {len(examples) - result.skipped} questions "
        f"({result.skipped} skipped); loss {first:.4f} -> {last:.4f}; saved {args.out}"
    )
    return 0


def _collect_coherence_questions(tables, idx, reader, ranker_params, cfg, threshold):
    """Run the funnel on training rows and label candidates by fuzzy match."""
    questions = []
    for table in tables:
        for row in table.rows:
            if row.object is None:
                continue
            question = table.question_for(row)
            query = index.preprocess_question(
                question, row.subject, boost_weight=cfg.boost_weight
            )
            hits = index.retrieve(idx, query, cfg.k1)
            ranked_passages = rankers.rank_passages(reader, question, hits, cfg.k2, idx.store)
            with_enc = [
                (p, a, reader.encode(question, p))
                for p, a in ranked_passages
                if not a.is_null
            ]
            ranked = rankers.answer_rank(ranker_params, question, with_enc, len(with_enc))
            examples = []
            for cand in ranked:
                passage = idx.store[cand.passage_id]
                try:
                    inputs, _ = coh.build_coherence_inputs(
                        reader, question, row.subject, passage, cand.answer
                    )
                except (readers.ReaderError, ValueError):
                    continue
                label = supervision.fuzzy_f1(cand.answer.text, row.object) >= threshold
                examples.append(coh.CoherenceExample(inputs=inputs, label=label))
            if examples:
                questions.append(examples)
    return questions


def cmd_train_coherence(args) -> int:
    idx = index.load_index(_require_file(args.index, "index file"))
    reader = _make_reader(args)
    tables = extractor.load_tables(_require_file(args.tables, "tables file"))
    cfg = rankers.PipelineConfig(
        k1=args.k1, k2=args.k2, k3=args.k3, m=args.m, boost_weight=args.boost_weight
    )
    cfg.validate()
    ranker_params = _load_ranker_params(args, reader)
    questions = _collect_coherence_questions(
        tables, idx, reader, ranker_params, cfg, args.f1_threshold
    )
    params = coh.init_coherence(reader.dim(), args.hidden, args.seed)
    result = coh.train_coherence(
        params, questions, m=args.m, epochs=args.epochs, lr=args.lr, seed=args.seed
    )
    coh.save_coherence(result.params, args.out)
    first = result.loss_trace[0] if result.loss_trace else float("nan")
    last = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(
        f"trained coherence on {len(questions) - result.dropped_questions} questions "
        f"({result.dropped_questions} dropped); loss {first:.4f} -> {last:.4f}; saved {args.out}"
    )
    return 0


def cmd_build_data(args) -> int:
    idx = index.load_index(_require_file(args.index, "index file"))
    reader = _make_reader(args)
    tables = extractor.load_tables(_require_file(args.tables, "tables file"))
    cfg = supervision.SupervisionConfig(
        retrieve_k=args.retrieve_k,
        f1_threshold=args.f1_threshold,
        min_pos=args.min_pos,
        n_neg=args.n_neg,
        boost_weight=args.boost_weight,
    )
    result = supervision.build_training_set(tables, idx, reader, cfg)
    supervision.write_training_jsonl(result.rows, args.out)
    print(
        f"labeled {len(result.rows)} training questions "
        f"({result.skipped} rows skipped) -> {args.out}"
    )
    return 0


def cmd_build_backward_data(args) -> int:
    idx = index.load_index(_require_file(args.index, "index file"))
    reader = _make_reader(args)
    tables = extractor.load_tables(_require_file(args.tables, "tables file"))
    examples = []
    skipped = 0
    for table in tables:
        for row in table.rows:
            if row.object is None:
                skipped += 1
                continue
            question = table.question_for(row)
            query = index.preprocess_question(
                question, row.subject, boost_weight=args.boost_weight
            )
            hits = index.retrieve(idx, query, args.retrieve_k)
            passages = [idx.store[h.passage_id] for h in hits]
            found, missed = coh.build_backward_training_data(
                reader,
                [(question, row.subject, row.object)],
                passages,
                supervision.fuzzy_f1,
                f1_threshold=args.f1_threshold,
            )
            examples.extend(found)
            skipped += missed
    coh.save_backward_examples(examples, args.out)
    print(f"kept {len(examples)} backward examples ({skipped} skipped) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    table = _load_single_table(args.table)
    cells = []
    with open(_require_file(args.filled, "filled cells file"), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                cells.append(extractor.cell_from_dict(json.loads(line)))
    result = evalkit.evaluate(cells, table)
    payload = result.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    print(f"EM {result.em:.2f} F1 {result.f1:.2f} over {len(result.per_question)} questions")
    return 0


def cmd_bench(args) -> int:
    idx = index.load_index(_require_file(args.index, "index file"))
    reader = _make_reader(args)
    table = _load_single_table(args.table)
    cfg = _pipeline_config(args)
    ranker_params = _load_ranker_params(args, reader)
    if args.coherence_params:
        coherence_params = coh.load_coherence(
            _require_file(args.coherence_params, "coherence params")
        )
    else:
        coherence_params = coh.zero_coherence(reader.dim())

    def pipeline(t):
        return extractor.fill_table(t, idx, reader, ranker_params, coherence_params, cfg)

    report = evalkit.bench_throughput(table, pipeline, repeats=args.repeats)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for stage in evalkit.BENCH_STAGES:
        print(f"{stage}: {report[stage]['qps']:.2f} q/s")
    return 0


def cmd_sample(args) -> int:
    tables = extractor.load_tables(_require_file(args.tables, "tables file"))
    spec = evalkit.SamplerSpec(
        mode=args.mode,
        fraction=args.fraction,
        relationship_count=args.relationship_count,
        rows_per_relation=args.rows_per_relation,
        seed=args.seed,
    )
    sampled = evalkit.sample_training(tables, spec)
    payload = [
        {
            "relationship_id": t.relationship_id,
            "key_attribute": t.key_attribute,
            "question_template": t.question_template,
            "rows": [{"subject": r.subject, "object": r.object} for r in t.rows],
        }
        for t in sampled
    ]
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
    total = sum(len(t.rows) for t in sampled)
    print(f"sampled {total} rows across {len(sampled)} relationships -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tablefill",
        description="Fill missing cells of a partially filled relation from a document corpus.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="chunk a corpus and build the passage index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-size", type=int, default=100)
    p.add_argument("--stride", type=int, default=50)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("fill", help="fill a table's missing cells")
    p.add_argument("--index", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timing-out", default=None)
    p.add_argument("--ranker-params", default=None)
    p.add_argument("--coherence-params", default=None)
    p.add_argument("--no-coherence", action="store_true")
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    _add_reader_flags(p)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_fill)

    p = sub.add_parser("train-ranker", help="train the answer scoring network")
    p.add_argument("--training-data", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.1)
    _add_reader_flags(p)
    p.set_defaults(func=cmd_train_ranker)

    p = sub.add_parser("train-coherence", help="train the coherence scorer")
    p.add_argument("--tables", required=True, help="training tables with objects")
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ranker-params", default=None)
    p.add_argument("--m", type=int, default=7)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--f1-threshold", type=float, default=0.7)
    _add_reader_flags(p)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_train_coherence)

    p = sub.add_parser("build-data", help="build a distant-supervision training set")
    p.add_argument("--tables", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--retrieve-k", type=int, default=150)
    p.add_argument("--f1-threshold", type=float, default=0.7)
    p.add_argument("--min-pos", type=int, default=1)
    p.add_argument("--n-neg", type=int, default=5)
    p.add_argument("--boost-weight", type=float, default=1.0)
    _add_reader_flags(p)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser(
        "build-backward-data", help="synthesize backward-reader training data"
    )
    p.add_argument("--tables", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--retrieve-k", type=int, default=150)
    p.add_argument("--f1-threshold", type=float, default=0.7)
    p.add_argument("--boost-weight", type=float, default=1.0)
    _add_reader_flags(p)
    p.set_defaults(func=cmd_build_backward_data)

    p = sub.add_parser("eval", help="score filled cells against ground truth")
    p.add_argument("--filled", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="staged throughput benchmark")
    p.add_argument("--index", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--ranker-params", default=None)
    p.add_argument("--coherence-params", default=None)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    _add_reader_flags(p)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sample", help="subsample training tables")
    p.add_argument("--tables", required=True)
    p.add_argument("--out", required=True)
    p.add_argument(
        "--mode",
        choices=["changing_rows", "changing_relationships"],
        required=True,
    )
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--relationship-count", type=int, default=None)
    p.add_argument("--rows-per-relation", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
