"""
Command-line entry point.

    clinical-lm [global options] <command> [options]

Commands: preprocess, deidentify, train-tokenizer, pretrain,
finetune <task>, evaluate <task>, predict <task>, inspect-checkpoint,
gen-fixtures. Every run writes ``<out>/<command>.manifest.json`` with the
resolved configuration, seed, version and the sha256 of every input file.

Exit status is 0 on success, 1 when validation or the run fails (one line
``error=<key> <message>`` on stderr) and 2 for usage errors.
"""
import argparse
import contextlib
import json
import logging
import os
import signal
import sys
import threading
from typing import Any, Callable, Dict, List, Optional, Sequence

from clinical_lm import __version__
from clinical_lm.conf import (
    PRECISIONS,
    TRANSPORTS,
    CorpusConfig,
    FinetuneConfig,
    ParallelConfig,
    PretrainConfig,
    QaWindowing,
    load_config_file,
    parse_config_text,
    resolve_run_config,
)
from clinical_lm.corpus.deid import RuleSet
from clinical_lm.corpus.documents import read_clean_documents, read_raw_documents, write_documents
from clinical_lm.corpus.pipeline import deidentify_documents, preprocess_corpus
from clinical_lm.errors import ClinicalLMError, ConfigError, classify_exception
from clinical_lm.model.checkpoint import load_checkpoint, save_checkpoint
from clinical_lm.model.config import count_params, model_config_from_run, nearest_preset
from clinical_lm.parallel.launcher import load_hosts
from clinical_lm.tasks import TASKS
from clinical_lm.tensor import set_default_dtype
from clinical_lm.tokenizer import load_vocabulary, save_vocabulary, train_bpe
from clinical_lm.utils import atomic_write_json, sha256_file, write_jsonl

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
_DTYPES = {"f32": "float32", "f64": "float64"}

# CLI dest -> config key, for options that feed the resolved run config.
_CONFIG_OPTIONS = (
    "seed", "precision", "out", "log_level", "model_parallel", "data_parallel",
    "transport", "hosts", "trace", "preset", "vocab_size", "max_steps",
    "batch_size", "eval_every", "patience", "lr", "mask_mode", "sample_fraction",
    "workers", "rules", "finetune_steps", "finetune_batch_size", "finetune_lr",
    "ner_mode", "shard_embeddings",
)


class RunContext:
    """Resolved config, output directory, stop flag and the manifest inputs of one run."""

    def __init__(self, command: str, config: Dict[str, Any], argv: Sequence[str]):
        self.command = command
        self.config = config
        self.argv = list(argv)
        self.out = str(config["out"])
        self.stop = threading.Event()
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    def input(self, path: Optional[str], flag: str) -> str:
        """Validate an input path exists and record its hash for the manifest."""
        if not path:
            raise ConfigError(f"{flag} is required for {self.command}")
        if not os.path.isfile(path):
            raise ConfigError(f"{flag} {path} does not exist", error_key="not_found")
        self.inputs[path] = sha256_file(path)
        return path

    def output(self, name: str) -> str:
        os.makedirs(self.out, exist_ok=True)
        path = os.path.join(self.out, name)
        self.outputs[name] = path
        return path

    def write_manifest(self) -> str:
        path = os.path.join(self.out, f"{self.command}.manifest.json")
        os.makedirs(self.out, exist_ok=True)
        atomic_write_json(path, {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
        })
        return path


@contextlib.contextmanager
def _stop_on_signals(stop: threading.Event):
    """SIGINT / SIGTERM set ``stop`` so training can checkpoint and exit."""
    if threading.current_thread() is not threading.main_thread():
        yield
        return

    def _handler(signum, _frame):
        logger.warning(f"Received signal {signum}; finishing the current step")
        stop.set()

    previous = {sig: signal.signal(sig, _handler) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        yield
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)


# Commands

def cmd_preprocess(run: RunContext, args) -> None:
    cfg = CorpusConfig.from_mapping(run.config)
    rules = RuleSet.from_file(run.input(cfg.rules, "--rules") if cfg.rules else None)
    docs = []
    for path in args.input:
        docs.extend(read_raw_documents(run.input(path, "--input")))
    clean, deid_report, corpus_report = preprocess_corpus(docs, cfg, rules)
    write_documents(run.output("corpus.jsonl"), clean)
    atomic_write_json(run.output("corpus_report.json"), corpus_report.to_dict())
    atomic_write_json(run.output("deid_report.json"), deid_report.to_dict())


def cmd_deidentify(run: RunContext, args) -> None:
    rules_path = run.config.get("rules")
    rules = RuleSet.from_file(run.input(rules_path, "--rules") if rules_path else None)
    docs = []
    for path in args.input:
        docs.extend(read_raw_documents(run.input(path, "--input")))
    out, report = deidentify_documents(docs, rules)
    write_documents(run.output("deidentified.jsonl"), out)
    atomic_write_json(run.output("deid_report.json"), report.to_dict())


def _sentence_texts(path: str):
    for doc in read_clean_documents(path):
        yield from doc.sentence_texts()


def cmd_train_tokenizer(run: RunContext, args) -> None:
    corpus = run.input(args.corpus, "--corpus")
    vocab = train_bpe(_sentence_texts(corpus), int(run.config["vocab_size"]), progress=args.progress)
    save_vocabulary(vocab, run.output("vocab.txt"))


def cmd_pretrain(run: RunContext, args) -> None:
    from clinical_lm.pretraining import pretrain, split_documents, tokenize_documents
    from clinical_lm.pretraining.parallel import ParallelPretrainJob, pretrain_parallel

    vocab = load_vocabulary(run.input(args.vocab, "--vocab"))
    docs = list(read_clean_documents(run.input(args.corpus, "--corpus")))
    model_cfg = model_config_from_run(run.config, vocab_size=len(vocab))
    cfg = PretrainConfig.from_mapping(run.config)
    parallel = ParallelConfig.from_mapping(run.config)
    train, val = split_documents(tokenize_documents(docs, vocab), cfg.val_fraction)
    if parallel.world_size > 1:
        hosts = load_hosts(run.input(parallel.hosts, "--hosts")) if parallel.hosts else None
        job = ParallelPretrainJob(model_cfg, train, val, cfg, parallel, _DTYPES[run.config["precision"]])
        result = pretrain_parallel(job, hosts=hosts)
    else:
        result = pretrain(model_cfg, train, val, cfg, stop_event=run.stop, progress=args.progress)
    ckpt = result.checkpoint
    save_checkpoint(run.output("checkpoint.bin"), ckpt.config, ckpt.params, ckpt.meta)
    result.log.write_csv(run.output("train_log.csv"))
    atomic_write_json(run.output("pretrain_summary.json"), {
        "steps": result.steps,
        "best_step": result.best_step,
        "best_val_loss": result.best_val_loss,
        "initial_val_loss": result.initial_val_loss,
        "stopped_early": result.stopped_early,
        "interrupted": result.interrupted,
        "masked_accuracy": result.masked_accuracy,
    })


def _finetune_config(run: RunContext) -> FinetuneConfig:
    return FinetuneConfig.from_mapping(run.config)


def cmd_finetune(run: RunContext, args) -> None:
    from clinical_lm import tasks
    from clinical_lm.tasks import ner, nli, qa, relation, sts

    vocab = load_vocabulary(run.input(args.vocab, "--vocab"))
    examples = tasks.read_task_examples(args.task, run.input(args.train, "--train"))
    checkpoint = load_checkpoint(run.input(args.checkpoint, "--checkpoint")) if args.checkpoint else None
    model_cfg = None if checkpoint else model_config_from_run(run.config, vocab_size=len(vocab))
    cfg = _finetune_config(run)
    common = dict(model_cfg=model_cfg, progress=args.progress)
    if args.task == "ner":
        model = ner.finetune_ner(checkpoint, vocab, examples, cfg, **common).to_task_model()
    elif args.task == "re":
        model = relation.finetune_re(checkpoint, vocab, examples, cfg, **common).model
    elif args.task == "sts":
        model = sts.finetune_sts(checkpoint, vocab, examples, cfg, **common).model
    elif args.task == "nli":
        model = nli.finetune_nli(checkpoint, vocab, examples, cfg, **common).model
    else:
        windowing = QaWindowing.from_mapping(run.config)
        model = qa.finetune_qa(checkpoint, vocab, examples, cfg, windowing, **common).model
    tasks.save_task_model(run.output(f"{args.task}.ckpt"), model, seed=cfg.seed)


def _predict(task: str, model, vocab, examples) -> List[Dict[str, Any]]:
    """Task-shaped prediction rows, each with its scores."""
    from clinical_lm.tasks import ner, nli, qa, relation, sts

    rows: List[Dict[str, Any]] = []
    if task == "ner":
        tagger = ner.NerTagger.from_task_model(model)
        for ex in examples:
            spans, scores = tagger.predict(vocab, ex.tokens)
            labels = ner.bio_encode(len(ex.tokens), _first_per_token(spans))
            rows.append({"tokens": ex.tokens, "labels": labels, "scores": scores,
                         "spans": [list(s.as_tuple()) for s in spans]})
    elif task in ("re", "nli"):
        classifier = (relation.RelationClassifier if task == "re" else nli.InferenceClassifier)(model)
        probs = classifier.predict_proba(vocab, examples) if examples else []
        for ex, p in zip(examples, probs):
            row = dict(vars(ex))
            row["label"] = classifier.labels[int(p.argmax())]
            row["scores"] = {lab: float(v) for lab, v in zip(classifier.labels, p)}
            rows.append(row)
    elif task == "sts":
        scores = sts.SimilarityScorer(model).predict(vocab, examples) if examples else []
        rows = [{"a": ex.a, "b": ex.b, "score": s} for ex, s in zip(examples, scores)]
    else:
        reader = qa.QaReader(model)
        for ex in examples:
            pred = reader.predict(vocab, ex.question, ex.context)
            answers = [] if pred.is_empty else [{"start": pred.start, "text": pred.text}]
            rows.append({"id": ex.id, "question": ex.question, "context": ex.context,
                         "answers": answers, "score": pred.score})
    return rows


def _first_per_token(spans):
    """Drop spans overlapping an earlier one so the union fits one BIO row."""
    taken, kept = set(), []
    for span in sorted(spans):
        cells = set(range(span.start, span.end))
        if not cells & taken:
            kept.append(span)
            taken |= cells
    return kept


def _load_for_inference(run: RunContext, args):
    from clinical_lm import tasks

    vocab = load_vocabulary(run.input(args.vocab, "--vocab"))
    model = tasks.load_task_model(run.input(args.model, "--model"), task=args.task)
    examples = tasks.read_task_examples(args.task, run.input(args.data, "--data"))
    return vocab, model, examples


def cmd_predict(run: RunContext, args) -> None:
    vocab, model, examples = _load_for_inference(run, args)
    rows = _predict(args.task, model, vocab, examples)
    write_jsonl(run.output(f"{args.task}_predictions.jsonl"), rows)


def cmd_evaluate(run: RunContext, args) -> None:
    from clinical_lm import metrics
    from clinical_lm.tasks.ner import Span, bio_decode

    vocab, model, examples = _load_for_inference(run, args)
    rows = _predict(args.task, model, vocab, examples)
    write_jsonl(run.output(f"{args.task}_predictions.jsonl"), rows)
    per_category: Dict[str, Any] = {}
    if args.task == "ner":
        gold = [(n,) + s.as_tuple() for n, ex in enumerate(examples) for s in bio_decode(ex.labels)]
        pred = [(n,) + Span(*s).as_tuple() for n, row in enumerate(rows) for s in row["spans"]]
        values, per_category = metrics.summarize(metrics.span_prf(gold, pred))
    elif args.task == "re":
        result = metrics.label_prf([ex.label for ex in examples], [r["label"] for r in rows])
        values, per_category = metrics.summarize(result)
    elif args.task == "sts":
        values = {"pearson": metrics.pearson([ex.score for ex in examples], [r["score"] for r in rows])}
    elif args.task == "nli":
        values = {"accuracy": metrics.accuracy([ex.label for ex in examples], [r["label"] for r in rows])}
    else:
        values = metrics.qa_scores(
            [[a.text for a in ex.answers] for ex in examples],
            [r["answers"][0]["text"] if r["answers"] else "" for r in rows],
        )
    metrics.write_metrics(run.output(f"{args.task}_metrics.json"), args.task, values, per_category,
                          extra={"examples": len(examples), "seed": run.seed})


def cmd_inspect_checkpoint(run: RunContext, args) -> None:
    ckpt = load_checkpoint(run.input(args.path, "path"), requires_grad=False)
    preset, exact = nearest_preset(ckpt.config)
    report = {
        "path": args.path,
        "version": ckpt.version,
        "model": ckpt.config.to_dict(),
        "preset": preset,
        "preset_exact": exact,
        "encoder_params": count_params(ckpt.config),
        "stored_params": int(sum(t.size for t in ckpt.params.values())),
        "tensors": len(ckpt.params),
        "meta": ckpt.meta,
    }
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_gen_fixtures(run: RunContext, args) -> None:
    from clinical_lm.fixtures import DEFAULT_SIZES, write_fixtures

    sizes = {k: getattr(args, k) for k in DEFAULT_SIZES if getattr(args, k, None) is not None}
    for name, path in write_fixtures(run.out, seed=run.seed, sizes=sizes).items():
        run.outputs[name] = path


# Parser

def _add_global_options(parser: argparse.ArgumentParser, default: Any) -> None:
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=default)
    g.add_argument("--config", default=default, help="key = value config file")
    g.add_argument("--set", action="append", default=default, metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    g.add_argument("--model-parallel", type=int, default=default)
    g.add_argument("--data-parallel", type=int, default=default)
    g.add_argument("--transport", choices=TRANSPORTS, default=default)
    g.add_argument("--hosts", default=default, help="host:port per line, one per rank")
    g.add_argument("--trace", default=default, help="directory for per-rank collective traces")
    g.add_argument("--precision", choices=PRECISIONS, default=default)
    g.add_argument("--out", default=default)
    g.add_argument("--log-level", default=default)
    g.add_argument("--progress", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clinical-lm", description="Clinical language model pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_global_options(parser, None)
    # sub-command copies must not overwrite values given before the command
    shared = argparse.ArgumentParser(add_help=False)
    _add_global_options(shared, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[shared], help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = command("preprocess", cmd_preprocess, "normalize, deduplicate, de-identify and split documents")
    p.add_argument("--input", action="append", required=True, help="raw JSONL (repeatable)")
    p.add_argument("--rules")
    p.add_argument("--sample-fraction", type=float)
    p.add_argument("--workers", type=int)

    p = command("deidentify", cmd_deidentify, "replace PHI with category tokens")
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--rules")

    p = command("train-tokenizer", cmd_train_tokenizer, "train a BPE vocabulary")
    p.add_argument("--corpus", required=True, help="preprocessed corpus JSONL")
    p.add_argument("--vocab-size", type=int)

    p = command("pretrain", cmd_pretrain, "pretrain the encoder with MLM and sentence order")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--preset")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mask-mode", choices=("mask", "bert"))
    p.add_argument("--shard-embeddings", action="store_const", const=True)

    p = command("finetune", cmd_finetune, "fine-tune a task head")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--train", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", help="pretrained encoder; a fresh preset encoder when omitted")
    p.add_argument("--preset")
    p.add_argument("--finetune-steps", type=int)
    p.add_argument("--finetune-batch-size", type=int)
    p.add_argument("--finetune-lr", type=float)
    p.add_argument("--ner-mode", choices=("unified", "per-category"))

    for name, handler, text in (("evaluate", cmd_evaluate, "predict and score a labeled dataset"),
                                ("predict", cmd_predict, "write predictions with scores")):
        p = command(name, handler, text)
        p.add_argument("task", choices=TASKS)
        p.add_argument("--data", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--model", required=True, help="fine-tuned task checkpoint")

    p = command("inspect-checkpoint", cmd_inspect_checkpoint, "print a checkpoint's configuration")
    p.add_argument("path")

    p = command("gen-fixtures", cmd_gen_fixtures, "write synthetic corpora and task datasets")
    p.add_argument("--phi-documents", dest="phi_documents", type=int)
    p.add_argument("--pretrain-documents", dest="pretrain_documents", type=int)
    for task in TASKS:
        p.add_argument(f"--{task}", type=int, metavar="N", help=f"{task} examples")
    return parser


def _cli_values(args) -> Dict[str, Any]:
    values = {key: getattr(args, key, None) for key in _CONFIG_OPTIONS}
    if args.set:
        values.update(parse_config_text("\n".join(args.set), source="--set"))
    return values


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        config = resolve_run_config(load_config_file(args.config), _cli_values(args))
    except (ClinicalLMError, OSError) as e:
        print(f"error={classify_exception(e)} {e}", file=sys.stderr)
        return EXIT_FAILURE
    logging.basicConfig(level=str(config["log_level"]).upper(), format=LOG_FORMAT, force=True)
    run_ctx = RunContext(args.command, config, argv)
    if args.config:
        run_ctx.inputs[args.config] = sha256_file(args.config)
    try:
        set_default_dtype(_DTYPES[config["precision"]])
        logger.info(f"Starting {args.command} seed={run_ctx.seed} out={run_ctx.out}")
        with _stop_on_signals(run_ctx.stop):
            args.handler(run_ctx, args)
        run_ctx.write_manifest()
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        print(f"error={classify_exception(e)} {e}", file=sys.stderr)
        return EXIT_FAILURE
    logger.info(f"Finished {args.command} outputs={sorted(run_ctx.outputs)}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
