"""Command-line entry point: ``binsem <stage> ...``.

Stages read and write the documented formats so that each one's output feeds
the next:

    ingest -> records.jsonl -> normalize -> nf.jsonl -> vocab -> vocab.tsv
    pretrain -> checkpoint dir -> make-dataset -> dataset dir -> finetune
    -> task checkpoint dir -> predict / eval

Exit codes: 0 on success, 1 on invalid input (schema, precondition, vocabulary
mismatch), 2 on any other failure.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field

from . import corpus, encoder as enc, heads, ingest, metrics
from .errors import ValidationError
from .normalizer import NormMode, load_nfs, normalize_function, save_nfs

log = logging.getLogger("binsem")

PROFILES = ("desk", "paper")
CLI_TASKS = ("binsim", "compiler", "optlevel", "optlevel-gcc", "optlevel-clang")
RESOLVED_CONFIG = "resolved_config.json"


# --------------------------------------------------------------------------
# configuration


@dataclass
class DatasetConfig:
    split: tuple = (0.8, 0.1, 0.1)
    ratio_pos: float = 0.5
    max_positives: int | None = None

    def validate(self):
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9 or min(self.split) < 0:
            raise ValidationError(f"dataset.split must be three non-negative ratios summing to 1, got {self.split}")
        if not 0 < self.ratio_pos < 1:
            raise ValidationError("dataset.ratio_pos must lie in (0, 1)")
        if self.max_positives is not None and self.max_positives < 1:
            raise ValidationError("dataset.max_positives must be positive")


@dataclass
class PipelineConfig:
    """Everything a stage may need, resolved from a profile, a JSON file and flags.

    ``encoder``, ``pretrain`` and ``finetune`` hold overrides on top of the
    profile's EncoderConfig and OptimizerConfig values.
    """

    profile: str = "desk"
    seed: int = 0
    mode: str = "balanced"
    small_disp: int = 8
    encoder: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        ds = d.pop("dataset", {}) or {}
        ds_known = {f.name for f in dataclasses.fields(DatasetConfig)}
        bad = sorted(set(ds) - ds_known)
        if bad:
            raise ValidationError(f"unknown dataset config keys: {', '.join(bad)}")
        if "split" in ds:
            ds["split"] = tuple(ds["split"])
        return cls(dataset=DatasetConfig(**ds), **d)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fp:
                d = json.load(fp)
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file {path}: malformed JSON ({e.msg})") from None
        if not isinstance(d, dict):
            raise ValidationError(f"config file {path} must hold a JSON object")
        return cls.from_dict(d)

    def _override(self, base, overrides, section):
        names = {f.name for f in dataclasses.fields(base)}
        bad = sorted(set(overrides) - names - {"vocab_size"})
        if bad:
            raise ValidationError(f"unknown {section} config keys: {', '.join(bad)}")
        return dataclasses.replace(base, **{k: v for k, v in overrides.items() if k != "vocab_size"})

    def encoder_config(self, vocab_size):
        base = (enc.EncoderConfig.paper if self.profile == "paper" else enc.EncoderConfig.desk)(vocab_size)
        return self._override(base, self.encoder, "encoder").validate()

    def pretrain_config(self):
        base = enc.OptimizerConfig() if self.profile == "paper" else enc.OptimizerConfig.desk()
        return self._override(base, self.pretrain, "pretrain").validate()

    def finetune_config(self):
        base = enc.OptimizerConfig() if self.profile == "paper" else enc.OptimizerConfig.desk_finetune()
        return self._override(base, self.finetune, "finetune").validate()

    def validate(self):
        if self.profile not in PROFILES:
            raise ValidationError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        try:
            NormMode(self.mode)
        except ValueError:
            raise ValidationError(f"mode must be balanced, coarse or fine, got {self.mode!r}") from None
        if self.small_disp < 0:
            raise ValidationError("small_disp must be non-negative")
        self.encoder_config(corpus.N_SPECIALS + 1)
        self.pretrain_config()
        self.finetune_config()
        self.dataset.validate()
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["dataset"]["split"] = list(self.dataset.split)
        return d

    def resolved(self, vocab_size=None):
        d = self.to_dict()
        d["pretrain_optimizer"] = dataclasses.asdict(self.pretrain_config())
        d["finetune_optimizer"] = dataclasses.asdict(self.finetune_config())
        if vocab_size is not None:
            d["encoder_config"] = dataclasses.asdict(self.encoder_config(vocab_size))
        return d


def resolve_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    if getattr(args, "profile", None) is not None:
        cfg.profile = args.profile
    return cfg.validate()


def echo_config(cfg, output, vocab_size=None):
    """Persist the resolved config next to (or inside) an output artifact."""
    if os.path.isdir(output):
        path = os.path.join(output, RESOLVED_CONFIG)
    else:
        path = output + ".config.json"
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(cfg.resolved(vocab_size), fp, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# helpers


def _require_file(path, what="input"):
    if not os.path.exists(path):
        raise ValidationError(f"{what} {path} not found")
    return path


def _parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_json(obj, path):
    _parent(path)
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(obj, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _write_jsonl(rows, path):
    _parent(path)
    with open(path, "w", encoding="utf-8") as fp:
        for row in rows:
            fp.write(json.dumps(row, separators=(",", ":")) + "\n")


def _internal_task(task):
    return task.replace("-", "_")


def _usable(nfs, max_seq):
    """Functions within the size filter that also fit the encoder window."""
    kept = corpus.filter_functions(nfs, max_inclusive=min(corpus.MAX_TOKENS, max_seq - 2))
    if len(kept) < len(nfs):
        log.info("kept %d of %d functions after the size filter", len(kept), len(nfs))
    if not kept:
        raise ValidationError("no function passes the size filter")
    return kept


def _nf_id(nf):
    return {"binary_id": nf.binary_id, "function_name": nf.function_name, "compiler": nf.compiler,
            "opt_level": nf.opt_level, "testsuite": nf.testsuite}


def _check_dataset_vocab(rows_path, vocab):
    meta_path = os.path.join(os.path.dirname(os.path.abspath(rows_path)), "meta.json")
    if os.path.exists(meta_path):
        meta = corpus.read_meta(os.path.dirname(meta_path))
        if meta.vocab_hash != vocab.hash:
            raise ValidationError(f"{rows_path} was encoded with a different vocabulary than the checkpoint")


# --------------------------------------------------------------------------
# stages


def cmd_ingest(args, cfg):
    records = []
    for path in args.inputs:
        _require_file(path)
        if path.endswith((".jsonl", ".json")):
            with open(path, "rb") as fp:
                records.extend(ingest.parse_records(fp))
        else:
            hints = None
            if args.hints:
                with open(_require_file(args.hints, "hints file"), encoding="utf-8") as fp:
                    hints = ingest.SectionMap.from_dict(json.load(fp))
            with open(path, encoding="utf-8") as fp:
                text = fp.read()
            name = args.function or os.path.splitext(os.path.basename(path))[0]
            records.append(ingest.parse_asm_text(
                text, hints, binary_id=args.binary_id or name, testsuite=args.testsuite,
                compiler=args.compiler, opt_level=args.opt_level, function_name=name))
    ingest.check_unique(records)
    ingest.save_records(records, args.output)
    echo_config(cfg, args.output)
    log.info("wrote %d records to %s", len(records), args.output)


def cmd_normalize(args, cfg):
    records = ingest.load_records(_require_file(args.input))
    mode = NormMode(cfg.mode)
    nfs = [normalize_function(r, mode, cfg.small_disp) for r in records]
    _parent(args.output)
    save_nfs(nfs, args.output)
    echo_config(cfg, args.output)
    log.info("normalized %d functions (%s)", len(nfs), mode.value)


def cmd_vocab(args, cfg):
    nfs = corpus.filter_functions(load_nfs(_require_file(args.input)))
    if not nfs:
        raise ValidationError("no function passes the size filter")
    vocab = corpus.build_vocab(nfs)
    _parent(args.output)
    vocab.save(args.output)
    echo_config(cfg, args.output)
    log.info("vocabulary of %d tokens, hash %s", len(vocab), vocab.hash[:12])


def cmd_stats(args, cfg):
    nfs = load_nfs(_require_file(args.input))
    records = ingest.load_records(_require_file(args.records)) if args.records else None
    heldout = load_nfs(_require_file(args.heldout)) if args.heldout else None
    _write_json(corpus.corpus_stats(nfs, records, heldout), args.output)
    echo_config(cfg, args.output)


def cmd_pretrain(args, cfg):
    vocab = corpus.Vocabulary.load(_require_file(args.vocab, "vocabulary"))
    ecfg = cfg.encoder_config(len(vocab))
    ocfg = cfg.pretrain_config()
    nfs = _usable(load_nfs(_require_file(args.input)), ecfg.max_seq)
    seqs = [corpus.encode(nf, vocab, ecfg.max_seq) for nf in nfs]
    result = enc.pretrain(seqs, ecfg, ocfg, seed=cfg.seed)
    enc.save_checkpoint(args.output, result.model, vocab, ocfg, cfg.seed, result.log)
    echo_config(cfg, args.output, len(vocab))
    log.info("pre-trained %d parameters; final loss %.4f", result.model.n_parameters(), result.log[-1]["loss"])


def cmd_make_dataset(args, cfg):
    vocab = corpus.Vocabulary.load(_require_file(args.vocab, "vocabulary"))
    max_seq = cfg.encoder_config(len(vocab)).max_seq
    nfs = _usable(load_nfs(_require_file(args.input)), max_seq)
    task = _internal_task(args.task)
    if task == "binsim":
        examples = corpus.make_pairs(nfs, cfg.dataset.ratio_pos, cfg.seed, cfg.dataset.max_positives)
        classes = ["dissimilar", "similar"]
    else:
        examples = corpus.make_toolchain(nfs, task)
        classes = list(corpus.toolchain_classes(task))
    train, valid, test = corpus.split(examples, cfg.dataset.split, cfg.seed)
    meta = corpus.DatasetMeta(task, classes, vocab.hash, max_seq, seed=cfg.seed)
    corpus.write_dataset(args.output, {"train": train, "valid": valid, "test": test}, meta, vocab)
    echo_config(cfg, args.output, len(vocab))
    log.info("%s dataset: %s", task, meta.counts)


def cmd_finetune(args, cfg):
    _require_file(os.path.join(args.checkpoint, enc.CONFIG_FILE), "checkpoint")
    meta = corpus.read_meta(args.dataset)
    if args.task and _internal_task(args.task) != meta.task:
        raise ValidationError(f"--task {args.task} does not match dataset task {meta.task}")
    result = heads.finetune_checkpoint(args.checkpoint, args.dataset, args.output, cfg.finetune_config(),
                                       freeze_encoder=args.freeze_encoder, seed=cfg.seed)
    echo_config(cfg, args.output)
    log.info("fine-tuned %s; last validation %s", meta.task, result.log[-1]["valid"])


def _load_task(args):
    ckpt = heads.load_task_checkpoint(args.checkpoint)
    if getattr(args, "task", None) and _internal_task(args.task) != ckpt.task["task"]:
        raise ValidationError(f"--task {args.task} does not match checkpoint task {ckpt.task['task']}")
    rows = corpus.read_rows(_require_file(args.input))
    if not rows:
        raise ValidationError(f"{args.input} holds no rows")
    _check_dataset_vocab(args.input, ckpt.vocab)
    kind = "binsim" if ckpt.task["task"] == "binsim" else "toolchain"
    data = heads.tensorize(rows, kind, ckpt.model.encoder.cfg.max_seq)
    heads._check_labels(data, len(ckpt.task["classes"]), ckpt.task["task"])
    return ckpt, rows, data


def _predictions(ckpt, rows, data):
    probs = heads.predict_batch(ckpt.model, data)
    labels = heads.argmax_labels(probs)
    out = []
    for row, p, k in zip(rows, probs.tolist(), labels.tolist()):
        pred = {"label": int(k), "truth": int(row["label"]), "probabilities": p, "group": row.get("group", "")}
        if ckpt.task["task"] == "binsim":
            pred["score"] = p[1]
        else:
            pred["class"] = ckpt.task["classes"][k]
        out.append(pred)
    return out


def cmd_predict(args, cfg):
    ckpt, rows, data = _load_task(args)
    _write_jsonl(_predictions(ckpt, rows, data), args.output)
    echo_config(cfg, args.output)


def toolchain_report(preds, classes):
    """Accuracy, one-vs-rest metrics per class and the confusion table."""
    table = [[0] * len(classes) for _ in classes]
    for p in preds:
        table[p["truth"]][p["label"]] += 1
    per_class = {}
    for k, name in enumerate(classes):
        cm = metrics.confusion([(int(p["label"] == k), int(p["truth"] == k)) for p in preds])
        per_class[name] = metrics.summarize(cm).to_dict()
    correct = sum(table[k][k] for k in range(len(classes)))
    return {"accuracy": correct / len(preds), "per_class": per_class, "confusion": table, "classes": list(classes)}


def cmd_eval(args, cfg):
    ckpt, rows, data = _load_task(args)
    preds = _predictions(ckpt, rows, data)
    task = ckpt.task["task"]
    report = {"task": task, "n": len(preds)}
    if task == "binsim":
        rep = metrics.evaluate(preds)
        report["metrics"] = rep.to_dict()
        by_pair = metrics.report_by_pair(preds, weighted=args.weighted)
        report["by_pair"] = by_pair.to_dict()
        base = os.path.splitext(args.output)[0]
        _parent(args.output)
        with open(base + ".csv", "w", encoding="utf-8") as fp:
            fp.write(by_pair.to_csv())
    else:
        report["metrics"] = toolchain_report(preds, ckpt.task["classes"])
    _write_json(report, args.output)
    echo_config(cfg, args.output)
    log.info("%s: %s", task, {k: v for k, v in report["metrics"].items() if isinstance(v, float)})


def cmd_embed(args, cfg):
    ckpt = enc.load_checkpoint(args.checkpoint)
    max_seq = ckpt.model.cfg.max_seq
    nfs = _usable(load_nfs(_require_file(args.input)), max_seq)
    rows = []
    for nf in nfs:
        vec = enc.embed_function(ckpt.model, corpus.encode(nf, ckpt.vocab, max_seq))
        rows.append({"id": _nf_id(nf), "embedding": vec.tolist()})
    _write_jsonl(rows, args.output)
    echo_config(cfg, args.output)


def cmd_export_attn(args, cfg):
    ckpt = enc.load_checkpoint(args.checkpoint)
    max_seq = ckpt.model.cfg.max_seq
    nfs = load_nfs(_require_file(args.input))
    if not 0 <= args.index < len(nfs):
        raise ValidationError(f"--index {args.index} out of range for {len(nfs)} functions")
    nf = nfs[args.index]
    seq = corpus.encode(nf, ckpt.vocab, max_seq)
    weights = enc.export_attention(ckpt.model, seq)
    tokens = ["[SOS]"] + list(nf.tokens) + ["[EOS]"]
    n = seq.true_len
    trimmed = [[[row[:n] for row in head[:n]] for head in layer] for layer in weights]
    _write_json({"id": _nf_id(nf), "tokens": tokens, "attention": trimmed,
                 "layout": "layer, head, query, key"}, args.output)
    echo_config(cfg, args.output)


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config file")
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    common.add_argument("--profile", choices=PROFILES, help="hyperparameter profile (overrides the config)")
    common.add_argument("-o", "--output", required=True, help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="binsem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="parse records (JSONL) or Intel-syntax listings")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--hints", help="section map JSON for listings")
    s.add_argument("--binary-id")
    s.add_argument("--testsuite", default="")
    s.add_argument("--compiler", default="other")
    s.add_argument("--opt-level", default="unknown")
    s.add_argument("--function")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("normalize", parents=[common], help="records -> normalized functions")
    s.add_argument("input")
    s.add_argument("--mode", choices=[m.value for m in NormMode])
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("vocab", parents=[common], help="normalized functions -> vocabulary TSV")
    s.add_argument("input")
    s.set_defaults(func=cmd_vocab)

    s = sub.add_parser("stats", parents=[common], help="corpus statistics as JSON")
    s.add_argument("input")
    s.add_argument("--records", help="records JSONL for basic-block statistics")
    s.add_argument("--heldout", help="held-out normalized functions for the OOV rate")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("pretrain", parents=[common], help="masked-LM pre-training -> checkpoint directory")
    s.add_argument("input")
    s.add_argument("--vocab", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("make-dataset", parents=[common], help="labelled fine-tuning dataset directory")
    s.add_argument("input")
    s.add_argument("--vocab", required=True)
    s.add_argument("--task", choices=CLI_TASKS, required=True)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("finetune", parents=[common], help="checkpoint + dataset -> task checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--task", choices=CLI_TASKS)
    s.add_argument("--freeze-encoder", action="store_true")
    s.set_defaults(func=cmd_finetune)

    for name, func, help_ in (("predict", cmd_predict, "per-row predictions as JSONL"),
                              ("eval", cmd_eval, "metrics report as JSON (plus CSV for binsim)")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("checkpoint")
        s.add_argument("input", help="dataset rows JSONL, e.g. <dataset>/test.jsonl")
        s.add_argument("--task", choices=CLI_TASKS)
        if name == "eval":
            s.add_argument("--weighted", action="store_true", help="weight the average row by group size")
        s.set_defaults(func=func)

    s = sub.add_parser("embed", parents=[common], help="mean-pooled function embeddings as JSONL")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("export-attn", parents=[common], help="attention weights of one function as JSON")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("--index", type=int, default=0)
    s.set_defaults(func=cmd_export_attn)
    return p


def _set_threads():
    value = os.environ.get("BINSEM_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise ValidationError(f"BINSEM_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ValidationError(f"BINSEM_THREADS must be a positive integer, got {value!r}")
    import torch

    torch.set_num_threads(n)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # usage errors are invalid input; --help exits with 0
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        cfg = resolve_config(args)
        args.func(args, cfg)
    except ValidationError as e:
        print(f"binsem {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        print(f"binsem {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
