"""Desk-scale demo: pre-train on the toy corpus, then fine-tune both heads.

Usage: python3 scripts/desk_demo.py [--seed N]
"""

import argparse
import time

from binsem import corpus, encoder as enc, heads
from binsem.synth import toy_mlm_corpus, toy_pair_corpus, toy_toolchain_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    nfs = toy_mlm_corpus(200, seed=args.seed)
    vocab = corpus.build_vocab(nfs)
    cfg = enc.EncoderConfig.desk(len(vocab))
    seqs = [corpus.encode(x, vocab, cfg.max_seq) for x in nfs]
    t0 = time.perf_counter()
    pre = enc.pretrain(seqs, cfg, enc.OptimizerConfig.desk(), seed=args.seed)
    print(f"pre-training: vocab {len(vocab)}, {pre.model.n_parameters()} parameters, "
          f"{time.perf_counter() - t0:.1f} s")
    for row in pre.log:
        print(f"  epoch {row['epoch']}: loss {row['loss']:.3f}, masked accuracy {row['masked_acc']:.3f}")

    def rows(xs):
        return [corpus.example_to_row(x, vocab, cfg.max_seq) for x in xs]

    opt = enc.OptimizerConfig.desk_finetune()
    for task, data, classes in (("binsim", toy_pair_corpus(100, seed=10), None),
                                ("compiler", toy_toolchain_corpus(100, seed=2), ["gcc", "clang"])):
        train, valid, test = corpus.split(data, (0.7, 0.1, 0.2), rng_seed=args.seed)
        t0 = time.perf_counter()
        res = heads.finetune(pre.model, rows(train), task, opt, seed=args.seed, valid_rows=rows(valid),
                             classes=classes)
        kind = "binsim" if task == "binsim" else "toolchain"
        m = heads.validation_metrics(res.model, heads.tensorize(rows(test), kind, cfg.max_seq))
        shown = ", ".join(f"{k} {v:.3f}" for k, v in m.items())
        print(f"{task}: {shown} ({time.perf_counter() - t0:.1f} s)")


if __name__ == "__main__":
    main()
