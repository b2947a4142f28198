"""Regenerate tests/data/fixture_corpus.jsonl from the synthetic listings.

Usage: python3 scripts/make_fixture_corpus.py [-o PATH] [--per-program N]
"""

import argparse
import os

from binsem.ingest import save_records
from binsem.synth import fixture_records

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT = os.path.join(HERE, "..", "tests", "data", "fixture_corpus.jsonl")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("-o", "--output", default=DEFAULT)
    p.add_argument("--per-program", type=int, default=10, help="functions per program and build")
    args = p.parse_args()
    records = fixture_records(functions_per_program=args.per_program)
    save_records(records, args.output)
    n_ins = sum(len(r.instructions) for r in records)
    print(f"wrote {len(records)} functions / {n_ins} instructions to {os.path.normpath(args.output)}")


if __name__ == "__main__":
    main()
