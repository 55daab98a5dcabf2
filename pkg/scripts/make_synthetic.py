"""Write the synthetic needle collection (corpus, topics, qrels) to a directory."""

import argparse
import dataclasses

from passrank.desk import write_synthetic
from passrank.synthetic import SyntheticSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    for f in dataclasses.fields(SyntheticSpec):
        ap.add_argument(f"--{f.name.replace('_', '-')}", type=int, default=f.default)
    args = ap.parse_args()
    spec = SyntheticSpec(**{f.name: getattr(args, f.name) for f in dataclasses.fields(SyntheticSpec)})
    coll = write_synthetic(args.out_dir, spec)
    rel = sum(1 for g in coll.qrels.values() if g > 0)
    print(f"{len(coll.docs)} documents, {len(coll.topics)} topics, {rel} relevant judgments -> {args.out_dir}")


if __name__ == "__main__":
    main()
