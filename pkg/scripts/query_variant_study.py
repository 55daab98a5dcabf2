"""Word counts of each query variant over a topics file.

    python scripts/query_variant_study.py topics.txt
"""

import argparse
import statistics

from passrank.corpus import load_topics
from passrank.textprep import QUERY_KINDS, make_query_variant, variant_word_count


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("topics")
    args = ap.parse_args()
    topics = load_topics(args.topics)
    print(f"{'variant':<15} {'topics':>6} {'mean words':>10}")
    for kind in QUERY_KINDS:
        counts = []
        for t in topics:
            try:
                counts.append(variant_word_count(make_query_variant(t, kind).text))
            except ValueError:
                continue
        if counts:
            print(f"{kind:<15} {len(counts):>6} {statistics.mean(counts):>10.1f}")


if __name__ == "__main__":
    main()
