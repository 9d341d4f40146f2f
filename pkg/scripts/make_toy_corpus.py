"""Render the synthetic parallel corpus used by the toy pipeline."""
import argparse

from dysvc.pipeline import toycorpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", help="corpus directory")
    parser.add_argument("--utterances", type=int, default=60, help="utterances per speaker")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    manifest = toycorpus.write_corpus(args.out, n_utts=args.utterances, seed=args.seed)
    print(manifest)


if __name__ == "__main__":
    main()
