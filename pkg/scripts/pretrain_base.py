"""Render the default 32px dataset and train the base model into the cache.

The acceptance suite reuses whatever this leaves in the cache directory.
"""

import argparse
import logging

from trimix.experiments import DEFAULT_CACHE, default_base


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default=str(DEFAULT_CACHE))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    ds, _, arch, path = default_base(args.cache)
    print(f"dataset {ds.root}\nbase {path} ({arch.resolution}px, {arch.views} views)")


if __name__ == "__main__":
    main()
