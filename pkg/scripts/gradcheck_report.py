"""Full finite-difference report (64-bit): every op and the end-to-end loss over N seeds."""

import argparse
import sys

from vecmap.gradcheck import run_suite


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args(argv)
    results = run_suite(seeds=range(args.seeds))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
