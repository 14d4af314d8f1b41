"""Finite-difference check of every cell x attention x query configuration.

Thin wrapper over ``treeattn gradcheck`` so it can run from a checkout:

    python scripts/gradcheck.py --out runs/gradcheck
    python scripts/gradcheck.py --norm plain --looped
"""

import sys

from treeattn.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck", *sys.argv[1:]]))
