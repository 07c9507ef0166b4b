"""Small default sweep: writes sweep.csv via the ``bench`` command."""
import sys

from flashsvd.cli import main

DEFAULTS = ["bench", "--batch", "1,4", "--seqlen", "64,128", "--rank", "8,16", "--d-model", "64",
            "--heads", "4", "--d-ff", "256", "--reps", "3", "--sram-budget", "1048576", "--out", "sweep.csv"]

if __name__ == "__main__":
    sys.exit(main(DEFAULTS + sys.argv[1:]))
