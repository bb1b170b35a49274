"""Run ``morphoumi sweep-lambda`` and summarize curve shapes.

Extra arguments are passed through, e.g. ``--m 5000 --grid 0.003,0.008,0.014``.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from morphoumi.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    a, rest = ap.parse_known_args()
    code = cli(["sweep-lambda", "--out", a.out, *rest])
    if code:
        sys.exit(code)
    rows = json.loads((Path(a.out) / "sweep.json").read_text())["rows"]
    err = np.array([r["holdout_error"] for r in rows])
    for g in ("ad", "cu"):
        s = [r[f"sparse_norm_{g}"] for r in rows]
        k = [r[f"rank_{g}"] for r in rows]
        print(f"{g}: sparse non-increasing {all(np.diff(s) <= 0)}, "
              f"rank steps within +1 {all(np.diff(k) <= 1)}")
    best = int(np.nanargmin(err))
    print(f"min error {err[best]:.4f} at lam {rows[best]['lam']}; endpoints {err[0]:.4f}, "
          f"{err[-1]:.4f}; interior minimum {np.nanmin(err[1:-1]) < min(err[0], err[-1])}")


if __name__ == "__main__":
    main()
