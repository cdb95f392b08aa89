"""Drift, variance-reduction, bound and merge-displacement checks (inner SGD)."""

from _common import finish

from spes.theory import run_theory_suite

if __name__ == "__main__":
    res = run_theory_suite()
    for k in ("drift", "variance", "bound", "merge"):
        print(f"{k}: {'ok' if res[k]['ok'] else 'VIOLATED'}")
    finish("theory", res)
