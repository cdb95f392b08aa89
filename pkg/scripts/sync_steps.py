"""Final loss vs synchronisation interval H in {50, 200, 400} at 800 local steps per node."""

from _common import finish

from spes.desk import sync_steps

if __name__ == "__main__":
    res = sync_steps()
    print("  ".join(f"H={h}: {v:.4f}" for h, v in res["final_eval_ce"].items()))
    finish("sync_steps", res)
