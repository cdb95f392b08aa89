"""Expert-merging warm-up vs merging disabled (T_merge=30 rounds, alpha 0.1, K=4)."""

from _common import finish

from spes.desk import merging_warmup

if __name__ == "__main__":
    res = merging_warmup()
    print(
        f"target (disabled, round 50) {res['target']:.4f}; merged run first reaches it at round {res['first_round_reaching_target']}; "
        f"final {res['on']['final_eval_ce']:.4f} vs {res['off']['final_eval_ce']:.4f}"
    )
    finish("merging_warmup", res)
