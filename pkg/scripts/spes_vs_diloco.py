"""SPES vs DiLoCo final held-out loss at equal token budget (N=4, H=10, 60 rounds)."""

from _common import finish

from spes.desk import spes_vs_diloco

if __name__ == "__main__":
    res = spes_vs_diloco()
    print(f"spes {res['spes']['final_eval_ce']:.4f}  diloco {res['diloco']['final_eval_ce']:.4f}  gap {res['relative_gap']:.2%}")
    finish("spes_vs_diloco", res)
