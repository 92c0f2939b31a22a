"""Finite differences vs backpropagation on the three hardest paths.

Runs the shared gradient battery (render loss, dual-domain detail module,
guided U-Net) in both precisions and prints one line per check. The same
battery backs the `fgsplat gradcheck` subcommand.
"""

from fgsplat.pipeline import run_gradcheck


def main():
    for precision in ("float64", "float32"):
        print(f"-- {precision}")
        for r in run_gradcheck(precision):
            verdict = "PASS" if r["ok"] else "FAIL"
            print(f"  {r['name']:<12s} fraction {r['fraction']:.4f} "
                  f"within {r['tolerance']:g}  {verdict}")


if __name__ == "__main__":
    main()
