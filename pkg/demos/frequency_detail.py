"""Visualize the dual-domain detail module's frequency branch.

Runs the spectral top-k filter over a synthetic test card at several
retention fractions and writes the filtered images: a small k keeps only
the dominant low-frequency structure, k_fraction=1 with unit modulation
reproduces the input exactly (the identity configuration).
"""

import pathlib

import numpy as np
from PIL import Image

import fgsplat.diffcore as dc
from fgsplat.detailmod import DetailModule, FrequencySelector, frequency_filter

OUT = pathlib.Path(__file__).parent / "out"


def test_card(n=128):
    """Checkerboard + gradient + a few sharp bars: mixed spectrum content."""
    y, x = np.mgrid[0:n, 0:n] / n
    card = 0.4 * ((np.floor(x * 8) + np.floor(y * 8)) % 2) + 0.3 * x
    card += 0.3 * (np.abs(np.sin(40 * np.pi * x)) > 0.97)
    return np.clip(np.stack([card, 0.8 * card, 1.0 - 0.5 * card]), 0, 1)


def save(name, arr):
    OUT.mkdir(exist_ok=True)
    img = np.clip(arr.transpose(1, 2, 0) * 255.0 + 0.5, 0, 255)
    Image.fromarray(img.astype(np.uint8), mode="RGB").save(OUT / name)
    print(f"  wrote {OUT / name}")


def main():
    img = dc.Tensor(test_card().astype(np.float32))
    save("card_input.png", img.data)

    for k in (0.01, 0.1, 1.0):
        sel = FrequencySelector(np.random.default_rng(0), k_fraction=k)
        with dc.no_grad():
            out = frequency_filter(sel, img)
        err = np.abs(out.data - img.data).max()
        print(f"k_fraction {k:.2f}: kept "
              f"{sel.n_keep(128, 128)}/{128 * 128} bins, "
              f"max deviation from input {err:.2e}")
        save(f"card_k{int(k * 100):03d}.png", np.clip(out.data, 0, 1))

    mod = DetailModule(np.random.default_rng(1), c_detail=8)
    with dc.no_grad():
        det = mod(img)
    print(f"detail feature grid: {tuple(det.grid.shape)} "
          f"(input {tuple(img.shape)})")


if __name__ == "__main__":
    main()
