"""Render a few synthetic tiles from both domains and inspect coverage.

Writes image/mask PNGs to demos/out/ and prints per-tile panel
coverage. The same (spec, seed) pair always renders the same tile.
"""

from pathlib import Path

import numpy as np

from solarseg import SceneSpec, generate_scene, save_image, save_mask

OUT = Path(__file__).parent / "out"


def main():
    OUT.mkdir(exist_ok=True)
    specs = {
        "rooftop": SceneSpec(background="rooftop"),
        "field": SceneSpec(background="field"),
    }
    for name, spec in specs.items():
        for seed in range(3):
            image, mask = generate_scene(spec, seed)
            cover = float(mask.mean())
            save_image(image, OUT / f"scene_{name}_{seed}.png")
            save_mask(mask, OUT / f"scene_{name}_{seed}_mask.png")
            print(f"{name} seed {seed}: tile {image.shape[0]}px, "
                  f"panel coverage {cover:.1%}")

    # determinism: same seed, same pixels
    a, _ = generate_scene(specs["rooftop"], 0)
    b, _ = generate_scene(specs["rooftop"], 0)
    print("seed 0 re-render identical:", np.array_equal(a, b))
    print(f"wrote PNGs to {OUT}")


if __name__ == "__main__":
    main()
