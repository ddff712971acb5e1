"""Write the bundled image sets to disk for command-line experiments.

The evaluation and validation images come out as 256x256 8-bit PGM; the
training images keep their native sizes.  Example:

    python3 scripts/export_test_images.py --out-dir exported_images
"""

import argparse
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from foepoisson.data import load_eval_images, load_training_images, load_validation_images
from foepoisson.fileio import write_image


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="exported_images")
    args = ap.parse_args(argv)

    root = pathlib.Path(args.out_dir)
    for group, loader in (("eval", load_eval_images),
                          ("validation", load_validation_images),
                          ("training", load_training_images)):
        sub = root / group
        sub.mkdir(parents=True, exist_ok=True)
        for name, img in loader():
            path = sub / f"{name}.pgm"
            write_image(path, img, bits=8)
            print(f"{path}  {img.shape[0]}x{img.shape[1]}")


if __name__ == "__main__":
    main()
