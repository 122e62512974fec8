"""hsif-convert: convert, verify, synthesize.

convert reads the MATLAB arrays named by a recipe, validates their extents
against the recipe, and writes one HSIF file. verify re-parses any HSIF file,
checks its CRC, and prints per-class pixel counts. synthesize writes the
deterministic toy scene used as a test fixture. Conversion is idempotent:
same inputs, byte-identical output.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from hsif_convert.hsif import HsifError, read_hsif, synthesize, write_hsif
from hsif_convert.recipes import load_recipe


def build_parser():
    parser = argparse.ArgumentParser(prog="hsif-convert", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="MATLAB scene files to one HSIF file")
    p.add_argument("--recipe", required=True, help="builtin name or recipe JSON path")
    p.add_argument("--data-dir", type=Path, default=Path("."), help="where the .mat files live")
    p.add_argument("--out", type=Path, help="output path (default from recipe)")

    p = sub.add_parser("verify", help="re-parse an HSIF file and print label counts")
    p.add_argument("path", type=Path)

    p = sub.add_parser("synthesize", help="write the deterministic toy scene")
    p.add_argument("--dims", nargs=4, type=int, required=True, metavar=("H", "W", "V", "C"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _load_mat_array(path, key):
    from scipy.io import loadmat

    if not path.exists():
        raise FileNotFoundError(f"source file not found: {path}")
    content = loadmat(path)
    if key not in content:
        available = sorted(k for k in content if not k.startswith("__"))
        raise KeyError(f"{path} has no variable '{key}' (found: {available})")
    return np.asarray(content[key])


def cmd_convert(args):
    recipe = load_recipe(args.recipe)
    data = _load_mat_array(args.data_dir / recipe.data_file, recipe.data_key)
    labels = _load_mat_array(args.data_dir / recipe.labels_file, recipe.labels_key)
    if data.shape != recipe.expected_shape():
        raise HsifError(
            f"{recipe.data_file}: shape {data.shape} does not match the recipe's "
            f"{recipe.expected_shape()}"
        )
    if labels.shape != recipe.expected_shape()[:2]:
        raise HsifError(
            f"{recipe.labels_file}: shape {labels.shape} does not match "
            f"{recipe.expected_shape()[:2]}"
        )
    out = args.out if args.out is not None else Path(recipe.output_name())
    write_hsif(out, data.astype(np.float32), labels.astype(np.uint16), recipe.class_names)
    labeled = int((labels > 0).sum())
    print(f"wrote {out}: {data.shape[0]} x {data.shape[1]} x {data.shape[2]}, "
          f"{len(recipe.class_names)} classes, {labeled} labeled pixels")
    return 0


def cmd_verify(args):
    if not args.path.exists():
        raise FileNotFoundError(f"file not found: {args.path}")
    reflectance, labels, names = read_hsif(args.path)
    h, w, v = reflectance.shape
    labeled = int((labels > 0).sum())
    print(f"{args.path}: CRC OK, {h} x {w} x {v}, {len(names)} classes, {labeled} labeled")
    counts = np.bincount(labels.reshape(-1), minlength=len(names) + 1)
    for i, name in enumerate(names, start=1):
        print(f"  {i:2d} {name}: {int(counts[i])}")
    return 0


def cmd_synthesize(args):
    h, w, v, c = args.dims
    if min(h, w, v, c) < 1:
        raise HsifError(f"all dims must be >= 1, got {args.dims}")
    reflectance, labels, names = synthesize(h, w, v, c, args.seed)
    write_hsif(args.out, reflectance, labels, names)
    print(f"wrote {args.out}: {h} x {w} x {v}, {c} classes, seed {args.seed}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"convert": cmd_convert, "verify": cmd_verify, "synthesize": cmd_synthesize}
    try:
        return handler[args.command](args)
    except (FileNotFoundError, KeyError, ValueError) as err:
        message = err.args[0] if err.args else err
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
