"""Scene recipes: where the MATLAB arrays live and what their classes mean.

The public distributions carry no class names, so recipes bake them in. A
recipe can also come from a JSON file with the same fields, for cut-down or
custom scenes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class SceneRecipe:
    name: str
    data_file: str
    data_key: str  # variable name inside the data .mat
    labels_file: str
    labels_key: str
    height: int
    width: int
    bands: int
    class_names: tuple
    output: str = ""  # default: <name>.hsif next to the data

    def expected_shape(self):
        return (self.height, self.width, self.bands)

    def output_name(self):
        return self.output or f"{self.name}.hsif"


INDIAN_PINES = SceneRecipe(
    name="indian_pines",
    data_file="Indian_pines_corrected.mat",
    data_key="indian_pines_corrected",
    labels_file="Indian_pines_gt.mat",
    labels_key="indian_pines_gt",
    height=145,
    width=145,
    bands=200,
    class_names=(
        "Alfalfa", "Corn-notill", "Corn-mintill", "Corn", "Grass-pasture",
        "Grass-trees", "Grass-pasture-mowed", "Hay-windrowed", "Oats",
        "Soybean-notill", "Soybean-mintill", "Soybean-clean", "Wheat",
        "Woods", "Buildings", "Stone",
    ),
)

PAVIA_UNIVERSITY = SceneRecipe(
    name="pavia_university",
    data_file="PaviaU.mat",
    data_key="paviaU",
    labels_file="PaviaU_gt.mat",
    labels_key="paviaU_gt",
    height=610,
    width=340,
    bands=103,
    class_names=(
        "Asphalt", "Meadows", "Gravel", "Trees", "Painted metal sheets",
        "Bare soil", "Bitumen", "Self-blocking bricks", "Shadows",
    ),
)

HOUSTON = SceneRecipe(
    name="houston",
    data_file="Houston.mat",
    data_key="Houston",
    labels_file="Houston_gt.mat",
    labels_key="Houston_gt",
    height=340,
    width=1905,
    bands=144,
    class_names=(
        "Healthy grass", "Stressed grass", "Synthetic grass", "Trees", "Soil",
        "Water", "Residential", "Commercial", "Road", "Highway", "Railway",
        "Parking Lot 1", "Parking Lot 2", "Tennis Court", "Running Track",
    ),
)

BUILTIN = {r.name: r for r in (INDIAN_PINES, PAVIA_UNIVERSITY, HOUSTON)}


def load_recipe(spec):
    """Builtin name, or path to a JSON file with SceneRecipe fields."""
    if spec in BUILTIN:
        return BUILTIN[spec]
    path = Path(spec)
    if not path.exists():
        known = ", ".join(sorted(BUILTIN))
        raise FileNotFoundError(f"no recipe file {path} and no builtin '{spec}' ({known})")
    raw = json.loads(path.read_text())
    allowed = {f.name for f in fields(SceneRecipe)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"{path}: unknown recipe fields {sorted(unknown)}")
    raw["class_names"] = tuple(raw.get("class_names", ()))
    return SceneRecipe(**raw)
