"""Class table shared by fusion, io, and the harness: a bijective mapping
between class names, integer ids, and the three teacher categories."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence


class Category(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"

    def __str__(self) -> str:  # str(Category.VEHICLE) == "vehicle"
        return self.value


CATEGORIES = (Category.VEHICLE, Category.PEDESTRIAN, Category.CYCLIST)


@dataclass(frozen=True)
class ClassTable:
    """name <-> class_id <-> category, validated bijective on construction."""

    name_to_id: Mapping[str, int]
    id_to_category: Mapping[int, Category]

    def __post_init__(self):
        ids = list(self.name_to_id.values())
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        if any(i < 1 for i in ids):
            raise ValueError("class ids must be >= 1")
        if set(ids) != set(self.id_to_category):
            raise ValueError("every class id needs a category and vice versa")

    @classmethod
    def from_spec(cls, spec: Mapping[str, tuple[int, str] | Sequence]) -> "ClassTable":
        """Build from {name: (class_id, category_name)} pairs."""
        name_to_id = {}
        id_to_category = {}
        for name, (cid, cat) in spec.items():
            name_to_id[name] = int(cid)
            id_to_category[int(cid)] = Category(cat)
        return cls(name_to_id, id_to_category)

    @property
    def id_to_name(self) -> dict[int, str]:
        return {i: n for n, i in self.name_to_id.items()}

    def ids(self) -> list[int]:
        return sorted(self.id_to_category)

    def ids_for(self, category: Category) -> list[int]:
        return sorted(i for i, c in self.id_to_category.items() if c is category)

    def category_of(self, class_id: int) -> Category:
        try:
            return self.id_to_category[class_id]
        except KeyError:
            raise KeyError(f"class_id {class_id} is not in the class table") from None

    def name_of(self, class_id: int) -> str:
        return self.id_to_name[class_id]

    def contiguous_ranges(self) -> dict[Category, tuple[int, int]]:
        """Inclusive id range per category; raises if ids are not grouped
        contiguously by category over [1, z]."""
        ids = self.ids()
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"class ids must cover 1..z contiguously, got {ids}")
        ranges: dict[Category, tuple[int, int]] = {}
        for cid in ids:
            cat = self.id_to_category[cid]
            if cat in ranges:
                lo, hi = ranges[cat]
                if cid != hi + 1:
                    raise ValueError(f"category {cat} ids are not contiguous")
                ranges[cat] = (lo, cid)
            else:
                ranges[cat] = (cid, cid)
        return ranges


def default_class_table() -> ClassTable:
    """Seven urban classes grouped into the three teacher categories."""
    return ClassTable.from_spec(
        {
            "car": (1, "vehicle"),
            "bus": (2, "vehicle"),
            "truck": (3, "vehicle"),
            "other_vehicle": (4, "vehicle"),
            "pedestrian": (5, "pedestrian"),
            "motorcycle": (6, "cyclist"),
            "bicycle": (7, "cyclist"),
        }
    )
