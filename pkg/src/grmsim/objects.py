"""Built-in object set and the object library file format.

The shipped set is the four dataset shapes: a 40 mm rectangular prism, a
50 mm triangular prism, a 40 mm cylinder, and a 40 mm (base) cone, all
105 mm tall. Round footprints are regular 32-gons; the triangular prism is
an isosceles 50 mm base x 50 mm height triangle.
"""

from __future__ import annotations

from . import records
from .geometry import regular_polygon
from .types import ObjectSpec, Shape


def _rect_footprint(width: float, depth: float):
    hw, hd = width / 2.0, depth / 2.0
    return ((-hw, -hd), (hw, -hd), (hw, hd), (-hw, hd))


def _tri_footprint(base: float, height: float):
    # flat face toward -x, apex toward +x, area centroid at the origin
    x0 = -height / 3.0
    return ((x0, -base / 2.0), (x0 + height, 0.0), (x0, base / 2.0))


def builtin_objects() -> dict[str, ObjectSpec]:
    objs = [
        ObjectSpec(
            id="rect",
            shape=Shape.RECT_PRISM,
            width=40.0,
            depth=40.0,
            height=105.0,
            mass=150.0,
            footprint=_rect_footprint(40.0, 40.0),
        ),
        ObjectSpec(
            id="tri",
            shape=Shape.TRI_PRISM,
            width=50.0,
            depth=50.0,
            height=105.0,
            mass=180.0,
            footprint=_tri_footprint(50.0, 50.0),
            orientation_magnet_offset=15.0,
        ),
        ObjectSpec(
            id="cyl",
            shape=Shape.CYLINDER,
            width=40.0,
            depth=40.0,
            height=105.0,
            mass=140.0,
            footprint=regular_polygon(40.0, sides=32),
        ),
        ObjectSpec(
            id="cone",
            shape=Shape.CONE,
            width=40.0,
            depth=40.0,
            height=105.0,
            mass=90.0,
            footprint=regular_polygon(40.0, sides=32),
        ),
    ]
    return {o.id: o for o in objs}


def object_to_fields(obj: ObjectSpec) -> dict:
    return {
        "id": obj.id,
        "shape": obj.shape.value,
        "width_mm": obj.width,
        "depth_mm": obj.depth,
        "height_mm": obj.height,
        "mass_g": obj.mass,
        "footprint_mm": [[x, y] for x, y in obj.footprint],
        "base_insert_receptacle": obj.has_base_insert_receptacle,
        "swap_magnet": obj.has_swap_magnet,
        "orientation_magnet_offset_mm": obj.orientation_magnet_offset,
    }


def object_from_fields(f: dict) -> ObjectSpec:
    return ObjectSpec(
        id=str(f["id"]),
        shape=Shape(f["shape"]),
        width=float(f["width_mm"]),
        depth=float(f["depth_mm"]),
        height=float(f["height_mm"]),
        mass=float(f["mass_g"]),
        footprint=tuple((x, y) for x, y in f["footprint_mm"]),
        has_base_insert_receptacle=bool(f["base_insert_receptacle"]),
        has_swap_magnet=bool(f["swap_magnet"]),
        orientation_magnet_offset=float(f["orientation_magnet_offset_mm"]),
    )


def load_object_library(path) -> dict[str, ObjectSpec]:
    """Load an object library file (one ``object`` record per line)."""
    out: dict[str, ObjectSpec] = {}
    for kind, fields in records.read_records(path):
        if kind != "object":
            raise records.RecordError(f"unexpected record kind {kind!r} in object library")
        try:
            obj = object_from_fields(fields)
        except (KeyError, TypeError, ValueError) as e:
            raise records.RecordError(f"malformed object record: {e!r}") from e
        if obj.id in out:
            raise records.RecordError(f"duplicate object id {obj.id!r}")
        out[obj.id] = obj
    return out


def save_object_library(path, objects: dict[str, ObjectSpec]) -> None:
    records.write_records(path, [("object", object_to_fields(o)) for o in objects.values()])
