"""Closed label sets for object colours and types.

The attested colour/type table is synthetic: the real list of combinations
seen in the catalogue is not published, so ``ATTESTED_CLASSES`` is produced
by a fixed arithmetic rule that yields 169 pairs covering every colour and
every type.
"""
from __future__ import annotations

COLOURS = (
    "black", "white", "grey", "red", "blue", "green", "yellow", "brown", "pink",
    "purple", "orange", "beige", "maroon", "olive", "violet", "gold", "silver",
)

FASHION_TYPES = (
    "blouse hanging", "dress hanging", "jacket hanging", "jacket folded",
    "shirt hanging", "tshirt hanging", "tshirt folded", "trousers display",
    "jeans display", "skirt hanging", "coat hanging", "sweater folded", "hat", "shoes",
)
FURNITURE_TYPES = ("sofa", "chair", "table", "lamp", "bed", "shelves", "area rug")
TYPES = FASHION_TYPES + FURNITURE_TYPES

DOMAIN_TYPES = {"fashion": FASHION_TYPES, "furniture": FURNITURE_TYPES}

UNKNOWN = "unknown"

COLOUR_MODIFIERS = ("light", "dark", "pale", "bright", "deep")
COLOUR_ALIASES = {"gray": "grey", "golden": "gold", "navy": "blue", "wooden": "brown"}

assert len(COLOURS) == 17 and len(TYPES) == 21


def _attested():
    pairs = []
    for j, type_ in enumerate(TYPES):
        k = 9 if j == 0 else 8
        for i in range(k):
            pairs.append((COLOURS[(5 * j + 3 * i) % 17], type_))
    return tuple(pairs)


ATTESTED_CLASSES = _attested()
assert len(ATTESTED_CLASSES) == len(set(ATTESTED_CLASSES)) == 169


def type_noun(type_label: str) -> str:
    """Head noun used when a speaker names an object type ("jacket hanging" -> "jacket")."""
    if type_label == "area rug":
        return "rug"
    return type_label.split()[0]


def domain_of(type_label: str) -> str:
    return "furniture" if type_label in FURNITURE_TYPES else "fashion"
