"""Neighborhood-view thumbnail layouts: spiral, spatial spiral, grid.

Pure geometry over the unit square. The image of interest sits in a centered
ring-0 box; neighbors fill concentric rings of cells enumerated clockwise
from each ring's top-left corner. Ring capacities follow the recurrence:
ring 1 holds 8 cells; a ring at the same cell scale as its predecessor holds
4 more; a ring at half scale holds twice as many plus 4.

The spatial variant additionally keeps every neighbor inside the ring arc
belonging to its data-space quadrant relative to the center, subdividing
last-arc cells into four (once, at most) when a quadrant overflows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

log = logging.getLogger(__name__)

SAME, HALF = "same", "half"

# Per-preset cell-scale schedules; capacities follow from the recurrence and
# are exported so they can be retuned without touching the API.
PRESET_SCHEDULES: dict[str, tuple[str, ...]] = {
    "small": (SAME, HALF),
    "medium": (SAME, HALF, SAME),
    "large": (SAME, HALF, SAME, HALF),
    "very_large": (SAME, HALF, SAME, HALF, SAME),
}
PRESET_CAPACITIES: dict[str, tuple[int, ...]] = {
    "small": (8, 20),
    "medium": (8, 20, 24),
    "large": (8, 20, 24, 52),
    "very_large": (8, 20, 24, 52, 56),
}

QUADRANTS = ("NW", "NE", "SE", "SW")  # clockwise from the top-left


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class LayoutBox:
    image_id: str
    x: float
    y: float
    w: float
    h: float
    ring: int
    quadrant: str = "none"
    subdivided: bool = False

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "x": self.x,
            "y": self.y,
            "w": self.w,
            "h": self.h,
            "ring": self.ring,
            "quadrant": self.quadrant,
            "subdivided": self.subdivided,
        }


@dataclass(frozen=True)
class RingPlan:
    ring_index: int
    cell_scale: str  # same | half, relative to the previous ring
    capacity: int
    side_count: int  # cells per edge, excluding the 4 corner cells


def ring_capacities(preset: str) -> list[RingPlan]:
    """Ring plans for a preset per the capacity recurrence."""
    if preset not in PRESET_SCHEDULES:
        raise LayoutError(f"unknown preset {preset!r}")
    plans: list[RingPlan] = []
    capacity = 8
    side = 1
    for i, scale in enumerate(PRESET_SCHEDULES[preset], start=1):
        if i == 1:
            capacity, side = 8, 1
        elif scale == SAME:
            capacity, side = capacity + 4, side + 1
        else:
            capacity, side = 2 * capacity + 4, 2 * side + 2
        plans.append(RingPlan(ring_index=i, cell_scale=scale, capacity=capacity, side_count=side))
    return plans


def preset_total(preset: str) -> int:
    return sum(p.capacity for p in ring_capacities(preset))


def _ring_geometry(preset: str):
    """Center size and, per ring, (inner half-extent, thickness) in canvas units."""
    plans = ring_capacities(preset)
    # thickness in units of the center cell size
    thickness = []
    t = 1.0
    for plan in plans:
        if plan.ring_index > 1 and plan.cell_scale == HALF:
            t /= 2.0
        thickness.append(t)
    half_extent = 0.5 + sum(thickness)  # in center-size units
    s = 1.0 / (2.0 * half_extent)  # center cell size; everything fits the unit square
    rings = []
    a = s / 2.0
    for t in thickness:
        rings.append((a, t * s))
        a += t * s
    return s, plans, rings


def _ring_cells(a: float, t: float, side_count: int) -> list[tuple[float, float, float, float]]:
    """Clockwise cell rects of one ring, starting at the top-left corner cell."""
    c = 0.5  # canvas center
    inner = 2.0 * a  # inner boundary side length
    cell = inner / side_count
    cells = []
    cells.append((c - a - t, c - a - t, t, t))  # TL corner
    for k in range(side_count):  # top edge, left -> right
        cells.append((c - a + k * cell, c - a - t, cell, t))
    cells.append((c + a, c - a - t, t, t))  # TR corner
    for k in range(side_count):  # right edge, top -> bottom
        cells.append((c + a, c - a + k * cell, t, cell))
    cells.append((c + a, c + a, t, t))  # BR corner
    for k in range(side_count):  # bottom edge, right -> left
        cells.append((c + a - (k + 1) * cell, c + a, cell, t))
    cells.append((c - a - t, c + a, t, t))  # BL corner
    for k in range(side_count):  # left edge, bottom -> top
        cells.append((c - a - t, c + a - (k + 1) * cell, t, cell))
    return cells


def _center_box(image_id: str, s: float) -> LayoutBox:
    return LayoutBox(image_id=image_id, x=0.5 - s / 2, y=0.5 - s / 2, w=s, h=s, ring=0)


def spiral_layout(center_id: str, neighbors: list[str], preset: str) -> list[LayoutBox]:
    """Distance-ordered neighbors fill ring slots clockwise from each ring's
    top-left corner; excess beyond the preset capacity is truncated."""
    s, plans, rings = _ring_geometry(preset)
    total = sum(p.capacity for p in plans)
    if len(neighbors) > total:
        log.info(
            "spiral layout: %d neighbors exceed preset %s capacity %d; truncating",
            len(neighbors), preset, total,
        )
        neighbors = neighbors[:total]
    boxes = [_center_box(center_id, s)]
    cursor = 0
    for plan, (a, t) in zip(plans, rings):
        if cursor >= len(neighbors):
            break
        for x, y, w, h in _ring_cells(a, t, plan.side_count):
            if cursor >= len(neighbors):
                break
            boxes.append(
                LayoutBox(
                    image_id=neighbors[cursor], x=x, y=y, w=w, h=h, ring=plan.ring_index
                )
            )
            cursor += 1
    return boxes


def grid_layout(ids: list[str], columns: int) -> list[LayoutBox]:
    """Row-major square cells anchored at the top-left of the unit square."""
    if columns < 1:
        raise LayoutError("columns must be >= 1")
    if not ids:
        return []
    rows = (len(ids) + columns - 1) // columns
    side = 1.0 / max(columns, rows)
    boxes = []
    for i, image_id in enumerate(ids):
        r, c = divmod(i, columns)
        boxes.append(
            LayoutBox(image_id=image_id, x=c * side, y=r * side, w=side, h=side, ring=0)
        )
    return boxes


# -- spatial spiral -------------------------------------------------------------

def data_quadrant(dx: float, dy: float) -> str:
    """Screen-convention sign quadrant; exact zeros go to the clockwise-next."""
    if dx == 0.0 and dy == 0.0:
        return "NE"
    if dx == 0.0:
        return "NE" if dy < 0 else "SW"
    if dy == 0.0:
        return "SE" if dx > 0 else "NW"
    if dx < 0 and dy < 0:
        return "NW"
    if dx > 0 and dy < 0:
        return "NE"
    if dx > 0 and dy > 0:
        return "SE"
    return "SW"


def _largest_remainder_shares(capacity: int, demands: dict[str, int]) -> dict[str, int]:
    total = sum(demands.values())
    if total <= capacity:
        return dict(demands)
    exact = {q: capacity * demands[q] / total for q in QUADRANTS}
    shares = {q: int(exact[q]) for q in QUADRANTS}
    leftover = capacity - sum(shares.values())
    order = sorted(QUADRANTS, key=lambda q: (-(exact[q] - shares[q]), QUADRANTS.index(q)))
    for q in order[:leftover]:
        shares[q] += 1
    return shares


def _quarters(box: tuple[float, float, float, float]):
    x, y, w, h = box
    return [
        (x, y, w / 2, h / 2),  # TL
        (x + w / 2, y, w / 2, h / 2),  # TR
        (x + w / 2, y + h / 2, w / 2, h / 2),  # BR
        (x, y + h / 2, w / 2, h / 2),  # BL
    ]


def spatial_spiral_layout(
    center: tuple[str, float, float],
    neighbors: list[tuple[str, float, float]],
    preset: str,
) -> list[LayoutBox]:
    """Spiral variant preserving quadrant membership.

    Each ring's clockwise cell run splits into four contiguous arcs (NW, NE,
    SE, SW order) sized by largest-remainder allocation over the still-unplaced
    per-quadrant counts; arcs fill ascending by distance. A quadrant whose
    demand outruns its arcs gets its outermost-ring cells subdivided into four
    (reverse placement order, one level deep); whatever still does not fit is
    dropped, farthest first.
    """
    center_id, cx, cy = center
    s, plans, rings = _ring_geometry(preset)

    by_quadrant: dict[str, list[tuple[float, str]]] = {q: [] for q in QUADRANTS}
    for image_id, x, y in neighbors:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise LayoutError("coordinates must be finite")
        q = data_quadrant(x - cx, y - cy)
        dist = ((x - cx) ** 2 + (y - cy) ** 2) ** 0.5
        by_quadrant[q].append((dist, image_id))
    for q in QUADRANTS:
        by_quadrant[q].sort()
    queues = {q: [image_id for _, image_id in by_quadrant[q]] for q in QUADRANTS}

    boxes = [_center_box(center_id, s)]
    # remember each quadrant's cells in the outermost ring for subdivision
    outer_cells: dict[str, list[tuple[float, float, float, float]]] = {q: [] for q in QUADRANTS}
    outer_items: dict[str, list[str]] = {q: [] for q in QUADRANTS}
    last_ring_index = plans[-1].ring_index

    for plan, (a, t) in zip(plans, rings):
        cells = _ring_cells(a, t, plan.side_count)
        remaining = {q: len(queues[q]) for q in QUADRANTS}
        if sum(remaining.values()) == 0:
            break
        shares = _largest_remainder_shares(plan.capacity, remaining)
        cursor = 0
        for q in QUADRANTS:
            take = min(shares[q], len(queues[q]))
            for _ in range(take):
                image_id = queues[q].pop(0)
                x, y, w, h = cells[cursor]
                if plan.ring_index == last_ring_index:
                    outer_cells[q].append(cells[cursor])
                    outer_items[q].append(image_id)
                else:
                    boxes.append(
                        LayoutBox(image_id, x, y, w, h, plan.ring_index, quadrant=q)
                    )
                cursor += 1

    # outermost ring: subdivide per-quadrant arcs that still have demand
    for q in QUADRANTS:
        leftover = queues[q]
        cells = outer_cells[q]
        items = outer_items[q]
        if not leftover or not cells:
            if leftover and not cells:
                log.info(
                    "spatial spiral: quadrant %s has no outer-ring cells; "
                    "dropping %d item(s)", q, len(leftover),
                )
            for cell, image_id in zip(cells, items):
                x, y, w, h = cell
                boxes.append(LayoutBox(image_id, x, y, w, h, last_ring_index, quadrant=q))
            continue
        needed = len(leftover)
        subdivide = 0
        while subdivide < len(cells) and 3 * subdivide < needed:
            subdivide += 1
        slots: list[tuple[tuple[float, float, float, float], bool]] = []
        split_from = len(cells) - subdivide  # reverse placement order
        for idx, cell in enumerate(cells):
            if idx >= split_from:
                slots.extend((quarter, True) for quarter in _quarters(cell))
            else:
                slots.append((cell, False))
        pending = items + leftover
        if len(pending) > len(slots):
            log.info(
                "spatial spiral: quadrant %s overflows even after subdivision; "
                "dropping %d farthest item(s)", q, len(pending) - len(slots),
            )
            pending = pending[: len(slots)]
        for image_id, (cell, is_sub) in zip(pending, slots):
            x, y, w, h = cell
            boxes.append(
                LayoutBox(
                    image_id, x, y, w, h, last_ring_index, quadrant=q, subdivided=is_sub
                )
            )
    return boxes


# -- SVG (debug CLI + golden geometry tests) -------------------------------------

_QUADRANT_FILL = {
    "NW": "#4c78a8",
    "NE": "#f58518",
    "SE": "#54a24b",
    "SW": "#b279a2",
    "none": "#d9d9d9",
}


def layout_svg(boxes: list[LayoutBox], size: int = 512) -> str:
    """Deterministic SVG rendering of a box list (golden-file stable)."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">'
    ]
    for box in boxes:
        fill = _QUADRANT_FILL.get(box.quadrant, "#d9d9d9")
        if box.ring == 0:
            fill = "#333333"
        parts.append(
            '<rect x="{x:.6f}" y="{y:.6f}" width="{w:.6f}" height="{h:.6f}" '
            'fill="{fill}" stroke="#ffffff" stroke-width="1" '
            'data-id="{image_id}" data-ring="{ring}" data-quadrant="{quadrant}" '
            'data-subdivided="{sub}"/>'.format(
                x=box.x * size,
                y=box.y * size,
                w=box.w * size,
                h=box.h * size,
                fill=fill,
                image_id=box.image_id,
                ring=box.ring,
                quadrant=box.quadrant,
                sub=str(box.subdivided).lower(),
            )
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
