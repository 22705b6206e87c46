"""Accuracy scoring: remission CV, Clarke error grid, gMAD and the ISO limits.

Clarke zones, in order of precedence (reference ``g``, estimate ``e``)::

    A  g <= 70 and e <= 70, or 0.8 g <= e <= 1.2 g
    E  g >= 180 and e <= 70, or g <= 70 and e >= 180
    C  70 <= g <= 290 and e >= g + 110, or 130 <= g <= 180 and e <= 1.4 g - 182
    D  g >= 240 and 70 <= e <= 180, or g <= 175/3 and 70 <= e <= 180,
       or 175/3 <= g <= 70 and e >= 1.2 g
    B  everything else
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ZONES = "ABCDE"
LOW_RANGE_MAX = 75.0  # mg/dl; ISO and gMAD split


def cv_remission(groups: Iterable[Sequence[float]]) -> float:
    """Mean over groups of the sample coefficient of variation, in percent."""
    cvs = []
    for grp in groups:
        x = np.asarray(grp, dtype=float)
        if x.size < 2:
            raise ValueError("each group needs at least two estimates")
        m = x.mean()
        if m == 0:
            raise ValueError("group mean is zero")
        cvs.append(100.0 * x.std(ddof=1) / abs(m))
    if not cvs:
        raise ValueError("no groups")
    return float(np.mean(cvs))


def ceg_zone(g: float, e: float) -> str:
    if g < 0 or e < 0:
        raise ValueError("glucose values must be non-negative")
    if (g <= 70 and e <= 70) or 0.8 * g <= e <= 1.2 * g:
        return "A"
    if (g >= 180 and e <= 70) or (g <= 70 and e >= 180):
        return "E"
    if (70 <= g <= 290 and e >= g + 110) or (130 <= g <= 180 and e <= 1.4 * g - 182):
        return "C"
    if ((g >= 240 and 70 <= e <= 180) or (g <= 175 / 3 and 70 <= e <= 180)
            or (175 / 3 <= g <= 70 and e >= 1.2 * g)):
        return "D"
    return "B"


def ceg_zones(g: Sequence[float], e: Sequence[float]) -> list:
    return [ceg_zone(float(a), float(b)) for a, b in zip(g, e, strict=True)]


def zone_counts(zones: Iterable[str]) -> dict:
    counts = dict.fromkeys(ZONES, 0)
    for z in zones:
        counts[z] += 1
    return counts


def compliant(counts: dict) -> bool:
    """At least 95 % in A, at most 5 % in B, nothing in C to E."""
    total = sum(counts.values())
    if total == 0:
        return False
    return (counts["A"] >= 0.95 * total and counts["B"] <= 0.05 * total
            and counts["C"] + counts["D"] + counts["E"] == 0)


def _sigmoid(u, u0: float, s: float = 10.0):
    return 1.0 / (1.0 + np.exp(-(np.asarray(u, dtype=float) - u0) / s))


def gmad_weight(g, e, low: float = 85.0, high: float = 155.0, s: float = 10.0):
    """Severity weight, at least 1.

    Overestimates in the hypoglycaemic range get up to ``2.5``, underestimates
    in the hyperglycaemic range up to ``2``; sigmoids of width ``s`` smooth
    the transitions at ``low`` and ``high``.
    """
    g = np.asarray(g, dtype=float)
    e = np.asarray(e, dtype=float)
    w = np.ones(np.broadcast(g, e).shape)
    lo = (g <= low) & (e >= g)
    hi = (g >= high) & (e <= g)
    w = np.where(lo, 1.0 + 1.5 * (1.0 - _sigmoid(g, low, s)) * _sigmoid(e, low, s), w)
    w = np.where(hi, 1.0 + _sigmoid(g, high, s) * (1.0 - _sigmoid(e, high, s)), w)
    return w


def gmad(g: Sequence[float], e: Sequence[float], **kwargs) -> float:
    g = np.asarray(g, dtype=float)
    e = np.asarray(e, dtype=float)
    if g.size == 0:
        raise ValueError("gMAD of an empty set")
    if g.shape != e.shape:
        raise ValueError("truth and estimate differ in length")
    return float(np.mean(np.abs(g - e) * gmad_weight(g, e, **kwargs)))


def iso_pass(g: float, e: float) -> bool:
    if g <= LOW_RANGE_MAX:
        return abs(g - e) <= 15.0
    return abs(g - e) <= 0.2 * g


def iso_check(g: Sequence[float], e: Sequence[float]) -> tuple[bool, list]:
    passes = [iso_pass(float(a), float(b)) for a, b in zip(g, e, strict=True)]
    return all(passes), passes


@dataclass
class EvaluationReport:
    n: int
    cv_r: float | None
    gmad_low: float | None
    gmad_high: float | None
    ceg_counts: dict
    ceg_compliant: bool
    iso_pass: bool
    iso_pass_rate: float
    zones: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "cv_r": self.cv_r,
            "gmad_low": self.gmad_low,
            "gmad_high": self.gmad_high,
            "ceg_counts": self.ceg_counts,
            "ceg_compliant": self.ceg_compliant,
            "iso_pass": self.iso_pass,
            "iso_pass_rate": self.iso_pass_rate,
        }


def evaluate(g: Sequence[float], e: Sequence[float], r_c: Sequence[float] | None = None) -> EvaluationReport:
    """Score estimates against truth; ``r_c`` adds the remission CV per glucose level."""
    g = np.asarray(g, dtype=float)
    e = np.asarray(e, dtype=float)
    if g.size == 0:
        raise ValueError("nothing to evaluate")
    zones = ceg_zones(g, e)
    counts = zone_counts(zones)
    ok, passes = iso_check(g, e)
    low = g <= LOW_RANGE_MAX
    cv = None
    if r_c is not None:
        r_c = np.asarray(r_c, dtype=float)
        groups = [r_c[g == lvl] for lvl in np.unique(g)]
        groups = [grp for grp in groups if grp.size >= 2]
        cv = cv_remission(groups) if groups else None
    return EvaluationReport(
        n=int(g.size),
        cv_r=cv,
        gmad_low=gmad(g[low], e[low]) if low.any() else None,
        gmad_high=gmad(g[~low], e[~low]) if (~low).any() else None,
        ceg_counts=counts,
        ceg_compliant=compliant(counts),
        iso_pass=ok,
        iso_pass_rate=float(np.mean(passes)),
        zones=zones,
    )


# -- plotting ------------------------------------------------------------------------

# zone boundary polylines of the Clarke grid on [0, 400]^2
CEG_LINES = [
    [(0, 70), (175 / 3, 70), (320, 400)],
    [(70, 0), (70, 56), (400, 320)],
    [(70, 84), (70, 400)],
    [(0, 180), (70, 180), (290, 400)],
    [(70, 180), (70, 400)],
    [(130, 0), (180, 70), (400, 70)],
    [(180, 0), (180, 70)],
    [(240, 70), (240, 180), (400, 180)],
]


def ceg_svg(g: Sequence[float], e: Sequence[float], size: int = 400) -> str:
    """Scatter of estimate against truth with the zone boundaries, as SVG text."""
    scale = size / 400.0

    def xy(a, b):
        return f"{a * scale:.2f},{(400 - b) * scale:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white" stroke="black"/>',
             f'<polyline points="{xy(0, 0)} {xy(400, 400)}" fill="none" stroke="gray" '
             'stroke-dasharray="4 3"/>']
    for line in CEG_LINES:
        pts = " ".join(xy(a, b) for a, b in line)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="black"/>')
    for a, b in zip(g, e):
        a, b = min(float(a), 400.0), min(float(b), 400.0)
        x, y = xy(a, b).split(",")
        parts.append(f'<circle cx="{x}" cy="{y}" r="2.5" fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
