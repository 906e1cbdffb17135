"""Natural-adversarial frontier: normalisation, Pareto extraction, AUC and export."""

from __future__ import annotations

import csv
from collections import Counter
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import ContractError


@dataclass(frozen=True)
class FrontierPoint:
    lam: float
    naturalness: float
    adversarialness: float
    run_id: str = ""
    seed: int = 0

    @property
    def xy(self) -> tuple[float, float]:
        return (self.naturalness, self.adversarialness)


@dataclass
class Frontier:
    all_points: list[FrontierPoint]
    pareto_points: list[FrontierPoint]
    auc: float
    normalization: tuple[float, float]
    meta: dict = field(default_factory=dict)


def normalize_adversarialness(mean_robot_return: float, lo: float, hi: float) -> float:
    """Map the negative robot return affinely from [lo, hi] onto [0, 1], clipping outside."""
    if not lo < hi:
        raise ContractError(f"normalisation needs lo < hi, got ({lo}, {hi})")
    x = (-float(mean_robot_return) - lo) / (hi - lo)
    return float(min(1.0, max(0.0, x)))


def dominates(q: tuple[float, float], p: tuple[float, float]) -> bool:
    return q[0] >= p[0] and q[1] >= p[1] and (q[0] > p[0] or q[1] > p[1])


def pareto_extract(points: Sequence[FrontierPoint]) -> list[FrontierPoint]:
    """Non-dominated points (both coordinates maximised), deduplicated, sorted by naturalness.

    Sweeps points in decreasing naturalness; a point survives when its
    adversarialness beats everything at least as natural.
    """
    if not points:
        raise ContractError("pareto_extract needs at least one point")
    order = sorted(points, key=lambda p: (-p.naturalness, -p.adversarialness, p.lam, p.run_id))
    kept: list[FrontierPoint] = []
    best_adv = -np.inf
    seen: set[tuple[float, float]] = set()
    for p in order:
        if p.xy in seen:
            continue
        if p.adversarialness > best_adv:
            kept.append(p)
            best_adv = p.adversarialness
            seen.add(p.xy)
    return sorted(kept, key=lambda p: p.naturalness)


def auc(pareto: Sequence[FrontierPoint] | Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under the frontier polyline, extended flat to x=0 and x=1."""
    if len(pareto) == 0:
        raise ContractError("AUC of an empty frontier")
    pts = [p.xy if isinstance(p, FrontierPoint) else (float(p[0]), float(p[1])) for p in pareto]
    xs = [x for x, _ in pts]
    if any(b < a for a, b in zip(xs, xs[1:])):
        raise ContractError("frontier must be sorted by naturalness")
    area = pts[0][0] * pts[0][1] + (1.0 - pts[-1][0]) * pts[-1][1]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return float(area)


def build_frontier(points: Iterable[FrontierPoint], normalization: tuple[float, float], meta: dict | None = None) -> Frontier:
    pts = list(points)
    if not pts:
        raise ContractError("no successful runs to build a frontier from")
    pareto = pareto_extract(pts)
    return Frontier(all_points=pts, pareto_points=pareto, auc=auc(pareto),
                    normalization=(float(normalization[0]), float(normalization[1])), meta=dict(meta or {}))


def points_from_runs(runs: Iterable[dict], normalization: tuple[float, float]) -> list[FrontierPoint]:
    """Frontier points from scan run summaries (``lam``, ``seed``, ``naturalness``, ``robot_return``)."""
    lo, hi = normalization
    return [
        FrontierPoint(
            lam=float(r["lam"]),
            naturalness=float(r["naturalness"]),
            adversarialness=normalize_adversarialness(r["robot_return"], lo, hi),
            run_id=str(r.get("run_id", "")),
            seed=int(r.get("seed", 0)),
        )
        for r in runs
    ]


# ----------------------------------------------------------------------
# Export
# ----------------------------------------------------------------------

CSV_COLUMNS = ["run_id", "lambda", "seed", "naturalness", "adversarialness", "pareto_flag"]


def _ordered_points(fr: Frontier) -> list[FrontierPoint]:
    return sorted(fr.all_points, key=lambda p: (p.seed, p.lam, p.run_id))


def frontier_csv(fr: Frontier) -> str:
    # match by value so frontiers read back from JSON keep their flags; each Pareto point flags one row
    remaining = Counter(fr.pareto_points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in _ordered_points(fr):
        flag = remaining[p] > 0
        remaining[p] -= flag
        w.writerow([p.run_id, repr(p.lam), p.seed, repr(p.naturalness), repr(p.adversarialness), int(flag)])
    return buf.getvalue()


def read_frontier_csv(text: str) -> list[tuple[FrontierPoint, bool]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        (FrontierPoint(lam=float(r["lambda"]), naturalness=float(r["naturalness"]),
                       adversarialness=float(r["adversarialness"]), run_id=r["run_id"], seed=int(r["seed"])),
         r["pareto_flag"] == "1")
        for r in rows
    ]


def frontier_json(fr: Frontier) -> str:
    doc = {
        "auc": fr.auc,
        "normalization": {"neg_return_lo": fr.normalization[0], "neg_return_hi": fr.normalization[1]},
        "n_points": len(fr.all_points),
        "pareto": [asdict(p) for p in fr.pareto_points],
        "points": [asdict(p) for p in _ordered_points(fr)],
        **({"meta": fr.meta} if fr.meta else {}),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def frontier_from_json(text: str) -> Frontier:
    doc = json.loads(text)
    pts = [FrontierPoint(**p) for p in doc["points"]]
    par = [FrontierPoint(**p) for p in doc["pareto"]]
    norm = doc["normalization"]
    return Frontier(pts, par, float(doc["auc"]), (norm["neg_return_lo"], norm["neg_return_hi"]), doc.get("meta", {}))


def frontier_svg(fr: Frontier, size: int = 400, margin: int = 40) -> str:
    """Static scatter of every run plus the frontier polyline (extended to both edges)."""
    span = size - 2 * margin

    def sx(x):
        return f"{margin + x * span:.2f}"

    def sy(y):
        return f"{size - margin - y * span:.2f}"

    par = fr.pareto_points
    line = [(0.0, par[0].adversarialness)] + [p.xy for p in par] + [(1.0, par[-1].adversarialness)]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" fill="none" stroke="#444"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">naturalness</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">adversarialness</text>',
        f'<text x="{size - margin}" y="{margin - 8}" text-anchor="end" font-size="12">AUC {fr.auc:.3f}</text>',
    ]
    for p in _ordered_points(fr):
        out.append(f'<circle class="run" cx="{sx(p.naturalness)}" cy="{sy(p.adversarialness)}" r="3" '
                   f'fill="#1f77b4"><title>lambda={p.lam:.3g} seed={p.seed}</title></circle>')
    pts = " ".join(f"{sx(x)},{sy(y)}" for x, y in line)
    out.append(f'<polyline class="frontier" points="{pts}" fill="none" stroke="#ff7f0e" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_frontier(fr: Frontier, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"csv": d / "frontier.csv", "json": d / "frontier.json", "svg": d / "frontier.svg"}
    files["csv"].write_text(frontier_csv(fr))
    files["json"].write_text(frontier_json(fr))
    files["svg"].write_text(frontier_svg(fr))
    return files
