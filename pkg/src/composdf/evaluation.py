"""Mapping-quality metrics between a reconstructed mesh and a reference
mesh: accuracy, completion, Chamfer-L1, and F-score, computed over
area-weighted surface samples, plus CSV / table reporting with the
storage breakdown alongside.

Protocol notes (fixed for every comparison made by this package):
point-to-point distances between surface samples rather than exact
point-to-triangle distances, and a strict less-than test against the
threshold. Both meshes are sampled with the same derived seed, so
comparing a mesh against itself yields exact zeros.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .embedding import StorageReport

DEFAULT_SAMPLES = 1_000_000


class EvalError(ValueError):
    """Raised when metric inputs cannot be evaluated (e.g. an empty mesh)."""


def sample_surface(mesh, n: int, rng) -> np.ndarray:
    """Draw `n` points uniformly over the mesh surface, area weighted.

    Triangles are picked proportionally to area, then a point is placed by
    the reflected-parallelogram map a + u(b-a) + v(c-a) with (u, v) folded
    back into the lower triangle. Returns (n, 3) float64.
    """
    if mesh.n_triangles == 0:
        raise EvalError("cannot sample the surface of an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not (total > 0):
        raise EvalError("mesh has zero total surface area")
    tri = rng.choice(len(areas), size=int(n), p=areas / total)
    u = rng.random(int(n))
    v = rng.random(int(n))
    over = u + v > 1.0
    u[over] = 1.0 - u[over]
    v[over] = 1.0 - v[over]
    verts = mesh.vertices.astype(np.float64)
    a = verts[mesh.triangles[tri, 0]]
    b = verts[mesh.triangles[tri, 1]]
    c = verts[mesh.triangles[tri, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def nearest_distances(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query point to its nearest target point."""
    dist, _ = cKDTree(target).query(query, k=1, workers=-1)
    return np.asarray(dist, dtype=np.float64)


@dataclass(frozen=True)
class MetricReport:
    """One row of the quality table, distances in centimeters."""

    accuracy_cm: float
    completion_cm: float
    chamfer_l1_cm: float
    f_score_percent: float
    threshold_cm: float
    n_samples: int
    storage: Optional[StorageReport] = None

    def __post_init__(self):
        halfsum = 0.5 * (self.accuracy_cm + self.completion_cm)
        if not np.isclose(self.chamfer_l1_cm, halfsum, rtol=1e-9, atol=1e-12):
            raise ValueError("chamfer_l1_cm must equal (accuracy + completion)/2")
        if not (0.0 <= self.f_score_percent <= 100.0):
            raise ValueError("f_score_percent must lie in [0, 100]")


def compute_metrics(recon_mesh, gt_mesh, threshold_cm: float,
                    n: int = DEFAULT_SAMPLES, seed: int = 0,
                    storage: Optional[StorageReport] = None) -> MetricReport:
    """Compare a reconstructed mesh against a reference mesh.

    accuracy: mean nearest-neighbor distance reconstruction -> reference,
    completion: the reverse direction, Chamfer-L1 their mean, and
    F-score 2PR/(P+R) in percent where precision/recall count samples
    strictly closer than the threshold. Distances are reported in cm
    (mesh units are meters). Each mesh is sampled with an identically
    seeded stream so identical meshes compare to exact zeros.
    """
    if recon_mesh.n_triangles == 0 or gt_mesh.n_triangles == 0:
        raise EvalError("metric computation needs two nonempty meshes")
    recon_pts = sample_surface(recon_mesh, n, np.random.default_rng(seed))
    gt_pts = sample_surface(gt_mesh, n, np.random.default_rng(seed))
    d_rg = nearest_distances(recon_pts, gt_pts) * 100.0
    d_gr = nearest_distances(gt_pts, recon_pts) * 100.0
    accuracy = float(d_rg.mean())
    completion = float(d_gr.mean())
    precision = float(np.mean(d_rg < threshold_cm))
    recall = float(np.mean(d_gr < threshold_cm))
    if precision + recall > 0:
        f_score = 200.0 * precision * recall / (precision + recall)
    else:
        f_score = 0.0
    return MetricReport(
        accuracy_cm=accuracy,
        completion_cm=completion,
        chamfer_l1_cm=0.5 * (accuracy + completion),
        f_score_percent=f_score,
        threshold_cm=float(threshold_cm),
        n_samples=int(n),
        storage=storage,
    )


# reporting: column order follows the quality-then-storage table layout
CSV_COLUMNS = ("method", "acc_cm", "com_cm", "chamfer_l1_cm", "f_score",
               "rep_kb", "total_kb", "threshold_cm", "n_samples")

TABLE_HEADERS = ("Method", "Acc.(cm)", "Com.(cm)", "C-l1(cm)", "F-score",
                 "Rep.(kB)", "Total(kB)")


def _kb(n_bytes) -> float:
    return n_bytes / 1024.0


def csv_header() -> str:
    return ",".join(CSV_COLUMNS)


def csv_row(report: MetricReport, method: str = "") -> str:
    if "," in method:
        raise ValueError("method label must not contain commas")
    rep = f"{_kb(report.storage.rep_bytes):.3f}" if report.storage else ""
    tot = f"{_kb(report.storage.total_bytes):.3f}" if report.storage else ""
    vals = [method,
            f"{report.accuracy_cm:.6g}", f"{report.completion_cm:.6g}",
            f"{report.chamfer_l1_cm:.6g}", f"{report.f_score_percent:.6g}",
            rep, tot,
            f"{report.threshold_cm:.6g}", str(report.n_samples)]
    return ",".join(vals)


def format_table(rows) -> str:
    """Human-readable quality/storage table from (label, report) pairs."""
    body = []
    for label, rep in rows:
        cells = [label,
                 f"{rep.accuracy_cm:.2f}", f"{rep.completion_cm:.2f}",
                 f"{rep.chamfer_l1_cm:.2f}", f"{rep.f_score_percent:.2f}"]
        if rep.storage is not None:
            cells += [f"{_kb(rep.storage.rep_bytes):.1f}",
                      f"{_kb(rep.storage.total_bytes):.1f}"]
        else:
            cells += ["-", "-"]
        body.append(cells)
    table = [list(TABLE_HEADERS)] + body
    widths = [max(len(r[c]) for r in table) for c in range(len(TABLE_HEADERS))]
    lines = []
    for i, row in enumerate(table):
        lines.append("  ".join(cell.rjust(w) if j else cell.ljust(w)
                               for j, (cell, w) in enumerate(zip(row, widths))))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
