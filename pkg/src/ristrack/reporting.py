"""Figure rendering for experiment result tables.

Reads the delimited output of the experiment runner back in and renders
summary figures next to it: estimation error and its lower bound versus
transmit power, grouped by beam-planning method and RIS element count.
The matplotlib Agg backend is selected explicitly so rendering works in
headless environments.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .harness import CSV_COLUMNS, MetricsRow

__all__ = ["load_rows", "render_figures"]


def load_rows(path: str | Path) -> list[MetricsRow]:
    """Parse a results table written by :func:`ristrack.harness.write_csv`.

    The runtime column is optional: deterministic-output mode omits it,
    and missing values load as zero.
    """
    path = Path(path)
    rows: list[MetricsRow] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty results file")
        required = [c for c in CSV_COLUMNS if c != "runtime_ms"]
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for rec in reader:
            rows.append(MetricsRow(
                method=rec["method"],
                power_dbm=float(rec["power_dbm"]),
                n_ris_elements=int(rec["n_ris_elements"]),
                rmse_position_m=float(rec["rmse_position_m"]),
                rmse_aoa=float(rec["rmse_aoa"]),
                bcrb_position_m=float(rec["bcrb_position_m"]),
                bcrb_aoa=float(rec["bcrb_aoa"]),
                runtime_ms=float(rec.get("runtime_ms") or 0.0),
            ))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def _grouped(rows: list[MetricsRow]) -> dict:
    """Rows keyed by (method, element count), each sorted by power."""
    groups: dict[tuple[str, int], list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.n_ris_elements), []).append(r)
    for grp in groups.values():
        grp.sort(key=lambda r: r.power_dbm)
    return dict(sorted(groups.items()))


def render_figures(rows: list[MetricsRow], out_dir: str | Path,
                   stem: str = "results") -> list[Path]:
    """Render one PNG for position error and one for angle error.

    Each figure shows RMSE (solid, markers) and the corresponding lower
    bound (dashed) against transmit power, one line pair per
    (method, element count) group.  Returns the created file paths.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = _grouped(rows)
    created: list[Path] = []
    panels = (
        (f"{stem}_position.png", "rmse_position_m", "bcrb_position_m",
         "position RMSE (m)"),
        (f"{stem}_aoa.png", "rmse_aoa", "bcrb_aoa",
         "arrival-cosine RMSE"),
    )
    for fname, err_attr, bnd_attr, ylabel in panels:
        fig, ax = plt.subplots(figsize=(6.4, 4.2))
        values = []
        for (method, n_ris), grp in groups.items():
            label = f"{method}, {n_ris} elements"
            x = [g.power_dbm for g in grp]
            err = [getattr(g, err_attr) for g in grp]
            bnd = [getattr(g, bnd_attr) for g in grp]
            values += err + bnd
            line, = ax.plot(x, err, marker="o", label=label)
            ax.plot(x, bnd, linestyle="--", color=line.get_color(),
                    label=f"{label} (bound)")
        if values and min(values) > 0:
            ax.set_yscale("log")
        ax.set_xlabel("transmit power (dBm)")
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
        out = out_dir / fname
        fig.savefig(out, dpi=150, bbox_inches="tight")
        plt.close(fig)
        created.append(out)
    return created
