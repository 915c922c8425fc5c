"""Plot-data export: CSV always, SVG when matplotlib is available."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyOutputError

KINDS = ("pca", "sweep", "curve")


def _write_csv(path: Path, header: list[str], rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def export_plots(metrics, kind: str, out, svg: bool = True) -> list[Path]:
    """Write plot data for ``kind``; returns the files written.

    ``pca``: ``metrics`` maps ``projections`` (n, 2) and optional ``labels``.
    ``sweep``: ``metrics`` is a list of rows with ``method``, ``H``, ``mean_return``.
    ``curve``: ``metrics`` maps a series name to a list of values.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; known: {KINDS}")
    if metrics is None or len(metrics) == 0:
        raise EmptyOutputError("no metrics to plot")
    out = Path(out)
    files = [getattr(_Exporters, kind)(metrics, out)]
    if svg:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return files
        p = out / f"{kind}.svg"
        # fixed id salt and metadata keep reruns byte-identical
        with matplotlib.rc_context({"svg.hashsalt": "ldcq"}):
            fig, ax = plt.subplots(figsize=(4.5, 3.5))
            getattr(_Renderers, kind)(metrics, ax)
            fig.tight_layout()
            fig.savefig(p, format="svg", metadata={"Date": None, "Creator": None})
            plt.close(fig)
        files.append(p)
    return files


class _Exporters:
    @staticmethod
    def pca(m, out: Path) -> Path:
        proj = np.asarray(m["projections"])
        labels = m.get("labels")
        labels = np.zeros(len(proj), int) if labels is None else np.asarray(labels)
        return _write_csv(out / "pca.csv", ["pc1", "pc2", "label"],
                          ((float(p[0]), float(p[1]), int(l)) for p, l in zip(proj, labels)))

    @staticmethod
    def sweep(rows, out: Path) -> Path:
        return _write_csv(out / "sweep.csv", ["method", "H", "mean_return"],
                          ((r["method"], int(r["H"]), float(r["mean_return"])) for r in rows))

    @staticmethod
    def curve(series, out: Path) -> Path:
        return _write_csv(out / "curve.csv", ["series", "step", "value"],
                          ((name, i, float(v)) for name, vals in series.items()
                           for i, v in enumerate(vals)))


class _Renderers:
    @staticmethod
    def pca(m, ax) -> None:
        proj = np.asarray(m["projections"])
        ax.scatter(proj[:, 0], proj[:, 1], c=m.get("labels"), s=6)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")

    @staticmethod
    def sweep(rows, ax) -> None:
        for method in sorted({r["method"] for r in rows}):
            pts = sorted((int(r["H"]), float(r["mean_return"])) for r in rows if r["method"] == method)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
        ax.set_xlabel("H")
        ax.set_ylabel("mean return")
        ax.legend()

    @staticmethod
    def curve(series, ax) -> None:
        for name, vals in series.items():
            ax.plot(np.arange(len(vals)), vals, label=name)
        ax.set_xlabel("step")
        ax.legend()
