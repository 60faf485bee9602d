"""Machine-readable reports (CSV/JSON) and the figures rendered next to them."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import bev_corners  # noqa: E402

PathLike = Union[str, Path]


def write_csv(path: PathLike, rows: Sequence[dict]) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_json(path: PathLike, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _figure(width: float = 6.0, height: float = 4.0):
    fig, ax = plt.subplots(figsize=(width, height))
    ax.grid(True, alpha=0.3)
    return fig, ax


def plot_loss_trace(trace: Sequence[dict], path: PathLike) -> None:
    fig, ax = _figure()
    epochs = [r["epoch"] for r in trace]
    for key, style in (("total", "-"), ("cls", "--"), ("reg", ":")):
        ax.plot(epochs, [r[key] for r in trace], style, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pr_curves(curves: dict, path: PathLike) -> None:
    """``curves`` maps a legend label to a :class:`~pifenet.evaluation.PRCurve`."""
    fig, ax = _figure()
    for name, c in curves.items():
        ap = "n/a" if c.ap is None else f"{c.ap:.3f}"
        ax.step(c.recalls, c.precisions, where="post", label=f"{name} (AP40 {ap})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bench(report: dict, path: PathLike) -> None:
    rows = [r for r in report["stages"] if r["stage"] != "end-to-end"]
    names = [r["stage"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = _figure(7, 4)
    ax.bar(x - 0.2, [r["mean_ms"] for r in rows], 0.4, label="measured (CPU)")
    ax.bar(x + 0.2, [r["reference_ms"] for r in rows], 0.4, label="published (GPU)")
    ax.set_xticks(x, names, rotation=15)
    ax.set_ylabel("ms")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def dump_bev_ppm(path: PathLike, pillar_cfg, boxes_red: Iterable = (), boxes_green: Iterable = (),
                 points: np.ndarray = None, scale: int = 4) -> None:
    """Binary PPM raster of points (grey), ground truth (green) and detections (red)."""
    H, W = pillar_cfg.grid_y * scale, pillar_cfg.grid_x * scale
    img = np.zeros((H, W, 3), dtype=np.uint8)

    def to_px(xy):
        col = (xy[:, 0] - pillar_cfg.x_min) / pillar_cfg.pillar_x * scale
        row = (xy[:, 1] - pillar_cfg.y_min) / pillar_cfg.pillar_y * scale
        return row.astype(int), col.astype(int)

    if points is not None and len(points):
        r, c = to_px(points)
        ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        img[r[ok], c[ok]] = 110
    for boxes, color in ((boxes_green, (0, 220, 0)), (boxes_red, (230, 0, 0))):
        for box in boxes:
            corners = bev_corners(box)
            for k in range(4):
                a, b = corners[k], corners[(k + 1) % 4]
                t = np.linspace(0, 1, 64)[:, None]
                r, c = to_px(a + t * (b - a))
                ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
                img[r[ok], c[ok]] = color
    img = img[::-1]  # +y up
    with open(path, "wb") as fh:
        fh.write(f"P6 {W} {H} 255\n".encode())
        fh.write(img.tobytes())


def plot_occupancy(counts: np.ndarray, path: PathLike) -> None:
    """Points per pillar over the BEV grid, +y up."""
    fig, ax = _figure(5, 5)
    ax.grid(False)
    im = ax.imshow(counts, origin="lower", cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="points per pillar")
    ax.set_xlabel("ix")
    ax.set_ylabel("iy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
