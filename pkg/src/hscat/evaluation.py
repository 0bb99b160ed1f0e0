"""Directory evaluation and rate-distortion curve output."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .codec import CompressionModel, compress, decompress
from .data import ImageError, list_images, read_image


@dataclass
class ImageResult:
    name: str
    bpp: float
    psnr_db: float


@dataclass
class EvalReport:
    results: list[ImageResult] = field(default_factory=list)

    @property
    def mean_bpp(self) -> float:
        return math.fsum(r.bpp for r in self.results) / len(self.results)

    @property
    def mean_psnr(self) -> float:
        """Mean over images with finite PSNR; ``inf`` only when every image was reproduced exactly."""
        finite = [r.psnr_db for r in self.results if math.isfinite(r.psnr_db)]
        return math.fsum(finite) / len(finite) if finite else math.inf

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "bpp", "psnr_db"])
            for r in sorted(self.results, key=lambda r: r.name):
                w.writerow([r.name, f"{r.bpp:.6f}", metrics.format_psnr(r.psnr_db)])
            w.writerow(["mean", f"{self.mean_bpp:.6f}", metrics.format_psnr(self.mean_psnr)])


def evaluate_image(image: np.ndarray, model: CompressionModel, name: str = "") -> ImageResult:
    stream = compress(image, model).to_bytes()
    recon = decompress(stream, model).image
    h, w = image.shape[:2]
    return ImageResult(name, metrics.bpp(stream, h, w), metrics.psnr(image, recon))


def evaluate_images(images, model: CompressionModel, names=None) -> EvalReport:
    names = names or [f"img{i:03d}" for i in range(len(images))]
    return EvalReport([evaluate_image(img, model, n) for img, n in zip(images, names)])


def evaluate_directory(directory, model: CompressionModel) -> EvalReport:
    files = list_images(directory)
    if not files:
        raise ImageError(f"{directory}: no images found")
    return EvalReport([evaluate_image(read_image(p), model, p.name) for p in files])


@dataclass
class RDPoint:
    lam: float
    mean_bpp: float
    mean_psnr_db: float


def rd_points(models: list[CompressionModel], images, names=None) -> list[RDPoint]:
    pts = []
    for m in models:
        rep = evaluate_images(images, m, names)
        pts.append(RDPoint(m.lam if m.lam is not None else math.nan, rep.mean_bpp, rep.mean_psnr))
    return sorted(pts, key=lambda p: p.mean_bpp)


def write_rd_csv(points: list[RDPoint], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lambda", "mean_bpp", "mean_psnr_db"])
        for p in points:
            w.writerow([f"{p.lam:g}", f"{p.mean_bpp:.6f}", metrics.format_psnr(p.mean_psnr_db)])


def rd_svg(points: list[RDPoint], width: int = 480, height: int = 360) -> str:
    """Static SVG line plot of PSNR against bpp."""
    pad = 50
    xs = np.array([p.mean_bpp for p in points], dtype=np.float64)
    ys = np.array([p.mean_psnr_db if math.isfinite(p.mean_psnr_db) else np.nan for p in points])
    ys = np.where(np.isnan(ys), np.nanmax(ys) if np.isfinite(ys).any() else 0.0, ys)

    def scale(v, lo, hi, a, b):
        return (a + b) / 2 if hi == lo else a + (v - lo) * (b - a) / (hi - lo)

    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    px = [scale(v, x0, x1, pad, width - pad) for v in xs]
    py = [scale(v, y0, y1, height - pad, pad) for v in ys]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">bpp</text>',
           f'<text x="14" y="{height / 2}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {height / 2})">PSNR (dB)</text>',
           '<polyline fill="none" stroke="steelblue" stroke-width="2" points="'
           + " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py)) + '"/>']
    for p, a, b in zip(points, px, py):
        out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="4" fill="steelblue">'
                   f'<title>lambda={p.lam:g} bpp={p.mean_bpp:.4f} psnr={p.mean_psnr_db:.2f}</title></circle>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_rd_curve(points: list[RDPoint], prefix) -> tuple[Path, Path]:
    csv_path, svg_path = Path(f"{prefix}.csv"), Path(f"{prefix}.svg")
    write_rd_csv(points, csv_path)
    svg_path.write_text(rd_svg(points))
    return csv_path, svg_path
