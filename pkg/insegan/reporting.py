"""Qualitative figure grids and PDF summaries of evaluation reports."""

import logging
import textwrap
from datetime import datetime
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .inference import SegmentationResult  # noqa: E402
from .metrics import EvalReport  # noqa: E402

logger = logging.getLogger(__name__)

LABEL_CMAP = "tab10"


def _show(ax, image: np.ndarray, title: str, cmap: str = "viridis", vmax=None) -> None:
    ax.imshow(image, cmap=cmap, vmin=0 if vmax is not None else None, vmax=vmax,
              interpolation="nearest")
    ax.set_title(title, fontsize=7)
    ax.axis("off")


def plot_grid(path: Path, rows: Sequence[tuple]) -> Path:
    """Several scenes stacked; ``rows`` holds (image, result, gt, clean) tuples."""
    if not rows:
        raise ValueError("nothing to plot")
    n = max(row[1].n_instances for row in rows)
    columns = 4 + n
    fig, axes = plt.subplots(len(rows), columns, figsize=(1.4 * columns, 1.5 * len(rows)),
                             squeeze=False)
    for r, (image, result, gt, clean) in enumerate(rows):
        _show(axes[r, 0], np.asarray(image).reshape(result.mask.shape), "input")
        _show(axes[r, 1], result.composite.cpu().numpy(), "rendered")
        _show(axes[r, 2], np.asarray(gt), "ground truth", LABEL_CMAP, vmax=9)
        _show(axes[r, 3], clean, "segmentation", LABEL_CMAP, vmax=9)
        for k in range(n):
            if k < result.n_instances:
                _show(axes[r, 4 + k], result.instance_depths[k].cpu().numpy(), f"instance {k + 1}")
            else:
                axes[r, 4 + k].axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path


def export_pdf(reports: Sequence[EvalReport], path: Path) -> Path:
    """Text summary of one or more reports as a PDF page.

    Raises:
        RuntimeError: If reportlab is not installed.
    """
    try:
        from reportlab.lib.pagesizes import letter
        from reportlab.pdfgen import canvas
    except ImportError as exc:
        raise RuntimeError(
            "PDF export requires the reportlab package. Install with: pip install reportlab"
        ) from exc

    path = Path(path)
    canvas_pdf = canvas.Canvas(str(path), pagesize=letter)
    width, height = letter
    text_obj = canvas_pdf.beginText(40, height - 40)
    text_obj.textLine("Instance segmentation report")
    text_obj.textLine(f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    text_obj.textLine("")
    for report in reports:
        for line in report.summary_table().splitlines():
            text_obj.textLine(line)
        if report.checkpoint_id:
            text_obj.textLine(f"checkpoint: {report.checkpoint_id}")
        for wrapped in textwrap.wrap(f"config: {report.config}", width=100):
            text_obj.textLine(wrapped)
        text_obj.textLine("")
    canvas_pdf.drawText(text_obj)
    canvas_pdf.showPage()
    canvas_pdf.save()
    logger.info("Wrote %s", path)
    return path
