"""Static HTML gallery of retrieval results with embedded thumbnails."""

from __future__ import annotations

import base64
import html
import io
from pathlib import Path

import numpy as np

from .artifacts import atomic_write_text
from .errors import MissingRankedLists
from .evaluation import EvalReport
from .records import ImageCollection

_STYLE = """
body { font-family: sans-serif; background: #fafafa; margin: 1.5em; }
table { border-collapse: collapse; }
td { padding: 4px; text-align: center; vertical-align: top; font-size: 11px; }
img { width: 64px; height: 64px; image-rendering: pixelated; border: 3px solid #ddd; }
img.gt { border-color: #2a9d2a; }
td.reform { max-width: 160px; text-align: left; }
span.miss { color: #c0392b; font-weight: bold; }
"""


def _png_data_uri(pixels: np.ndarray) -> str:
    from PIL import Image

    arr = np.clip(pixels * 255.0, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def export_gallery(
    report: EvalReport,
    collection: ImageCollection,
    path: str | Path,
    top_k: int = 10,
    mode: str | None = None,
) -> str:
    """Write a self-contained HTML grid of top-k candidates per query.

    Each row shows the reference image, the reformulation text, and the
    top-k retrieved candidates with the ground truth outlined; rows whose
    ground truth fell outside the top-k carry an explicit marker.
    """
    mode = mode or report.protocol.get("gallery_mode", "reformulated")
    rows = report.rankings.get(mode)
    if not rows:
        raise MissingRankedLists(
            f"report carries no ranked lists for mode {mode!r}; "
            "re-run evaluate with keep_rankings > 0"
        )

    uris: dict[str, str] = {}

    def uri(image_id: str) -> str:
        if image_id not in uris:
            uris[image_id] = _png_data_uri(collection.get(image_id).pixels)
        return uris[image_id]

    parts = [
        "<!DOCTYPE html>",
        "<html><head><meta charset=\"utf-8\">",
        f"<title>retrieval gallery ({html.escape(mode)})</title>",
        f"<style>{_STYLE}</style></head><body>",
        f"<h2>Top-{top_k} retrievals, query mode: {html.escape(mode)}</h2>",
        "<table>",
    ]
    header = ["reference", "reformulation"] + [f"#{i + 1}" for i in range(top_k)]
    parts.append("<tr>" + "".join(f"<td><b>{h}</b></td>" for h in header) + "</tr>")

    for row in rows:
        ranked = row["ranked"][:top_k]
        gt = row["gt_target_id"]
        cells = [
            f'<td><img src="{uri(row["ref_id"])}" alt="{html.escape(row["ref_id"])}">'
            f'<br>{html.escape(row["ref_id"])}</td>',
            f'<td class="reform">{html.escape(row["reformulation"])}'
            + (
                '<br><span class="miss">gt not retrieved</span>'
                if gt not in [rid for rid, _ in ranked]
                else ""
            )
            + "</td>",
        ]
        for rid, score in ranked:
            klass = ' class="gt"' if rid == gt else ""
            cells.append(
                f'<td><img src="{uri(rid)}"{klass} alt="{html.escape(rid)}">'
                f"<br>{html.escape(rid)}<br>{score:.3f}</td>"
            )
        parts.append("<tr>" + "".join(cells) + "</tr>")

    parts.append("</table></body></html>")
    document = "\n".join(parts)
    atomic_write_text(path, document)
    return document
