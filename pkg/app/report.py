"""
Monitoring report, attribution CSV export and attribution heatmaps.
"""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core import FeatureGrouping, format_float
from app.errors import DomainError, SchemaError, ShapeError
from app.monitor import ShiftExplanation
from app.shapley import Attribution

logger = logging.getLogger(__name__)

REPORT_VERSION = "1"
REPORT_KEYS = ("version", "seed", "config", "transport", "performance", "drift", "instances", "metrics", "warnings")
CSV_COLUMNS = ["instance_index", "player_id", "value", "method", "v_empty", "v_full"]


def build_report(explanation: ShiftExplanation, seed: int, config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Assemble the report dictionary.

    Instance indices refer to rows of the original target file. Nothing here
    depends on the worker count.
    """
    performance: Dict[str, Any] = {
        "estimated_target_loss": explanation.estimated_target_loss,
        "source_loss": explanation.source_loss,
    }
    if explanation.label_transport_accuracy is not None:
        performance["label_transport_accuracy"] = explanation.label_transport_accuracy

    transport = explanation.transport
    instances = []
    for j, attribution in enumerate(explanation.attributions):
        instances.append({
            "index": int(explanation.target_index[j]),
            "estimated_label": int(explanation.transfer.estimated_labels[j]),
            "attribution": {
                "method": attribution.method,
                "players": attribution.player_kind,
                "values": [float(v) for v in attribution.values],
                "v_empty": float(attribution.v_empty),
                "v_full": float(attribution.v_full),
            },
        })

    return {
        "version": REPORT_VERSION,
        "seed": int(seed),
        "config": config,
        "transport": {
            "objective": transport.coupling.objective,
            "matched_source_index": [int(i) for i in transport.matched_source_rows()],
        },
        "performance": performance,
        "drift": {
            "statistic": explanation.drift.statistic.tolist(),
            "p_value": explanation.drift.p_value.tolist(),
            "mask": [bool(m) for m in explanation.drift.mask],
        },
        "instances": instances,
        "metrics": {},
        "warnings": list(explanation.warnings),
    }


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(payload))
    return path


def dumps(payload: Dict[str, Any]) -> str:
    """Stable JSON text: fixed indentation, insertion-ordered keys, trailing newline."""
    return json.dumps(payload, indent=2, allow_nan=False) + "\n"


def load_report(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a report and check its top-level keys."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            report = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"File not found: {path}")
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid JSON in {path}: {e}")
    missing = [key for key in REPORT_KEYS if key not in report]
    if missing:
        raise SchemaError(f"Report {path} lacks keys {missing}")
    if report["version"] != REPORT_VERSION:
        raise SchemaError(f"Unsupported report version {report['version']!r}")
    return report


def report_attributions(report: Dict[str, Any]) -> Tuple[List[int], List[Attribution]]:
    """Target row indices and attributions stored in a report."""
    indices, attributions = [], []
    for item in report["instances"]:
        try:
            entry = item["attribution"]
            indices.append(int(item["index"]))
            attributions.append(Attribution(
                values=np.asarray(entry["values"], dtype=np.float64),
                player_kind=entry["players"],
                method=entry["method"],
                v_empty=float(entry["v_empty"]),
                v_full=float(entry["v_full"]),
            ))
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Malformed report instance: {e}")
    return indices, attributions


def export_attributions_csv(attributions: Sequence[Attribution], indices: Sequence[int],
                            path: Union[str, Path]) -> Path:
    """One row per (instance, player)."""
    if len(attributions) != len(indices):
        raise ShapeError(f"{len(attributions)} attributions for {len(indices)} instance indices")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for index, attribution in zip(indices, attributions):
            for player, value in enumerate(attribution.values):
                writer.writerow([
                    int(index), player, format_float(value), attribution.method,
                    format_float(attribution.v_empty), format_float(attribution.v_full),
                ])
    logger.info(f"✓ Wrote {len(attributions)} attributions to {path}")
    return path


def heatmap_pixels(values: np.ndarray, grouping: FeatureGrouping, shape: Tuple[int, int]) -> np.ndarray:
    """
    8-bit signed heatmap of one attribution.

    Every feature shows its group's value; 0 maps to 128, +max|phi| to 255 and
    -max|phi| to 0.
    """
    height, width = shape
    if height * width != grouping.d:
        raise ShapeError(f"Heatmap shape {height}x{width} does not cover {grouping.d} features")
    per_feature = np.asarray(values, dtype=np.float64)[grouping.group_of]
    scale = np.max(np.abs(per_feature))
    if scale == 0:
        pixels = np.full(grouping.d, 128.0)
    else:
        ratio = per_feature / scale
        pixels = np.where(ratio >= 0, 128.0 + 127.0 * ratio, 128.0 + 128.0 * ratio)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8).reshape(height, width)


def write_pgm(pixels: np.ndarray, path: Union[str, Path]) -> Path:
    """Binary greyscale PGM (P5)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    return path


def parse_shape(text: Optional[str], d: int) -> Tuple[int, int]:
    """"HxW", or the square shape when d is a perfect square."""
    if text:
        try:
            height, width = (int(v) for v in text.lower().split("x"))
        except ValueError:
            raise DomainError(f"Invalid heatmap shape {text!r}; expected HxW")
        return height, width
    side = math.isqrt(d)
    if side * side != d:
        raise DomainError(f"{d} features do not form a square grid; pass an explicit heatmap shape")
    return side, side


def write_heatmaps(attributions: Sequence[Attribution], indices: Sequence[int], grouping: FeatureGrouping,
                   shape: Tuple[int, int], directory: Union[str, Path]) -> List[Path]:
    """One PGM per instance, named by its target row."""
    directory = Path(directory)
    paths = [
        write_pgm(heatmap_pixels(a.values, grouping, shape), directory / f"instance_{index:06d}.pgm")
        for index, a in zip(indices, attributions)
    ]
    logger.info(f"✓ Wrote {len(paths)} heatmaps to {directory}")
    return paths
