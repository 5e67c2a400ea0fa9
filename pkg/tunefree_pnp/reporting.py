"""Tables (policy x setting) and PSNR-vs-iteration curves from an evaluation output directory."""
from __future__ import annotations

import logging
import re
from enum import Enum
from pathlib import Path
from typing import Dict, List, Sequence, Union

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from .models import RESULT_COLUMNS, CurveRecord  # noqa: E402

logger = logging.getLogger(__name__)

PLOT_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (4.5, 3.0),
    "savefig.bbox": "tight",
}


class ReportKind(str, Enum):
    TABLE = "table"
    CURVES = "curves"


def setting_label(row: pd.Series) -> str:
    if row["task"] == "csmri":
        return f"x{row['accel_or_alpha']:g} s{row['sigma_n']:g}"
    return f"a{row['accel_or_alpha']:g}"


def load_results(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in RESULT_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} lacks result columns {missing}")
    return frame


def load_curves(path: Union[str, Path]) -> List[CurveRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [CurveRecord.model_validate_json(line) for line in lines if line.strip()]


def results_table(results: pd.DataFrame) -> Dict[str, pd.DataFrame]:
    """Mean PSNR and mean iteration count per policy (rows) and setting (columns)."""
    if results.empty:
        raise ValueError("no results to tabulate")
    frame = results.copy()
    frame["setting"] = frame.apply(setting_label, axis=1)
    policies = list(dict.fromkeys(frame["policy"]))
    settings = list(dict.fromkeys(frame["setting"]))
    tables = {}
    for value in ("psnr_db", "iterations"):
        pivot = frame.pivot_table(index="policy", columns="setting", values=value, aggfunc="mean")
        tables[value] = pivot.reindex(index=policies, columns=settings)
    return tables


def write_table(results: pd.DataFrame, output_dir: Union[str, Path]) -> List[Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for value, table in results_table(results).items():
        path = output_dir / f"table_{value}.csv"
        table.to_csv(path)
        written.append(path)
    return written


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text)


def write_curves(curves: Sequence[CurveRecord], output_dir: Union[str, Path]) -> List[Path]:
    """One curve CSV per (image, setting, policy, seed) and one SVG per (image, setting)."""
    if not curves:
        raise ValueError("no curves to plot")
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    groups: Dict[str, List[CurveRecord]] = {}
    for curve in curves:
        setting = f"{curve.task}-{curve.accel_or_alpha:g}-{curve.sigma_n:g}"
        groups.setdefault(f"{curve.image_id}_{setting}", []).append(curve)

    written = []
    with mpl.rc_context(PLOT_STYLE):
        for key, members in groups.items():
            fig, ax = plt.subplots()
            for curve in members:
                iterations = list(range(1, len(curve.psnr_trace) + 1))
                name = _slug(f"{key}_{curve.policy}_seed{curve.seed}")
                data = pd.DataFrame({"iteration": iterations, "psnr_db": curve.psnr_trace})
                csv_path = output_dir / f"curve_{name}.csv"
                data.to_csv(csv_path, index=False)
                written.append(csv_path)
                ax.plot(iterations, curve.psnr_trace, label=f"{curve.policy} (seed {curve.seed})")
            ax.set_xlabel("iteration")
            ax.set_ylabel("PSNR (dB)")
            ax.set_title(key, fontsize=8)
            ax.legend(loc="lower right")
            svg_path = output_dir / f"curves_{_slug(key)}.svg"
            fig.savefig(svg_path, format="svg")
            plt.close(fig)
            written.append(svg_path)
    return written


def report(results_dir: Union[str, Path], kind: Union[ReportKind, str], output_dir: Union[str, Path, None] = None) -> List[Path]:
    results_dir = Path(results_dir)
    output_dir = Path(output_dir) if output_dir is not None else results_dir / "report"
    kind = ReportKind(kind)
    if kind is ReportKind.TABLE:
        written = write_table(load_results(results_dir / "results.csv"), output_dir)
    else:
        written = write_curves(load_curves(results_dir / "traces.jsonl"), output_dir)
    logger.info(f"Wrote {len(written)} {kind.value} report files to {output_dir}")
    return written
