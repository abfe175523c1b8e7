#!/usr/bin/env python3
"""
Render every YAML report of a run directory into one Markdown summary.

Usage:
    python -m workflows.report_builder <run_dir> [output_md]
"""

import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add project root to path
PROJECT_DIR = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_DIR))

from shared.utils import MissingArtifactError, load_yaml
from src.evaluation import SUBSTITUTION_NOTICE, markdown_table

# Report order in the summary; anything else follows alphabetically.
REPORT_ORDER = [
    "fp_train",
    "dataset",
    "latent_range",
    "calibration",
    "train_qat_s2p",
    "train_qat_serial",
    "train_qat_parallel",
    "eval_s2p",
    "eval_serial",
    "eval_parallel",
    "compare_pipelines",
    "dataset_tradeoff",
    "ablation",
]

MAX_LIST_ROWS = 20


def _is_table(value: Any) -> bool:
    return isinstance(value, list) and bool(value) and all(isinstance(v, dict) for v in value)


def _scalar(value: Any) -> bool:
    return value is None or isinstance(value, (str, int, float, bool))


def format_section(data: Dict[str, Any], depth: int = 3) -> List[str]:
    """Key/value bullets for scalars, tables for lists of rows, sub-headings for mappings."""
    lines = []
    scalars = {k: v for k, v in data.items() if _scalar(v) and k != "substitution_notice"}
    for key, value in scalars.items():
        shown = f"{value:.4f}" if isinstance(value, float) else value
        lines.append(f"- **{key}:** {shown}")
    if scalars:
        lines.append("")

    for key, value in data.items():
        if key in scalars or key == "substitution_notice":
            continue
        heading = "#" * min(depth, 6)
        if _is_table(value):
            lines.append(f"{heading} {key}")
            lines.append("")
            rows = value[:MAX_LIST_ROWS]
            lines.append(markdown_table(rows))
            if len(value) > MAX_LIST_ROWS:
                lines.append(f"_{len(value) - MAX_LIST_ROWS} more rows in the YAML report_")
                lines.append("")
        elif isinstance(value, dict) and value:
            lines.append(f"{heading} {key}")
            lines.append("")
            lines.extend(format_section({str(k): v for k, v in value.items()}, depth + 1))
        elif isinstance(value, list):
            lines.append(f"- **{key}:** {', '.join(str(v) for v in value)}")
            lines.append("")
    return lines


def collect_reports(run_dir: Path) -> Dict[str, Dict[str, Any]]:
    reports_dir = Path(run_dir) / "reports"
    found = {
        path.stem: load_yaml(path)
        for path in sorted(reports_dir.glob("*.yaml"))
        if not path.name.endswith(".timing.yaml")
    }
    ordered = {name: found[name] for name in REPORT_ORDER if name in found}
    ordered.update({name: found[name] for name in sorted(found) if name not in ordered})
    return ordered


def build_summary(run_dir: Path, output_path: Optional[Path] = None) -> Path:
    """
    Write summary.md for a run directory.

    Args:
        run_dir: Run directory containing reports/
        output_path: Markdown file (default: <run_dir>/reports/summary.md)

    Returns:
        Path of the written summary

    Raises:
        MissingArtifactError: no reports have been written yet
    """
    run_dir = Path(run_dir)
    reports = collect_reports(run_dir)
    if not reports:
        raise MissingArtifactError(run_dir / "reports", "evaluate, compare-pipelines, dataset-tradeoff or ablate")

    md_lines = [f"# Run summary: {run_dir.name}", "", f"> {SUBSTITUTION_NOTICE}", ""]
    md_lines.append("## Contents")
    md_lines.append("")
    for name in reports:
        md_lines.append(f"- {name}")
    md_lines.append("")

    for name, data in reports.items():
        md_lines.append(f"## {name}")
        md_lines.append("")
        if isinstance(data, dict):
            md_lines.extend(format_section(data))
        else:
            md_lines.append(str(data))
            md_lines.append("")

    output_file = Path(output_path) if output_path else run_dir / "reports" / "summary.md"
    output_file.parent.mkdir(parents=True, exist_ok=True)
    output_file.write_text("\n".join(md_lines), encoding="utf-8")
    return output_file


def main():
    if len(sys.argv) < 2:
        print(__doc__)
        sys.exit(1)

    output = build_summary(Path(sys.argv[1]), Path(sys.argv[2]) if len(sys.argv) > 2 else None)
    print(f"Summary written to: {output}")


if __name__ == "__main__":
    main()
