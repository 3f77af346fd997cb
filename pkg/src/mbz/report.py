"""Report loading and output formats: json, csv, plotdata."""

from __future__ import annotations

import json
from pathlib import Path


class BadReport(Exception):
    pass


def load_report(path: str | Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise BadReport(f"cannot read report {path}: {exc}") from exc
    if not isinstance(report, dict):
        raise BadReport("report is not a JSON object")
    if "samples" in report:
        _check_bench_consistency(report)
    return report


def _check_bench_consistency(report: dict) -> None:
    try:
        deltas = [s["delta_us"] for s in report["samples"]]
        summary = report["summary"]
    except (KeyError, TypeError) as exc:
        raise BadReport(f"malformed bench result: {exc}") from exc
    recomputed = summarize_deltas(deltas)
    if recomputed != summary:
        raise BadReport("bench summary does not match its samples")


def percentile(sorted_values: list, fraction: float):
    """Nearest-rank percentile over an already sorted list."""
    if not sorted_values:
        raise BadReport("no samples")
    rank = max(1, -(-len(sorted_values) * fraction // 1))  # ceil
    return sorted_values[int(rank) - 1]


def summarize_deltas(deltas: list[int]) -> dict:
    ordered = sorted(deltas)
    return {
        "count": len(ordered),
        "median_us": percentile(ordered, 0.5),
        "p90_us": percentile(ordered, 0.90),
        "p99_us": percentile(ordered, 0.99),
    }


def delta_cdf(deltas: list[int]) -> list[list[float]]:
    """(delta_us, cumulative fraction) pairs, both columns non-decreasing."""
    ordered = sorted(deltas)
    n = len(ordered)
    return [[value, round((i + 1) / n, 6)] for i, value in enumerate(ordered)]


def _snitch_sections(report: dict) -> list[tuple[str, dict]]:
    snitch = report.get("snitch") or {}
    return sorted(snitch.items())


def to_csv(report: dict) -> str:
    """CSV projection: requests per organization for replay reports,
    per-connection samples for bench results."""
    if "samples" in report:
        lines = ["direct_connect_us,engine_connect_us,delta_us"]
        lines += [f"{s['direct_connect_us']},{s['engine_connect_us']},{s['delta_us']}"
                  for s in report["samples"]]
        return "\n".join(lines) + "\n"
    sections = _snitch_sections(report)
    if not sections:
        raise BadReport("report has no snitch section to project")
    lines = ["organization,requests"]
    for _pid, data in sections:
        for org, count in data["third_party"]["requests_per_org"]:
            lines.append(f"{org},{count}")
    return "\n".join(lines) + "\n"


def to_plotdata(report: dict) -> str:
    """Tab-separated (x, y) tables for external plotting."""
    out = []
    if "samples" in report:
        out.append("# delta_cdf")
        out.append("delta_us\tcum_fraction")
        for x, y in delta_cdf([s["delta_us"] for s in report["samples"]]):
            out.append(f"{x}\t{y}")
        return "\n".join(out) + "\n"
    sections = _snitch_sections(report)
    if not sections:
        raise BadReport("report has no snitch section to project")
    for pid, data in sections:
        out.append(f"# requests_per_org {pid}")
        out.append("rank\trequests\torganization")
        for rank, (org, count) in enumerate(
                data["third_party"]["requests_per_org"], start=1):
            out.append(f"{rank}\t{count}\t{org}")
    return "\n".join(out) + "\n"


def format_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        return to_csv(report)
    if fmt == "plotdata":
        return to_plotdata(report)
    raise BadReport(f"unknown format {fmt!r}")
