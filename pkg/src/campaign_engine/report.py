"""Plain-text rendering of cases and evidence for analysts."""

from __future__ import annotations

import math
from typing import Any, Mapping, Sequence

from .aggregate import PAIR_TARGETS
from .learn.model import Explanation, ReasonCode

BYTE_UNITS = (("TB", 1e12), ("GB", 1e9), ("MB", 1e6), ("KB", 1e3))
MAX_REASONS = 8

VERBS = {
    "collect_bytes": "collected {actual} from {remote}",
    "exfil_proxy_bytes": "uploaded {actual} to {remote}",
    "exfil_flow_bytes": "sent {actual} to {remote}",
}


def format_bytes(n: float) -> str:
    """Decimal units with two decimals: 338220 -> '338.22 KB'."""
    for unit, size in BYTE_UNITS:
        if abs(n) >= size:
            return f"{n / size:.2f} {unit}"
    return f"{n:.0f} B"


def format_value(target: str, v: float) -> str:
    if target in PAIR_TARGETS:
        return format_bytes(v)
    return f"{v:.6g}"


def format_factor(f: float) -> str:
    return f"{f:.2f}x"


def item_explanation(item: Mapping[str, Any]) -> Explanation | None:
    if item.get("baseline") is None:
        return None
    reasons = tuple(ReasonCode(d, float(c)) for d, c in item.get("reasons", []))
    pred = float(item["baseline"]) + math.fsum(r.contribution for r in reasons)
    return Explanation(pred, float(item["baseline"]), reasons, item.get("target_transform"))


def render_explanation(ex: Explanation, target: str) -> list[str]:
    """Baseline, then one line per factor, then the product check."""
    lines = []
    reasons = [r for r in ex.reasons if r.contribution != 0.0]
    if ex.multiplicative:
        lines.append(f"  1. baseline prediction was {format_value(target, ex.baseline_value)} without context")
        for i, r in enumerate(reasons[:MAX_REASONS], 2):
            lines.append(f"  {i}. {r.derivation} [{format_factor(r.factor)} multiplier]")
    else:
        lines.append(f"  1. baseline prediction was {ex.baseline:.6g} without context")
        for i, r in enumerate(reasons[:MAX_REASONS], 2):
            lines.append(f"  {i}. {r.derivation} [{r.contribution:+.4g}]")
    if len(reasons) > MAX_REASONS:
        lines.append(f"  ... {len(reasons) - MAX_REASONS} smaller factors")
    if reasons:
        if ex.multiplicative:
            expected = math.exp(ex.prediction)
            product = math.prod(r.factor for r in reasons)
            lines.append(
                f"  check: {format_value(target, ex.baseline_value)} x {product:.6g} "
                f"(product of {len(reasons)} factors) = {format_value(target, ex.product_value)}"
                f" (model {format_value(target, expected)}, i.e. predicted + 1)"
            )
        else:
            lines.append(f"  check: {ex.baseline:.6g} + terms = {ex.product_value:.6g} (model {ex.prediction:.6g})")
    return lines


def render_evidence(item: Mapping[str, Any]) -> list[str]:
    target = item["target"]
    actual = format_value(target, item["actual"])
    expected = format_value(target, item["predicted"])
    if target in VERBS:
        what = VERBS[target].format(actual=actual, remote=item.get("remote"))
    else:
        what = f"{target} = {actual}"
    head = (
        f"{item['day']}  {item['host']} {what}"
        f"  [stage {item['stage']}, p={item['p']:.3g}, risk {item['risk']:.2f}]"
    )
    lines = [head, f"  predicted {expected} because:"]
    ex = item_explanation(item)
    if ex is None:
        lines.append("  (no model explanation stored)")
    else:
        lines.extend(render_explanation(ex, target))
    lines.append(f"  pivot: {item['pivot']}")
    return lines


def render_case(case: Mapping[str, Any]) -> str:
    out = [
        f"case {case['case_id']}  scored {case['day']}  seed {case['seed']}",
        f"members: {', '.join(case['members'])}",
        f"high-risk stages: {', '.join(str(s) for s in case['high_stages'])}",
    ]
    for m in case["members"]:
        risks = case["stage_risks"][m]
        bands = case["bands"][m]
        out.append(
            f"  {m}: " + "  ".join(f"stage {s} {float(risks[s]):.2f} ({bands[s]})" for s in sorted(risks))
        )
    out.append("")
    for item in case["evidence"]:
        out.extend(render_evidence(item))
        out.append("")
    return "\n".join(out).rstrip() + "\n"


def render_ranking(rows: Sequence[Mapping[str, str]], top: int | None = None) -> str:
    rows = rows[:top] if top else rows
    out = [f"{'pos':>4} {'host':<20} {'score':>10} {'recon':>7} {'collect':>7} {'exfil':>7}"]
    for r in rows:
        out.append(
            f"{r['position']:>4} {r['host']:<20} {float(r['score']):>10.3f} "
            f"{r['rank_recon']:>7} {r['rank_collect']:>7} {r['rank_exfil']:>7}"
        )
    return "\n".join(out) + "\n"
