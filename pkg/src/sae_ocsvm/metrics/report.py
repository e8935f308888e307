"""Per-patient metric sets and Table-style aggregation across methods."""
from dataclasses import dataclass, field

import numpy as np

from .curves import ScoredVoxels, best_dice, connected_components, pr_auc, pro_auc, roc_auc
from .stats import dunn_test, kruskal_wallis

METRICS = ("au_roc", "au_roc_30", "au_prc", "au_pro", "au_pro_30", "best_dice")
RAW_METRICS = ("au_roc_30_raw", "au_pro_30_raw")
LABELS = {
    "au_roc": "AU ROC",
    "au_roc_30": "AU ROC 30",
    "au_prc": "AU PRC",
    "au_pro": "AU PRO",
    "au_pro_30": "AU PRO 30",
    "best_dice": "best Dice",
    "au_roc_30_raw": "AU ROC 30 (raw)",
    "au_pro_30_raw": "AU PRO 30 (raw)",
}


def evaluate_map(amap, lesion_mask, connectivity=26, fpr_limit=0.3):
    """All six metrics (plus un-normalised partial areas) for one anomaly map."""
    sv = ScoredVoxels.from_map(amap, lesion_mask)
    lesion_mask = np.asarray(lesion_mask, dtype=bool) & amap.valid_mask
    lesions = connected_components(lesion_mask, connectivity)
    dice, threshold = best_dice(sv)
    return {
        "au_roc": roc_auc(sv, 1.0),
        "au_roc_30": roc_auc(sv, fpr_limit),
        "au_roc_30_raw": roc_auc(sv, fpr_limit, normalize=False),
        "au_prc": pr_auc(sv),
        "au_pro": pro_auc(sv, lesions, 1.0),
        "au_pro_30": pro_auc(sv, lesions, fpr_limit),
        "au_pro_30_raw": pro_auc(sv, lesions, fpr_limit, normalize=False),
        "best_dice": dice,
        "best_dice_threshold": threshold,
        "n_lesions": len(lesions.components),
    }


@dataclass
class MetricReport:
    methods: list
    metrics: tuple
    # summary[group][method][metric] = (mean, std, n)
    summary: dict = field(default_factory=dict)
    # flags[group][metric] = {"kw_h", "kw_p", "significant", "best", "bold"}
    flags: dict = field(default_factory=dict)
    per_patient: dict = field(default_factory=dict)
    alpha: float = 0.01


def _mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std, len(values)


def _flag(samples, alpha, bonferroni):
    methods = list(samples)
    means = {m: float(np.mean(samples[m])) for m in methods}
    best = max(methods, key=lambda m: (means[m], -methods.index(m)))
    if len(methods) == 1:
        return {"kw_h": 0.0, "kw_p": 1.0, "significant": True, "best": best, "bold": [best]}
    h, p = kruskal_wallis([samples[m] for m in methods])
    if p >= alpha:
        return {"kw_h": h, "kw_p": p, "significant": False, "best": None, "bold": []}
    dunn = dunn_test([samples[m] for m in methods], bonferroni=bonferroni)
    b = methods.index(best)
    bold = [m for k, m in enumerate(methods) if k == b or dunn[b, k] >= alpha]
    return {"kw_h": h, "kw_p": p, "significant": True, "best": best, "bold": bold}


def aggregate_report(per_patient, grouping=None, alpha=0.01, bonferroni=False, metrics=METRICS + RAW_METRICS):
    """Mean and sample std per method, metric and group, with best-method flags.

    ``per_patient`` maps a method name to a list of metric dicts (a bare list
    is treated as a single method).  Each dict may carry a ``"group"`` key;
    ``grouping`` optionally maps a record's ``"case"`` value to a group.
    Pooled statistics over every patient appear under group ``"all"``.
    """
    if not isinstance(per_patient, dict):
        per_patient = {"method": list(per_patient)}
    methods = list(per_patient)
    for m in methods:
        if not per_patient[m]:
            raise ValueError(f"method {m!r} has no patients")

    def group_of(rec):
        if grouping is not None and "case" in rec:
            return grouping.get(rec["case"], rec.get("group"))
        return rec.get("group")

    groups = ["all"]
    for m in methods:
        for rec in per_patient[m]:
            g = group_of(rec)
            if g is not None and g not in groups:
                groups.append(g)

    report = MetricReport(methods, tuple(metrics), per_patient=per_patient, alpha=alpha)
    for g in groups:
        recs = {
            m: [r for r in per_patient[m] if g == "all" or group_of(r) == g] for m in methods
        }
        present = [m for m in methods if recs[m]]
        report.summary[g] = {m: {k: _mean_std([r[k] for r in recs[m]]) for k in metrics} for m in present}
        report.flags[g] = {
            k: _flag({m: [r[k] for r in recs[m]] for m in present}, alpha, bonferroni) for k in metrics
        }
    return report


def _fmt(v):
    return f"{v:.3f}" if abs(v) < 0.1 else f"{v:.2f}"


def to_tsv(report):
    """Long-format table: group, method, metric, mean, std, n, bold, kw_p."""
    lines = ["group\tmethod\tmetric\tmean\tstd\tn\tbold\tkw_p"]
    for g, by_method in report.summary.items():
        for m, vals in by_method.items():
            for k in report.metrics:
                mean, std, n = vals[k]
                fl = report.flags[g][k]
                lines.append(
                    f"{g}\t{m}\t{k}\t{mean:.6f}\t{std:.6f}\t{n}\t{int(m in fl['bold'])}\t{fl['kw_p']:.6g}"
                )
    return "\n".join(lines) + "\n"


def to_text(report):
    """Human-readable tables, one per group: metrics down, methods across."""
    out = []
    for g, by_method in report.summary.items():
        methods = list(by_method)
        header = [g] + methods
        rows = []
        for k in report.metrics:
            fl = report.flags[g][k]
            label = LABELS.get(k, k) + ("" if fl["significant"] else " *")
            cells = [label]
            for m in methods:
                mean, std, _ = by_method[m][k]
                cell = _fmt(mean)
                if m in fl["bold"]:
                    cell = f"**{cell}**"
                cells.append(f"{cell} ± {_fmt(std)}")
            rows.append(cells)
        widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
        line = lambda r: "| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |"
        out.append(line(header))
        out.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
        out.extend(line(r) for r in rows)
        out.append("")
    out.append(
        f"Bold: best method and methods whose Dunn p-value against it is >= {report.alpha}. "
        "* : non-significant Kruskal-Wallis test (no best method)."
    )
    return "\n".join(out) + "\n"
