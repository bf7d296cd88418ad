"""Human-readable run summary: markdown tables and static figures."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import giattack, mia, synthcell  # noqa: E402

GALLERY_TARGETS = 3


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def table_mean_dice(cells: list[dict]) -> str:
    """Mean Dice per (target data, guide) pair, one block of rows per lambda."""
    lines = ["| lambda_dummy | Target data | Guiding layout | Mean Dice | Member pair |", "|---|---|---|---|---|"]
    for c in cells:
        for guide, value in c["mean_dice_by_guide"].items():
            lines.append(f"| {c['lambda_dummy']:g} | {c['member_class']} | {guide} | {value:.4f} | "
                         f"{'yes' if guide == c['member_class'] else 'no'} |")
    return "\n".join(lines)


def table_metrics(cells: list[dict]) -> str:
    lines = ["| lambda_dummy | Member class | Threshold T | Accuracy | Precision | Recall | AUC |",
             "|---|---|---|---|---|---|---|"]
    for c in cells:
        lines.append(f"| {c['lambda_dummy']:g} | {c['member_class']} | {c['threshold']:.4f} | {c['accuracy']:.4f} | "
                     f"{c['precision']:.4f} | {c['recall']:.4f} | {c['auc']:.4f} |")
    return "\n".join(lines)


def table_ablation(ablation: dict) -> str:
    lams = sorted({float(k) for e in ablation.values() for k in e["auc_by_lambda"]})
    head = "| Member class | " + " | ".join(f"AUC (lambda_dummy={x:g})" for x in lams) + " | Direction |"
    lines = [head, "|---|" + "---|" * (len(lams) + 1)]
    for member, e in ablation.items():
        aucs = " | ".join(_fmt(e["auc_by_lambda"].get(f"{x:g}")) for x in lams)
        direction = {True: "reproduced", False: "NOT reproduced", None: "n/a"}[e.get("direction_reproduced")]
        lines.append(f"| {member}{' (complex)' if e['complex'] else ''} | {aucs} | {direction} |")
    return "\n".join(lines)


def _histogram(rows, path: Path, title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = np.linspace(0, 1, 21)
    for label, color in ((mia.MEMBER, "tab:blue"), (mia.NON_MEMBER, "tab:orange")):
        ax.hist([r["dice"] for r in rows if r["ground_truth"] == label], bins=bins, alpha=0.6, label=label,
                color=color)
    ax.set_xlabel("Dice score")
    ax.set_ylabel("reconstructions")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _roc(cells, path: Path, lam: float) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for c in cells:
        f, t = zip(*c["roc"])
        ax.plot(f, t, marker=".", label=f"{c['member_class']} (AUC {c['auc']:.3f})")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"ROC, lambda_dummy={lam:g}")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _gallery(run, scenario: str, path: Path) -> None:
    from .pipeline import cell_key

    cfg = run.config
    targets = json.loads((run.fl_dir(scenario) / "targets.json").read_text(encoding="utf-8"))["targets"]
    targets = targets[:GALLERY_TARGETS]
    ds = synthcell.load_dataset(run.data_dir(scenario))
    by_id = {s.cell_id: s for c in ds.clients for s in c}
    cols = 2 + len(cfg.attack.guide_classes) * len(cfg.attack.lambda_dummy)
    fig, axes = plt.subplots(len(targets), cols, figsize=(1.6 * cols, 1.8 * len(targets)), squeeze=False)
    for i, t in enumerate(targets):
        s = by_id[t["target_id"]]
        panels = [(s.image.as_unit(), "SEM"), (s.mask.pixels, "true mask")]
        for lam in cfg.attack.lambda_dummy:
            for g in cfg.attack.guide_classes:
                x = giattack.read_x_prime(run.root / "gia" / cell_key(t["target_id"], g, lam))
                panels.append((x, f"{g.split('/')[0]} guide\nlam={float(lam):g}"))
        for ax, (img, title) in zip(axes[i], panels):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(title, fontsize=7)
    fig.suptitle(f"member class {scenario}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _fl_history(run, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for scenario in run.scenarios():
        hist = json.loads((run.fl_dir(scenario) / "history.json").read_text(encoding="utf-8"))
        ax.plot([h["round"] for h in hist], [h["mean_loss"] for h in hist], label=f"{scenario} loss")
        val = [(h["round"], h["val_dice"]) for h in hist if h["val_dice"] is not None]
        if val:
            ax.plot(*zip(*val), "o--", label=f"{scenario} val Dice")
    ax.set_xlabel("round")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(run) -> list[Path]:
    from .pipeline import lam_tag, slug

    out = run.root / "report"
    out.mkdir(parents=True, exist_ok=True)
    rep = json.loads((run.root / "report.json").read_text(encoding="utf-8"))
    cells = rep["cells"]
    rows = []
    import csv

    with open(run.root / "scores.csv", newline="", encoding="utf-8") as fh:
        rows = [{**r, "dice": float(r["dice"]), "lambda_dummy": float(r["lambda_dummy"])} for r in csv.DictReader(fh)]
    files = []
    member_of = {}
    for scenario in run.scenarios():
        for t in json.loads((run.fl_dir(scenario) / "targets.json").read_text(encoding="utf-8"))["targets"]:
            member_of[t["target_id"]] = scenario
    for c in cells:
        sub = [r for r in rows if r["lambda_dummy"] == c["lambda_dummy"] and member_of[r["target_id"]] == c["member_class"]]
        p = out / f"hist_{slug(c['member_class'])}_{lam_tag(c['lambda_dummy'])}.png"
        _histogram(sub, p, f"{c['member_class']}, lambda_dummy={c['lambda_dummy']:g}")
        files.append(p)
    for lam in sorted({c["lambda_dummy"] for c in cells}):
        p = out / f"roc_{lam_tag(lam)}.png"
        _roc([c for c in cells if c["lambda_dummy"] == lam], p, lam)
        files.append(p)
    for scenario in run.scenarios():
        p = out / f"gallery_{slug(scenario)}.png"
        _gallery(run, scenario, p)
        files.append(p)
    p = out / "fl_history.png"
    _fl_history(run, p)
    files.append(p)

    flags = [f"- {m}: {e['flag']}" for m, e in rep["ablation"].items() if e.get("complex") and e.get("flag")]
    asym = [f"- lambda_dummy={c['lambda_dummy']:g}, {c['member_class']}: matched {c['matched_mean_dice']:.4f} "
            f"<= mismatched {c['mismatched_mean_dice']:.4f}" for c in cells if not c["asymmetry_ok"]]
    md = [f"# Run `{rep['run_id']}`", "", f"Config hash `{rep['config_hash']}`; threshold pooling `{rep['pooling']}`.",
          "", "## Mean Dice by target data and guiding layout", "", table_mean_dice(cells), "",
          "## Attack metrics per member class", "", table_metrics(cells), "",
          "## Ablation over lambda_dummy", "", table_ablation(rep["ablation"]), ""]
    md += ["## Flags", ""]
    md += (flags or ["- ablation direction reproduced for every complex member class"])
    md += asym
    if rep["diverged_cells"]:
        md.append(f"- {len(rep['diverged_cells'])} reconstructions were flagged as diverged")
    md += ["", "## Figures", ""] + [f"![{f.stem}]({f.name})" for f in files] + [
        "", "## Config", "", "```yaml", rep["config_text"].rstrip(), "```", ""]
    p = out / "report.md"
    p.write_text("\n".join(md), encoding="utf-8")
    files.append(p)
    return files
