"""Static report for a run directory: text tables, TSV files and SVG curves."""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

REPORT_DIR = "report"
STAGE_ORDER = ("sft", "pre", "dyn")


class ReportError(FileNotFoundError):
    pass


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _text_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "-" if v is None else str(v)


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _plot(path: Path, series: dict[str, tuple[list, list]], ylabel: str, title: str) -> None:
    plt.rcParams["svg.hashsalt"] = "report"
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for label, (x, y) in series.items():
        ax.plot(x, y, label=label, linewidth=1.2)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _smooth(y: list[float], window: int = 10) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(y):
        acc += v
        if i >= window:
            acc -= y[i - window]
        out.append(acc / min(i + 1, window))
    return out


def trace_summary(events: list[dict]) -> tuple[list[str], list[list]]:
    """One row per lattice: attempts, reattempts, increments per axis, final statuses."""
    per = defaultdict(Counter)
    final: dict[str, dict[str, str]] = defaultdict(dict)
    for e in events:
        lat, ev = e["lattice"], e["event"]
        per[lat][ev] += 1
        if ev == "increment":
            per[lat]["inc_" + e["detail"]["axis"]] += 1
        if ev in ("pass", "unresolved"):
            final[lat][e["coordinate"]] = "passed" if ev == "pass" else "unresolved"
    header = ["lattice", "attempts", "reattempts", "inc_s", "inc_v", "inc_c",
              "passed", "unresolved", "not_reached"]
    rows = []
    for lat in sorted(per):
        c = per[lat]
        st = Counter(final[lat].values())
        rows.append([lat, c["attempt"], c["reattempt"], c["inc_s"], c["inc_v"], c["inc_c"],
                     st["passed"], st["unresolved"], 5 - c["attempt"]])
    if rows:
        rows.append(["total"] + [sum(r[i] for r in rows) for i in range(1, len(header))])
    return header, rows


def emit_report(run_dir: str | Path, out_dir: str | Path | None = None) -> dict[str, str]:
    """Render everything available under ``run_dir``; returns name -> written path."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"run directory {run_dir} does not exist")
    metrics = {s: run_dir / "metrics" / f"{s}.jsonl" for s in STAGE_ORDER}
    metrics = {s: p for s, p in metrics.items() if p.exists()}
    trace_path = run_dir / "trace" / "dyn.jsonl"
    eval_path = run_dir / "eval" / "eval_report.json"
    if not metrics and not trace_path.exists() and not eval_path.exists():
        raise ReportError(f"no run logs under {run_dir}")
    out = Path(out_dir) if out_dir is not None else run_dir / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, str] = {}

    rows_by_stage = {s: _read_jsonl(p) for s, p in metrics.items()}
    summary_rows = []
    for stage, rows in rows_by_stage.items():
        if not rows:
            continue
        keys = sorted({k for r in rows for k in r})
        _write_tsv(out / f"metrics_{stage}.tsv", keys, [[r.get(k) for k in keys] for r in rows])
        written[f"metrics_{stage}"] = str(out / f"metrics_{stage}.tsv")
        first, last = rows[0], rows[-1]
        key = "loss" if stage == "sft" else "mean_reward"
        summary_rows.append([stage, len(rows), first.get(key), last.get(key),
                             last.get("kl"), last.get("grad_norm")])
    if summary_rows:
        header = ["stage", "steps", "first", "last", "last_kl", "last_grad_norm"]
        (out / "stages.txt").write_text(_text_table(header, summary_rows), encoding="utf-8")
        _write_tsv(out / "stages.tsv", header, summary_rows)
        written["stages"] = str(out / "stages.txt")

    rl = {s: r for s, r in rows_by_stage.items() if s != "sft" and r}
    if rl:
        _plot(out / "reward_curve.svg",
              {s: ([r["step"] for r in rows], _smooth([r["mean_reward"] for r in rows]))
               for s, rows in rl.items()}, "mean reward (10-step moving avg)", "RL reward")
        _plot(out / "kl_curve.svg",
              {s: ([r["step"] for r in rows], [r["kl"] for r in rows]) for s, rows in rl.items()},
              "KL to reference", "KL penalty term")
        written["reward_curve"] = str(out / "reward_curve.svg")
        written["kl_curve"] = str(out / "kl_curve.svg")
    if rows_by_stage.get("sft"):
        rows = rows_by_stage["sft"]
        _plot(out / "sft_loss.svg", {"sft": ([r["step"] for r in rows], [r["loss"] for r in rows])},
              "token NLL", "SFT loss")
        written["sft_loss"] = str(out / "sft_loss.svg")

    if trace_path.exists():
        header, rows = trace_summary(_read_jsonl(trace_path))
        (out / "trace_summary.txt").write_text(_text_table(header, rows), encoding="utf-8")
        _write_tsv(out / "trace_summary.tsv", header, rows)
        written["trace_summary"] = str(out / "trace_summary.txt")

    if eval_path.exists():
        rep = EvalReport.from_dict(json.loads(eval_path.read_text(encoding="utf-8")))
        (out / "eval_table.txt").write_text(rep.table(), encoding="utf-8")
        sub_rows = [[name, c.correct, c.total, c.accuracy] for name, c in rep.subdomains.items()]
        _write_tsv(out / "eval_subdomains.tsv", ["subdomain", "correct", "total", "accuracy"],
                   sub_rows)
        written["eval_table"] = str(out / "eval_table.txt")
    return written
