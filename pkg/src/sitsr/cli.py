"""Command-line entry point: ``sitsr {synth,train,eval,super-resolve,report,describe}``.

Every command writes ``config.resolved.json`` into its output directory.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .backbones import ModelSpec, super_resolve
from .core import ConfigError, ParseError, SitsrError, Timestamp, UsageError, load_series, write_npz
from .datapipe import DEFAULT_RATIOS, DiskDataset, SynthConfig, synth_generate, write_dataset
from .diffusion import DiffusionConfig
from .metrics import GAP_BINS, METRIC_NAMES, EvalConfig, MetricsReport, evaluate
from .trainer import Checkpoint, CSVSink, TrainConfig, train

log = logging.getLogger("sitsr")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


# -- config handling -----------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; keys must already exist in ``doc``."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for i, p in enumerate(parts):
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
            if i == len(parts) - 1:
                node[p] = _parse_value(value)
            else:
                node = node[p]
    return doc


def default_config() -> dict:
    train_doc = TrainConfig(model=ModelSpec()).to_dict()
    train_doc["model"]["diffusion"] = dataclasses.asdict(DiffusionConfig())
    return json.loads(json.dumps({
        "synth": SynthConfig().to_dict(),
        "ratios": dict(DEFAULT_RATIOS),
        "train": train_doc,
        "eval": dataclasses.asdict(EvalConfig()),
    }))


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = dict(base)
    for k, v in update.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def resolve_config(path: Optional[str], overrides: list[str], seed: Optional[int]) -> dict:
    doc = default_config()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        doc = _merge(doc, user)
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["synth"]["seed"] = seed
        doc["train"]["seed"] = seed
        doc["eval"]["seed"] = seed
    return doc


def _build(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_resolved(out: Path, doc: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _load_model(path: str):
    ck = Checkpoint.load(path)
    return ck, ck.build()


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = resolve_config(args.config, args.set, args.seed)
    cfg = _build(SynthConfig, doc["synth"])
    out = Path(args.out)
    write_resolved(out, {"command": "synth", "synth": cfg.to_dict(), "ratios": doc["ratios"]})
    manifest = write_dataset(synth_generate(cfg), out, doc["ratios"], seed=cfg.seed,
                             extra_meta={"synth": cfg.to_dict()})
    counts = {k: len(manifest.paths(k)) for k in doc["ratios"]}
    print(json.dumps({"samples": len(manifest.records), "splits": counts}))
    return EXIT_OK


def cmd_train(args) -> int:
    doc = resolve_config(args.config, args.set, args.seed)
    cfg = TrainConfig.from_dict(doc["train"])
    out = Path(args.out)
    write_resolved(out, {"command": "train", "data": str(args.data), "train": cfg.to_dict()})
    trainset, valset = DiskDataset(args.data, "train"), DiskDataset(args.data, "val")
    if not len(trainset):
        raise UsageError(f"no training samples in {args.data}")
    resume = Checkpoint.load(args.resume) if args.resume else None
    (out / "reports").mkdir(parents=True, exist_ok=True)
    sink = CSVSink(out / "reports" / "train_log.csv")
    try:
        ck = train(cfg, trainset, sink=sink, val_dataset=valset, resume=resume, out_dir=out)
    finally:
        sink.close()
    print(json.dumps({"step": ck.step, "checkpoint": str(out / "checkpoints" / "final.pt"),
                      "history": ck.history[-1:]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = resolve_config(args.config, args.set, args.seed)
    ck, model = _load_model(args.checkpoint)
    lengths = args.series_length or [doc["eval"]["series_length"]]
    if model.spec.is_sisr:
        lengths = [1]
    out = Path(args.out)
    write_resolved(out, {"command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data),
                         "split": args.split, "series_lengths": lengths, "eval": doc["eval"],
                         "model": model.spec.to_dict()})
    data = DiskDataset(args.data, args.split)
    if args.limit:
        data = data[: args.limit]
    runs = {}
    for n in lengths:
        ecfg = _build(EvalConfig, {**doc["eval"], "series_length": n})
        if args.no_perceptual:
            ecfg.perceptual = False
        runs[str(n)] = evaluate(model, data, ecfg).to_dict()
    report = {"kind": model.spec.kind, "label": args.label or model.spec.kind, "step": ck.step, "runs": runs}
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    (rdir / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    _write_summary_csv(rdir / "report.csv", report)
    for n, r in runs.items():
        print(f"N={n} " + " ".join(f"{k}={r['aggregates'][k]:.4f}" for k in r["aggregates"]))
    return EXIT_OK


def _write_summary_csv(path: Path, report: dict) -> None:
    """One row per (series length, group): the overall aggregate and each gap stratum."""
    rows = []
    for n, r in report["runs"].items():
        names = list(r["aggregates"])
        rows.append({"series_length": n, "group": "all", "count": len(r["per_sample"]),
                     **{k: r["aggregates"][k] for k in names}})
        for b in GAP_BINS:
            st = r["strata"].get(b, {})
            rows.append({"series_length": n, "group": b, "count": st.get("count", 0),
                         **{k: st.get(k, "") for k in names}})
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["series_length"])
        w.writeheader()
        w.writerows(rows)


def cmd_super_resolve(args) -> int:
    ck, model = _load_model(args.checkpoint)
    series = load_series(args.series)
    if args.at_date is not None:
        try:
            t = Timestamp.parse(args.at_date)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad --at-date {args.at_date!r}: {exc}") from exc
        if not series.ref_in_span(t):
            raise UsageError(f"--at-date {t} is outside the series span "
                             f"[{Timestamp(int(series.days.min()))}, {Timestamp(int(series.days.max()))}] "
                             f"+/- {series.slack} days")
        series = series.with_ref(t)
    out = Path(args.out)
    write_resolved(out, {"command": "super-resolve", "checkpoint": str(args.checkpoint),
                         "series": str(args.series), "at_date": str(series.t_ref),
                         "seed": args.seed, "model": model.spec.to_dict()})
    sr, attn = super_resolve(model, series, seed=args.seed, return_attention=True)
    tag = f"sr_{series.t_ref}"
    arrays = {"sr": sr.data, "t_ref": np.int64(series.t_ref.epoch_day)}
    if attn is not None:
        arrays["attention"] = attn
    write_npz(out / f"{tag}.npz", arrays)
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    _save_png(figs / f"{tag}.png", sr.data)
    if attn is not None:
        _save_attention(figs / f"{tag}_attention.png", attn, series.gaps)
    print(json.dumps({"output": str(out / f"{tag}.npz"), "t_ref": str(series.t_ref)}))
    return EXIT_OK


def _save_png(path: Path, chw: np.ndarray) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    img = np.clip(np.transpose(chw, (1, 2, 0)), 0, 1)
    img = np.round(img * 255).astype(np.uint8)
    plt.imsave(path, img, metadata={"Software": None})


def _save_attention(path: Path, attn: np.ndarray, gaps) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    heads, T = attn.shape[:2]
    order = sorted(range(T), key=lambda k: int(gaps[k]))  # columns in date order
    fig, axes = plt.subplots(heads, T, figsize=(1.4 * T, 1.4 * heads), squeeze=False)
    for h in range(heads):
        for col, k in enumerate(order):
            ax = axes[h, col]
            ax.imshow(attn[h, k], vmin=0, vmax=1, cmap="viridis")
            ax.set_xticks([])
            ax.set_yticks([])
            if h == 0:
                ax.set_title(f"{int(gaps[k]):+d} d", fontsize=7)
            if col == 0:
                ax.set_ylabel(f"head {h}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# -- report --------------------------------------------------------------------------

def load_report(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
        runs = doc["runs"]
        for r in runs.values():
            MetricsReport.from_dict(r)
            for row in r["per_sample"]:
                row["stratum"], row["mae"]
    except OSError as exc:
        raise UsageError(f"cannot read report {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed report {path}: {exc}") from exc
    return doc


def build_tables(reports: list[dict]) -> tuple[list[dict], list[dict], list[str]]:
    """Metrics table (one row per model at its longest N), ablation rows and footnotes."""
    table, ablation, notes = [], [], []
    for rep in reports:
        lengths = sorted(rep["runs"], key=lambda n: -int(n))
        main = rep["runs"][lengths[0]]
        names = [k for k in METRIC_NAMES if k in main["aggregates"]]
        table.append({"model": rep["label"], "series_length": lengths[0],
                      **{k: main["aggregates"][k] for k in names}})
        if len(lengths) > 1:
            for n in lengths:
                ablation.append({"model": rep["label"], "series_length": n,
                                 **{k: rep["runs"][n]["aggregates"].get(k, float("nan")) for k in names}})
        for b in GAP_BINS:
            if not main["strata"].get(b, {}).get("count", 0):
                notes.append(f"{rep['label']}: no samples with closest gap {b} days; box omitted")
    return table, ablation, notes


def _write_table(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def _markdown(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(fmt(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def gap_boxplot(reports: list[dict], path_stem: Path) -> list[str]:
    """MAE per closest-gap bin, one box per (bin, model); empty bins are skipped."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(2.2 + 1.6 * len(GAP_BINS) * max(1, len(reports)) / 2, 3.6))
    width = 0.8 / max(1, len(reports))
    drawn, labels = [], []
    for i, rep in enumerate(reports):
        main = rep["runs"][sorted(rep["runs"], key=lambda n: -int(n))[0]]
        for j, b in enumerate(GAP_BINS):
            vals = [r["mae"] for r in main["per_sample"] if r["stratum"] == b]
            if not vals:
                continue
            pos = j + (i - (len(reports) - 1) / 2) * width
            bp = ax.boxplot(vals, positions=[pos], widths=width * 0.9, patch_artist=True, showfliers=False)
            color = plt.cm.tab10(i % 10)
            for patch in bp["boxes"]:
                patch.set_facecolor(color)
            drawn.append(b)
        labels.append((rep["label"], plt.cm.tab10(i % 10)))
    ax.set_xticks(range(len(GAP_BINS)))
    ax.set_xticklabels([f"{b} days" for b in GAP_BINS])
    ax.set_xlabel("time gap between target date and closest LR image")
    ax.set_ylabel("MAE (0-255)")
    from matplotlib.patches import Patch

    ax.legend(handles=[Patch(color=c, label=l) for l, c in labels], fontsize=7)
    fig.tight_layout()
    outs = []
    for ext, meta in (("png", {"Software": None}), ("svg", {"Date": None, "Creator": None})):
        p = path_stem.with_suffix("." + ext)
        with plt.rc_context({"svg.hashsalt": "sitsr"}):  # stable element ids
            fig.savefig(p, metadata=meta)
        outs.append(str(p))
    plt.close(fig)
    return outs


def cmd_report(args) -> int:
    reports = [load_report(p) for p in args.reports]
    out = Path(args.out)
    write_resolved(out, {"command": "report", "reports": [str(p) for p in args.reports]})
    table, ablation, notes = build_tables(reports)
    rdir, fdir = out / "reports", out / "figures"
    rdir.mkdir(parents=True, exist_ok=True)
    fdir.mkdir(parents=True, exist_ok=True)
    _write_table(rdir / "metrics_table.csv", table)
    md = "## Metrics\n\n" + _markdown(table)
    if ablation:
        _write_table(rdir / "series_length_ablation.csv", ablation)
        md += "\n## Series length\n\n" + _markdown(ablation)
    if notes:
        md += "\n" + "\n".join(f"* {n}" for n in notes) + "\n"
    (rdir / "tables.md").write_text(md)
    figs = gap_boxplot(reports, fdir / "mae_by_gap")
    print(md)
    print(json.dumps({"figures": figs}))
    return EXIT_OK


def cmd_describe(args) -> int:
    if args.checkpoint:
        ck = Checkpoint.load(args.checkpoint)
        cfg = ck.train_config
        info = {"kind": cfg.model.kind, "step": ck.step, "parameters": ck.parameter_count,
                "scale": cfg.model.scale, "series_length": cfg.series_length,
                "last_validation": ck.history[-1] if ck.history else None}
    elif args.data:
        ds = DiskDataset(args.data)
        m = ds.manifest
        lengths = [len(r.timestamps) for r in m.records]
        info = {"samples": len(m.records), "blocks": len({r.block_id for r in m.records}),
                "splits": {k: len(m.paths(k)) for k in dict(m.ratios)},
                "series_length": {"min": min(lengths), "max": max(lengths)} if lengths else None}
    else:
        raise UsageError("describe needs --checkpoint or --data")
    if args.out:
        write_resolved(Path(args.out), {"command": "describe", "checkpoint": args.checkpoint, "data": args.data})
    print(json.dumps(info, indent=2))
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sitsr", description="Time-aware multi-image super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file (sections: synth, ratios, train, eval)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.steps=200 (repeatable)")
        sp.add_argument("--seed", type=int, help="overrides every seed in the config")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("synth", help="generate a synthetic dataset directory")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--series-length", type=int, action="append",
                    help="keep the N frames closest to the target date (repeatable)")
    sp.add_argument("--label", help="model name used in reports")
    sp.add_argument("--limit", type=int, help="evaluate only the first N samples")
    sp.add_argument("--no-perceptual", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("super-resolve", help="super-resolve one series at a chosen date")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--series", required=True, help="sample directory holding the LR series")
    sp.add_argument("--at-date", help="target date (YYYY-MM-DD or epoch day); default: the series t_ref")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_super_resolve)

    sp = sub.add_parser("report", help="figures and tables from eval reports")
    sp.add_argument("reports", nargs="+", help="report.json files written by eval")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("describe", help="summarize a checkpoint or dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_describe)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SitsrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every failure
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
