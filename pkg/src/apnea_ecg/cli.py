"""Batch command line: ingest, synth, features, stats, train, eval, ablate.

Exit codes: 0 success, 1 partial failure (some records failed), 2 fatal error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import wfdb_io
from .feature_extract import CHANNEL_NAMES, BuildReport, FeatureSet, merge_stats
from .metrics_eval import AblationTable, MetricsReport, compare_feature_sets, compute_metrics, confusion
from .pipeline import PipelineConfig, RecordResult, config_dict, process_record, split_train_val
from .se_cnn import Checkpoint, ModelConfig, ShapeError, predict, train
from .synth import generate_labeled_pair, separable_specs

log = logging.getLogger("apnea_ecg")

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2
HIST_BINS = 50

# Published Apnea-ECG per-minute segment counts used for the reconciliation report.
REFERENCE_COUNTS = {
    "train": {"total": 16709, "sa": 6473, "sa_fraction": 0.3874},
    "test": {"total": 16945, "sa": 6490, "sa_fraction": 0.3830},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _write_text(path: Path, text: str) -> None:
    wfdb_io.atomic_write(path, text.encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# ingest


def inventory(dataset_dir: Path) -> tuple[list[dict], list[dict]]:
    rows, failed = [], []
    for rid in wfdb_io.list_records(dataset_dir):
        try:
            info = wfdb_io.parse_header((dataset_dir / f"{rid}.hea").read_bytes())
            if info.n_sig != 1:
                log.info("skipping %s: %d signals", rid, info.n_sig)
                continue
            rec = wfdb_io.load_record(dataset_dir, rid)
        except (OSError, ValueError) as exc:
            failed.append({"record": rid, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append({"record": rid, "fs": rec.fs, "n_samples": int(rec.samples.size),
                     "duration_min": round(rec.duration / 60.0, 2),
                     "labeled_minutes": rec.n_labeled_minutes,
                     "sa_minutes": int(rec.labels.sum())})
    return rows, failed


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    d = Path(args.dataset_dir or cfg.dataset_dir)
    if not d.is_dir():
        raise StageError("ingest", f"unreadable directory {d}")
    rows, failed = inventory(d)
    print(f"{'record':<10}{'fs':>6}{'minutes':>10}{'labeled':>9}{'SA':>7}")
    for r in rows:
        print(f"{r['record']:<10}{r['fs']:>6g}{r['duration_min']:>10.1f}{r['labeled_minutes']:>9}{r['sa_minutes']:>7}")
    for f in failed:
        print(f"FAILED {f['record']}: {f['error']}")
    print(f"{len(rows)} records inventoried, {len(failed)} failed")
    if args.json:
        _write_json(Path(args.json), {"records": rows, "failed": failed})
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    names = [f"a{i + 1:02d}" for i in range(args.n_train)] + [f"x{i + 1:02d}" for i in range(args.n_test)]
    for k, name in enumerate(names):
        sa, non = separable_specs(seed=cfg.seed * 1000 + k, fs=args.fs)
        rec, _ = generate_labeled_pair(sa, non, args.minutes, name, first_label=k % 2)
        wfdb_io.write_record(out, rec, fmt=args.fmt)
    _write_text(out / "RECORDS", "".join(f"{n}\n" for n in names))
    print(f"wrote {len(names)} records of {args.minutes} minutes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# features


def _process_one(dataset_dir: str, rid: str, cfg: PipelineConfig, cache_dir: str) -> RecordResult:
    try:
        rec = wfdb_io.load_record(dataset_dir, rid)
    except (OSError, ValueError) as exc:
        return RecordResult(rid, error=f"{type(exc).__name__}: {exc}")
    return process_record(rec, cfg, Path(cache_dir))


def run_records(dataset_dir: Path, ids: list[str], cfg: PipelineConfig, cache_dir: Path) -> list[RecordResult]:
    if cfg.jobs > 1 and len(ids) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futs = [pool.submit(_process_one, str(dataset_dir), rid, cfg, str(cache_dir)) for rid in ids]
            return [f.result() for f in futs]
    return [_process_one(str(dataset_dir), rid, cfg, str(cache_dir)) for rid in ids]


def reconciliation_text(name: str, rep: BuildReport) -> str:
    d = rep.as_dict()
    n = max(d["n_segments"], 1)
    lines = [
        f"[{name}] labeled minutes {d['n_labeled']}",
        f"  retained segments        {d['n_segments']}  (SA {d['sa_segments']}, {100 * d['sa_segments'] / n:.2f}%)",
        f"  rejected: no context     {d['rejected_context']}",
        f"  rejected: too few beats  {d['rejected_beats']}",
        f"  unexplained gap          {d['unexplained']}",
    ]
    ref = REFERENCE_COUNTS.get(name)
    if ref:
        lines.append(f"  reference total {ref['total']} (SA {ref['sa']}, {100 * ref['sa_fraction']:.2f}%); "
                     f"retained + rejected = {rep.accounted}")
    return "\n".join(lines)


def cmd_features(args, cfg: PipelineConfig) -> int:
    d = Path(cfg.dataset_dir)
    out = Path(cfg.output_dir)
    if not d.is_dir():
        raise StageError("features", f"unreadable directory {d}")
    ids = []
    for rid in wfdb_io.list_records(d):
        try:
            if wfdb_io.parse_header((d / f"{rid}.hea").read_bytes()).n_sig == 1:
                ids.append(rid)
        except (OSError, ValueError):
            ids.append(rid)  # surfaces as a per-record failure below
    test_ids = set(args.test_records.split(",")) if args.test_records else {r for r in ids if r.startswith("x")}
    results = run_records(d, ids, cfg, out / "beats")

    failed = [r for r in results if r.error]
    splits = {"train": ([], BuildReport()), "test": ([], BuildReport())}
    for r in results:
        if r.error:
            continue
        segs, rep = splits["test" if r.record_id in test_ids else "train"]
        segs.extend(r.segments)
        merge_stats(rep, r.record_id, r.stats, r.segments)
        rep.per_record[r.record_id]["rr_correction"] = r.correction

    report = {"config": config_dict(cfg), "failed": [{"record": r.record_id, "error": r.error} for r in failed]}
    texts = []
    for name, (segs, rep) in splits.items():
        if not segs and not rep.n_labeled:
            continue
        path = out / "features" / f"{name}_{cfg.feature_set}.apnf"
        wfdb_io.write_feature_file(path, segs, FeatureSet(cfg.feature_set).n_channels)
        if args.csv:
            wfdb_io.export_feature_csv(path.with_suffix(".csv"), segs)
        report[name] = rep.as_dict()
        report[name]["file"] = str(path)
        report[name]["reference"] = REFERENCE_COUNTS[name]
        texts.append(reconciliation_text(name, rep))
        print(f"wrote {len(segs)} segments to {path}")
    for f in failed:
        texts.append(f"FAILED {f.record_id}: {f.error}")
    _write_json(out / "reconciliation.json", report)
    _write_text(out / "reconciliation.txt", "\n".join(texts) + "\n")
    print("\n".join(texts))
    return EXIT_PARTIAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# stats


def histograms(segments) -> tuple[list[list], dict]:
    """Per-class histograms over each channel's pooled range (de-normalised values)."""
    if not segments:
        raise StageError("stats", "no segments")
    raw = np.stack([s.raw_channels for s in segments])
    labels = np.array([s.label for s in segments])
    rows, summary = [], {}
    for c in range(raw.shape[1]):
        name = CHANNEL_NAMES[c]
        vals = raw[:, c, :]
        edges = np.histogram_bin_edges(vals, bins=HIST_BINS)
        summary[name] = {}
        for lab, cls in ((1, "sa"), (0, "non_sa")):
            v = vals[labels == lab]
            counts, _ = np.histogram(v, bins=edges)
            for b, cnt in enumerate(counts):
                rows.append([name, cls, b, repr(float(edges[b])), repr(float(edges[b + 1])), int(cnt)])
            summary[name][cls] = {"mean": float(v.mean()) if v.size else None,
                                  "std": float(v.std()) if v.size else None,
                                  "n_segments": int((labels == lab).sum())}
    return rows, summary


def cmd_stats(args, cfg: PipelineConfig) -> int:
    segments = []
    for f in args.features:
        segments.extend(wfdb_io.read_feature_file(f))
    rows, summary = histograms(segments)
    out = Path(args.output_dir or cfg.output_dir) / "stats"
    for name in summary:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["channel", "class", "bin", "bin_lo", "bin_hi", "count"])
        w.writerows(r for r in rows if r[0] == name)
        _write_text(out / f"hist_{name}.csv", buf.getvalue())
    _write_json(out / "summary.json", summary)
    for name, s in summary.items():
        sa, non = s["sa"]["mean"], s["non_sa"]["mean"]
        if sa is None or non is None:
            print(f"{name:<6} only one class present")
            continue
        rel = "lower" if sa < non else "higher" if sa > non else "equal"
        print(f"{name:<6} SA mean {sa:.4f} vs non-SA mean {non:.4f}: SA is {rel}")
    print(f"histograms written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval / ablate


def _load_segments(path, stage: str):
    try:
        return wfdb_io.read_feature_file(path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot read features {path}: {exc}") from exc


def train_checkpoint(segments, cfg: PipelineConfig, stage: str = "train") -> Checkpoint:
    if not segments:
        raise StageError(stage, "no training segments")
    tr, val = split_train_val(segments, cfg.val_fraction, cfg.seed)
    mcfg = ModelConfig(in_channels=segments[0].channels.shape[0])
    res = train(cfg.train_config, tr, val, mcfg,
                on_epoch=lambda h: log.info("epoch %(epoch)d loss %(loss).4f val F1 %(val_f1_sa).4f", h))
    res.checkpoint.meta["n_train"] = len(tr)
    res.checkpoint.meta["n_val"] = len(val)
    return res.checkpoint


def save_checkpoint(ckpt: Checkpoint, out_dir: Path, feature_set: str) -> Path:
    data = ckpt.to_bytes()
    path = out_dir / "checkpoints" / f"model-{feature_set}-{hashlib.sha256(data).hexdigest()[:12]}.ckpt"
    wfdb_io.atomic_write(path, data)
    return path


def cmd_train(args, cfg: PipelineConfig) -> int:
    segments = _load_segments(args.features, "train")
    ckpt = train_checkpoint(segments, cfg)
    fs_name = "r" if ckpt.config.in_channels == 2 else "rs"
    path = Path(args.checkpoint) if args.checkpoint else save_checkpoint(ckpt, Path(cfg.output_dir), fs_name)
    if args.checkpoint:
        ckpt.save(path)
    print(f"best epoch {ckpt.meta['best_epoch']} (val F1 {ckpt.meta['val_f1_sa']}); checkpoint {path}")
    return EXIT_OK


def evaluate(ckpt: Checkpoint, segments, stage: str = "eval") -> MetricsReport:
    if not segments:
        raise StageError(stage, "no evaluation segments")
    try:
        pred = predict(ckpt, segments)
    except ShapeError as exc:
        raise StageError(stage, str(exc)) from exc
    return compute_metrics(confusion(pred, [s.label for s in segments]))


def cmd_eval(args, cfg: PipelineConfig) -> int:
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise StageError("eval", f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    report = evaluate(ckpt, _load_segments(args.features, "eval"))
    print(report.render())
    if args.json:
        _write_text(Path(args.json), report.to_json() + "\n")
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    if args.reports:
        r, rs = (MetricsReport.from_dict(json.loads(Path(p).read_text())) for p in args.reports)
    else:
        if not (args.train and args.test):
            raise StageError("ablate", "need --train and --test feature files, or --reports")
        train_rs, test_rs = _load_segments(args.train, "ablate"), _load_segments(args.test, "ablate")
        if train_rs and train_rs[0].channels.shape[0] != 4:
            raise StageError("ablate", "ablation needs R+S (4-channel) feature files")
        out = Path(cfg.output_dir)
        reports = {}
        for fs in (FeatureSet.R_ONLY, FeatureSet.R_AND_S):
            tr = [s.select(fs) for s in train_rs]
            te = [s.select(fs) for s in test_rs]
            ckpt = train_checkpoint(tr, cfg, "ablate")
            save_checkpoint(ckpt, out, fs.value)
            reports[fs] = evaluate(ckpt, te, "ablate")
        r, rs = reports[FeatureSet.R_ONLY], reports[FeatureSet.R_AND_S]
    try:
        table: AblationTable = compare_feature_sets(r, rs)
    except ValueError as exc:
        raise StageError("ablate", str(exc)) from exc
    print(table.render())
    if args.json:
        _write_json(Path(args.json), table.as_dict())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("band must be 'lo,hi' in Hz") from exc
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with pipeline settings")
    common.add_argument("--jobs", type=int, help="worker processes for record-level stages")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="apnea-ecg", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="inventory a WFDB directory")
    s.add_argument("dataset_dir", nargs="?")
    s.add_argument("--json", help="write the inventory as JSON")

    s = sub.add_parser("synth", parents=[common], help="write synthetic labelled WFDB records")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=3)
    s.add_argument("--n-test", type=int, default=1)
    s.add_argument("--minutes", type=int, default=60)
    s.add_argument("--fs", type=float, default=100.0)
    s.add_argument("--fmt", type=int, choices=wfdb_io.SUPPORTED_FORMATS, default=212)

    s = sub.add_parser("features", parents=[common], help="extract 5-minute feature segments")
    s.add_argument("--dataset-dir")
    s.add_argument("--output-dir")
    s.add_argument("--band", type=_band, help="band-pass edges 'lo,hi' in Hz (default 8,12)")
    s.add_argument("--fir-order", type=int)
    s.add_argument("--rr-min", type=float)
    s.add_argument("--rr-max", type=float)
    s.add_argument("--rr-window", type=int)
    s.add_argument("--match-tol-ms", type=float)
    s.add_argument("--feature-set", choices=[f.value for f in FeatureSet])
    s.add_argument("--drop-boundary", action=argparse.BooleanOptionalAction, default=None,
                   help="drop minutes without full two-minute context (the only supported mode)")
    s.add_argument("--amp-from-raw", action="store_true", default=None,
                   help="read peak amplitudes from the raw rather than the filtered signal")
    s.add_argument("--test-records", help="comma-separated test record ids (default: ids starting with 'x')")
    s.add_argument("--csv", action="store_true", help="also export CSV")

    s = sub.add_parser("stats", parents=[common], help="per-class feature histograms")
    s.add_argument("features", nargs="+")
    s.add_argument("--output-dir")

    for name, helptext in (("train", "train the classifier"), ("eval", "evaluate a checkpoint")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--features", required=True)
        s.add_argument("--checkpoint", required=(name == "eval"))
        s.add_argument("--output-dir")
        if name == "train":
            s.add_argument("--epochs", type=int)
            s.add_argument("--batch-size", type=int)
            s.add_argument("--lr", type=float)
        else:
            s.add_argument("--json", help="write the report as JSON")

    s = sub.add_parser("ablate", parents=[common], help="R-only vs R+S comparison")
    s.add_argument("--train")
    s.add_argument("--test")
    s.add_argument("--reports", nargs=2, metavar=("R_JSON", "RS_JSON"))
    s.add_argument("--output-dir")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--json")
    return p


def load_config(args) -> PipelineConfig:
    data = {}
    if args.config:
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(args.config, "rb") as fh:
            data = tomllib.load(fh)
        data = data.get("pipeline", data)
    cfg = PipelineConfig.from_mapping(data)
    overrides = {k: getattr(args, k, None) for k in (
        "dataset_dir", "output_dir", "band", "fir_order", "rr_min", "rr_max", "rr_window",
        "match_tol_ms", "feature_set", "drop_boundary", "amp_from_raw", "epochs",
        "batch_size", "lr", "seed", "jobs")}
    cfg = cfg.updated(**overrides)
    if not cfg.drop_boundary:
        raise ValueError("padding boundary minutes is not supported; use --drop-boundary")
    return cfg


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "features": cmd_features, "stats": cmd_stats,
            "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    try:
        return COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
