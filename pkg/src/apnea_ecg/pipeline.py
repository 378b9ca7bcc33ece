"""Record-level stage chain shared by the CLI: filter -> beats -> feature segments."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .feature_extract import FeatureSegment, FeatureSet, build_record_segments
from .peak_detect import BeatSeries, HamiltonParams, RrBounds, RrCorrection, beats_from_signal
from .se_cnn import TrainConfig
from .signal_filter import DEFAULT_BAND, DEFAULT_ORDER, FirSpec, design_bandpass, filter_zero_phase
from .wfdb_io import EcgRecord, atomic_write


@dataclass(frozen=True)
class PipelineConfig:
    dataset_dir: str = "."
    output_dir: str = "out"
    band: tuple[float, float] = DEFAULT_BAND
    fir_order: int = DEFAULT_ORDER
    rr_min: float = 0.3
    rr_max: float = 2.0
    rr_window: int = 5
    match_tol_ms: float = 40.0
    feature_set: str = "rs"
    drop_boundary: bool = True
    amp_from_raw: bool = False
    batch_size: int = 256
    epochs: int = 100
    lr: float = 0.01
    seed: int = 0
    jobs: int = 1
    val_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "band", tuple(float(b) for b in self.band))
        FeatureSet(self.feature_set)
        self.rr_bounds  # validates
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    @property
    def rr_bounds(self) -> RrBounds:
        return RrBounds(self.rr_min, self.rr_max, self.rr_window)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                           learning_rate=self.lr, seed=self.seed)

    def fir_spec(self, fs: float) -> FirSpec:
        return FirSpec(self.band[0], self.band[1], self.fir_order, fs)

    def beat_key(self) -> dict[str, Any]:
        """Settings that determine the beat stage output."""
        return {"band": list(self.band), "fir_order": self.fir_order, "rr_min": self.rr_min,
                "rr_max": self.rr_max, "rr_window": self.rr_window, "amp_from_raw": self.amp_from_raw}

    @classmethod
    def from_mapping(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def updated(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def record_digest(record: EcgRecord) -> str:
    h = hashlib.sha256()
    h.update(record.record_id.encode())
    h.update(np.float64(record.fs).tobytes())
    h.update(np.ascontiguousarray(record.samples, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(record.labels, dtype=np.int8).tobytes())
    return h.hexdigest()


def stage_hash(record: EcgRecord, cfg: PipelineConfig) -> str:
    key = json.dumps({"record": record_digest(record), **cfg.beat_key()}, sort_keys=True)
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def compute_beats(record: EcgRecord, cfg: PipelineConfig) -> tuple[BeatSeries, RrCorrection]:
    filtered = filter_zero_phase(record.samples, design_bandpass(cfg.fir_spec(record.fs)))
    return beats_from_signal(filtered, record.fs, cfg.rr_bounds, HamiltonParams(),
                             amp_source=record.samples if cfg.amp_from_raw else None)


def _save_beats(path: Path, beats: BeatSeries, corr: RrCorrection) -> None:
    import io

    buf = io.BytesIO()
    np.savez(buf, r_idx=beats.r_idx, r_amp=beats.r_amp, s_idx=beats.s_idx, s_amp=beats.s_amp,
             fs=np.float64(beats.fs),
             corr=np.array([corr.ok, corr.merged, corr.inserted, corr.unfixable, corr.skipped], dtype=np.int64))
    atomic_write(path, buf.getvalue())


def _load_beats(path: Path) -> tuple[BeatSeries, RrCorrection]:
    with np.load(path) as z:
        beats = BeatSeries(z["r_idx"], z["r_amp"], z["s_idx"], z["s_amp"], float(z["fs"]))
        ok, merged, inserted, unfixable, skipped = (int(v) for v in z["corr"])
    return beats, RrCorrection(beats.r_idx, bool(ok), merged, inserted, unfixable, bool(skipped))


def beats_cached(record: EcgRecord, cfg: PipelineConfig, cache_dir: Path | None) -> tuple[BeatSeries, RrCorrection]:
    """Beat stage with a content-addressed cache under ``cache_dir``."""
    if cache_dir is None:
        return compute_beats(record, cfg)
    path = Path(cache_dir) / f"{record.record_id}-{stage_hash(record, cfg)}.npz"
    if path.exists():
        return _load_beats(path)
    beats, corr = compute_beats(record, cfg)
    _save_beats(path, beats, corr)
    return beats, corr


@dataclass
class RecordResult:
    record_id: str
    segments: list[FeatureSegment] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    correction: dict = field(default_factory=dict)
    error: str | None = None


def process_record(record: EcgRecord, cfg: PipelineConfig, cache_dir: Path | None = None) -> RecordResult:
    try:
        beats, corr = beats_cached(record, cfg, cache_dir)
        segs, stats = build_record_segments(record, beats, FeatureSet(cfg.feature_set))
    except Exception as exc:  # per-record failures are aggregated by the caller
        return RecordResult(record.record_id, error=f"{type(exc).__name__}: {exc}")
    c = {"ok": corr.ok, "merged": corr.merged, "inserted": corr.inserted,
         "unfixable": corr.unfixable, "skipped": corr.skipped, "n_beats": int(beats.r_idx.size)}
    return RecordResult(record.record_id, segs, stats, c)


def split_train_val(segments: list[FeatureSegment], val_fraction: float, seed: int):
    """Record-level split: a seeded ``val_fraction`` of records (at least one) goes to validation."""
    ids = sorted({s.record_id for s in segments})
    if len(ids) < 2:
        # a single record cannot be split by record; fall back to alternate minutes
        val = [s for i, s in enumerate(segments) if i % 5 == 4]
        tr = [s for i, s in enumerate(segments) if i % 5 != 4]
        return tr, val
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(val_fraction * len(ids))))
    n_val = min(n_val, len(ids) - 1)
    val_ids = set(rng.permutation(ids)[:n_val].tolist())
    return ([s for s in segments if s.record_id not in val_ids],
            [s for s in segments if s.record_id in val_ids])


def config_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["band"] = list(cfg.band)
    return d
