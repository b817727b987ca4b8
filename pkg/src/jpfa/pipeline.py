"""Experiment harness: config files, phase-by-phase runs, reports and ablations.

One output directory holds everything a run produces::

    config.json          resolved experiment config
    data/                benchmark export (PGM + manifests)
    pretrain.weights     trunk + pretrained source head
    pixel.weights        generators and discriminators
    fake_images.npy      translated source images (float64)
    feature.weights      F_S and F_F
    *_log.csv            training logs
    report.json          JPFA evaluation (best of variants)
    source_only.json     pretrained head alone, target vs source gallery
    manifest.json        every artifact with its sha256

Commands either finish or leave a ``.failed`` marker naming the error.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data, evaluation, train
from .data import DatasetSplit, DomainStyle, SampleRecord
from .models import HashHead, Trunk, load_weights, save_weights
from .losses import LossWeights
from .train import TrainConfig, TrainingLog

log = logging.getLogger(__name__)

VERSION = "0.1.0"
PHASES = ("pretrain", "pixel", "feature")
BETA_GRID = (0.5, 1.0, 1.5, 2.0, 2.5)
# (name, t-s weight, t-f weight, use consistency)
LOSS_GRID = (
    ("t-s", 1.0, 0.0, False),
    ("t-f", 0.0, 1.0, False),
    ("t-s+t-f", 1.0, 1.0, False),
    ("t-s+t-f+consistency", 1.0, 1.0, True),
)


DESK_IDENTITY_WEIGHT = 0.01


class PipelineError(RuntimeError):
    pass


def _default_phase(phase: str) -> dict:
    table = {
        "pretrain": TrainConfig(phase="pretrain", epochs=30, batch_size=16, lr=1e-3),
        # identity weight 1 pins both generators to the identity map at this scale (see README)
        "pixel": TrainConfig(phase="pixel", epochs=40, batch_size=4, lr=2e-4, adam_beta1=0.5,
                             weights=LossWeights(identity_weight=DESK_IDENTITY_WEIGHT)),
        "feature": TrainConfig(phase="feature", epochs=30, batch_size=16, lr=1e-3),
    }
    d = table[phase].to_dict()
    d.pop("seed")
    return d


@dataclass
class ExperimentConfig:
    """Everything a run depends on. ``seed`` drives both the benchmark and every phase."""

    seed: int = 42
    n_identities: int = 20
    n_per_identity: int = 10
    source_style: dict = field(default_factory=lambda: asdict(data.FLASHLIKE))
    target_style: dict = field(default_factory=lambda: asdict(data.NATURALIKE))
    # optional image folders replacing the synthetic benchmark
    source_dir: str | None = None
    target_dir: str | None = None
    pretrain: dict = field(default_factory=lambda: _default_phase("pretrain"))
    pixel: dict = field(default_factory=lambda: _default_phase("pixel"))
    feature: dict = field(default_factory=lambda: _default_phase("feature"))
    ablation_seeds: list = field(default_factory=lambda: [41, 42, 43])

    def __post_init__(self):
        for phase in PHASES:
            self.phase_config(phase)  # validates
        DomainStyle(**self.source_style)
        DomainStyle(**self.target_style)

    def phase_config(self, phase: str, **overrides) -> TrainConfig:
        d = dict(getattr(self, phase))
        d.setdefault("phase", phase)
        if d["phase"] != phase:
            raise ValueError(f"{phase} section declares phase {d['phase']!r}")
        d["seed"] = self.seed
        d.update(overrides)
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def checksum(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        base = cls()
        merged = {}
        for k in known:
            if k in d and k in PHASES:
                section = dict(getattr(base, k))
                over = dict(d[k])
                # a partial weights dict only overrides the listed terms
                if isinstance(over.get("weights"), dict) and isinstance(section.get("weights"), dict):
                    over["weights"] = {**section["weights"], **over["weights"]}
                section.update(over)
                merged[k] = section
            elif k in d:
                merged[k] = d[k]
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise PipelineError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise PipelineError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = copy.deepcopy(self.to_dict())
        d["seed"] = int(seed)
        return ExperimentConfig.from_dict(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# data


def load_splits(cfg: ExperimentConfig) -> tuple[DatasetSplit, DatasetSplit]:
    """Source split (labelled) and target split (labels hidden)."""
    if cfg.source_dir or cfg.target_dir:
        if not (cfg.source_dir and cfg.target_dir):
            raise PipelineError("source_dir and target_dir must be given together")
        src = data.load_image_folder(cfg.source_dir, "source")
        tgt = data.load_image_folder(cfg.target_dir, "target", role="target")
        return src, tgt
    styles = (DomainStyle(**cfg.source_style), DomainStyle(**cfg.target_style))
    bench = data.generate_benchmark(cfg.n_identities, cfg.n_per_identity, styles, cfg.seed)
    return bench[styles[0].name], bench[styles[1].name].as_role("target")


class Run:
    """Artifacts of one experiment directory."""

    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise PipelineError(f"missing prerequisite artifact: {p}")
        return p

    def prepare(self) -> None:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            probe = self.out / ".write_test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise PipelineError(f"output directory {self.out} is not writable: {exc}") from exc
        cfg_path = self.path("config.json")
        text = canonical_json(self.cfg.to_dict())
        if cfg_path.exists() and cfg_path.read_text() != text:
            log.warning("config in %s differs from the stored one; overwriting", self.out)
        cfg_path.write_text(text)

    def write_manifest(self) -> dict:
        artifacts = {}
        for p in sorted(self.out.rglob("*")):
            if p.is_file() and p != self.path("manifest.json") and not p.name.endswith(".failed"):
                artifacts[str(p.relative_to(self.out))] = sha256_file(p)
        man = {
            "tool_version": VERSION,
            "seed": self.cfg.seed,
            "config": "config.json",
            "config_checksum": self.cfg.checksum(),
            "artifacts": artifacts,
        }
        self.path("manifest.json").write_text(canonical_json(man))
        return man


def gen_data(run: Run, force: bool = False) -> dict:
    """Export the benchmark as PGM folders with manifests. No-op when already present."""
    run.prepare()
    folder = run.path("data")
    marker = folder / "manifest.json"
    if marker.exists() and not force:
        log.info("data already present in %s", folder)
        return json.loads(marker.read_text())
    src, tgt = load_splits(run.cfg)
    data.save_split(src, folder / "source")
    data.save_split(tgt, folder / "target")
    man = {
        "seed": run.cfg.seed,
        "config_checksum": run.cfg.checksum(),
        "source": {"count": len(src), "checksum": src.checksum()},
        "target": {"count": len(tgt), "checksum": tgt.checksum()},
    }
    marker.write_text(canonical_json(man))
    run.write_manifest()
    return man


# ---------------------------------------------------------------------------
# phases


def _load_pretrained(run: Run) -> tuple[Trunk, HashHead]:
    groups = load_weights(run.require("pretrain.weights"))
    trunk = Trunk()
    trunk.load_state_dict(groups["trunk"])
    trunk.freeze()
    head = HashHead(run.cfg.phase_config("pretrain").code_length)
    head.load_state_dict(groups["head"])
    return trunk, head


def _load_heads(run: Run) -> tuple[HashHead, HashHead]:
    groups = load_weights(run.require("feature.weights"))
    k = run.cfg.phase_config("feature").code_length
    f_s, f_f = HashHead(k, role="source"), HashHead(k, role="fake")
    f_s.load_state_dict(groups["F_S"])
    f_f.load_state_dict(groups["F_F"])
    return f_s, f_f


def _fake_split(source: DatasetSplit, images: np.ndarray) -> DatasetSplit:
    recs = [SampleRecord(img, r.label, "fake", r.index, {"from": r.domain}) for img, r in zip(images, source.records)]
    return DatasetSplit(recs, role="fake", labels_visible=True, domain="fake")


def _save_npy(path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
    Path(path).write_bytes(buf.getvalue())


def run_phases(run: Run, phases=PHASES, no_pixel: bool = False, splits=None) -> dict:
    """Execute the requested phases in pipeline order; returns the manifest."""
    unknown = set(phases) - set(PHASES)
    if unknown:
        raise PipelineError(f"unknown phases {sorted(unknown)}; choose from {', '.join(PHASES)}")
    phases = [p for p in PHASES if p in set(phases)]
    run.prepare()
    src, tgt = splits or load_splits(run.cfg)

    if "pretrain" in phases:
        tlog = TrainingLog()
        trunk, head = train.pretrain_dhn(src, run.cfg.phase_config("pretrain"), tlog)
        save_weights(run.path("pretrain.weights"), {"trunk": trunk, "head": head})
        tlog.write_csv(run.path("pretrain_log.csv"))

    if "pixel" in phases:
        trunk, head = _load_pretrained(run)
        tlog = TrainingLog()
        models, fake = train.train_pixel_alignment(src, tgt, trunk, head, run.cfg.phase_config("pixel"), tlog)
        save_weights(run.path("pixel.weights"),
                     {"G_XY": models.g_xy, "G_YX": models.g_yx, "D_X": models.d_x, "D_Y": models.d_y})
        _save_npy(run.path("fake_images.npy"), fake.images[:, 0])
        tlog.write_csv(run.path("pixel_log.csv"))
        means = [r[4] for r in tlog.rows if r[3] == "pixel" and r[1] == run.cfg.phase_config("pixel").epochs - 1]
        run.path("pixel_summary.json").write_text(canonical_json({"final_epoch_pixel_objective": float(np.mean(means))}))

    if "feature" in phases:
        trunk, head = _load_pretrained(run)
        fake, pixel_value = _fake_for_feature(run, src, no_pixel)
        tlog = TrainingLog()
        f_s, f_f = train.train_feature_alignment(src, fake, tgt, trunk, run.cfg.phase_config("feature"),
                                                 init_head=head, pixel_value=pixel_value, log_=tlog)
        save_weights(run.path("feature.weights"), {"F_S": f_s, "F_F": f_f})
        tlog.write_csv(run.path("feature_log.csv"))
    return run.write_manifest()


def _fake_for_feature(run: Run, src: DatasetSplit, no_pixel: bool) -> tuple[DatasetSplit, float]:
    if no_pixel:
        return train.substitute_fake(src), 0.0
    images = np.load(run.require("fake_images.npy"), allow_pickle=False)
    if len(images) != len(src):
        raise PipelineError(f"fake_images.npy holds {len(images)} images for {len(src)} source images")
    summary = json.loads(run.require("pixel_summary.json").read_text())
    return _fake_split(src, images), float(summary["final_epoch_pixel_objective"])


# ---------------------------------------------------------------------------
# evaluation


def _codes(trunk, head, splits: dict) -> dict:
    return {name: train.encode(trunk, head, s.images) for name, s in splits.items()}


def _filter(report: evaluation.EvalReport, mode: str) -> dict:
    d = report.to_json()
    if mode == "identify":
        d = {k: v for k, v in d.items() if k not in ("eer", "eer_variant")}
        for v in d["variants"]:
            v.pop("eer")
    elif mode == "verify":
        d = {k: v for k, v in d.items() if k not in ("accuracy", "accuracy_variant")}
        for v in d["variants"]:
            v.pop("accuracy")
    return d


def evaluate(run: Run, mode: str = "both", splits=None, no_pixel: bool = False) -> dict:
    """Write ``report.json`` (JPFA) and ``source_only.json``; returns both reports."""
    if mode not in ("identify", "verify", "both"):
        raise PipelineError(f"unknown mode {mode!r}")
    src, tgt = splits or load_splits(run.cfg)
    trunk, head = _load_pretrained(run)
    labels = {"target": tgt.evaluation_labels(), "source": src.labels, "fake": src.labels}
    extra = {"config_checksum": run.cfg.checksum(), "seed": run.cfg.seed, "mode": mode}

    base = evaluation.best_of_variants({"F_S": _codes(trunk, head, {"target": tgt, "source": src})}, labels)
    reports = {"source_only": base}
    if run.path("feature.weights").exists():
        fake, _ = _fake_for_feature(run, src, no_pixel or not run.path("fake_images.npy").exists())
        f_s, f_f = _load_heads(run)
        sets = {"target": tgt, "source": src, "fake": fake}
        codes = {"F_S": _codes(trunk, f_s, sets), "F_F": _codes(trunk, f_f, sets)}
        reports["jpfa"] = evaluation.best_of_variants(codes, labels)
    else:
        log.warning("no feature.weights in %s; only the source-only baseline is reported", run.out)

    out = {}
    for name, rep in reports.items():
        fname = "report.json" if name == "jpfa" else "source_only.json"
        payload = dict(_filter(rep, mode), method=name, **extra)
        run.path(fname).write_text(canonical_json(payload))
        if mode != "identify":
            evaluation.write_roc_csv(rep.roc, run.path(fname.replace(".json", "_roc.csv")))
        out[name] = payload
    run.write_manifest()
    return out


def full_run(run: Run, no_pixel: bool = False) -> dict:
    splits = load_splits(run.cfg)
    phases = ("pretrain", "feature") if no_pixel else PHASES
    run_phases(run, phases, no_pixel=no_pixel, splits=splits)
    return evaluate(run, "both", splits=splits, no_pixel=no_pixel)


# ---------------------------------------------------------------------------
# ablation


def ablation_cells(grid: str) -> list[tuple[str, dict]]:
    if grid == "losses":
        cells = []
        for name, ts, tf, consis in LOSS_GRID:
            over = {"mmd_ts_weight": ts, "mmd_tf_weight": tf}
            if not consis:
                over["beta"] = 0.0
            cells.append((name, over))
        return cells
    if grid == "beta":
        return [(f"beta={b:g}", {"beta": b}) for b in BETA_GRID]
    raise PipelineError(f"unknown grid {grid!r}; use 'losses' or 'beta'")


def _cell_config(cfg: ExperimentConfig, over: dict) -> TrainConfig:
    base = cfg.phase_config("feature")
    weights = dict(asdict(base.weights))
    if "beta" in over:
        weights["beta"] = over["beta"]
    kw = {k: v for k, v in over.items() if k != "beta"}
    return cfg.phase_config("feature", weights=weights, **kw)


def ablate(cfg: ExperimentConfig, out, grid: str, seeds=None, force: bool = False) -> Path:
    """Feature-phase grid on top of one pretrain + pixel run per seed; writes ``ablation_<grid>.csv``."""
    cells = ablation_cells(grid)
    seeds = list(seeds if seeds is not None else cfg.ablation_seeds)
    out = Path(out)
    rows = []
    for seed in seeds:
        run = Run(cfg.with_seed(seed), out / f"seed_{seed}")
        splits = load_splits(run.cfg)
        need = [p for p, f in (("pretrain", "pretrain.weights"), ("pixel", "fake_images.npy"))
                if force or not run.path(f).exists()]
        if need:
            run_phases(run, need, splits=splits)
        src, tgt = splits
        trunk, head = _load_pretrained(run)
        fake, pixel_value = _fake_for_feature(run, src, no_pixel=False)
        labels = {"target": tgt.evaluation_labels(), "source": src.labels, "fake": src.labels}
        sets = {"target": tgt, "source": src, "fake": fake}
        for name, over in cells:
            f_s, f_f = train.train_feature_alignment(src, fake, tgt, trunk, _cell_config(run.cfg, over),
                                                     init_head=head, pixel_value=pixel_value)
            rep = evaluation.best_of_variants({"F_S": _codes(trunk, f_s, sets), "F_F": _codes(trunk, f_f, sets)},
                                              labels)
            rows.append({"grid": grid, "cell": name, "seed": str(seed), "accuracy": rep.accuracy, "eer": rep.eer})
    for name, _ in cells:
        mine = [r for r in rows if r["cell"] == name]
        rows.append({"grid": grid, "cell": name, "seed": "mean",
                     "accuracy": float(np.mean([r["accuracy"] for r in mine])),
                     "eer": float(np.mean([r["eer"] for r in mine]))})
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{grid}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grid", "cell", "seed", "accuracy", "eer"])
        for r in rows:
            w.writerow([r["grid"], r["cell"], r["seed"], repr(r["accuracy"]), repr(r["eer"])])
    return path


def read_ablation(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r, accuracy=float(r["accuracy"]), eer=float(r["eer"])) for r in csv.DictReader(fh)]
