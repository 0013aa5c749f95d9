"""End-to-end stages: CADe evaluation, EMR generation, CADx training,
evaluation and ablation, plus ROC plotting.

Every stage returns a :class:`Report` and writes it as JSON and CSV under
the output directory. Reports carry no timestamps, so a rerun with the same
configuration reproduces them byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .annotations import (
    DEFAULT_RANKING,
    FEATURE_NAMES,
    ConsensusNodule,
    MalignancyLabel,
    cluster_and_consensus,
    malignancy_label,
    parse_annotations,
    select_top_k,
)
from .emr import (
    Alcohol,
    EmrBiasConfig,
    EmrRecord,
    Gender,
    Smoker,
    format_cohort_csv,
    generate_cohort,
    nodule_ordinals,
    validate_bias,
)
from .errors import (
    BackendUnavailable,
    ConfigError,
    EmptyDenominator,
    MissingRocPoints,
    NoOverlapInInputs,
    OutOfBounds,
)
from .fusion import (
    ClassPrototype,
    DetectionRequest,
    Embedding,
    FileBackend,
    TextPrompt,
    ToyBackend,
    build_prototypes,
    detect,
    nearest_class,
    toy_image_encoder,
)
from .learners import (
    GbdtConfig,
    GbdtModel,
    cross_validate,
    feature_importance,
    train_gbdt,
)
from .metrics import (
    accuracy,
    auc,
    confusion,
    dice_score,
    f1,
    iou,
    precision,
    recall,
    roc_curve,
    seg_precision,
    seg_recall,
    specificity,
)
from .volume_io import (
    DEFAULT_WINDOW,
    extract_patch,
    normalize_volume,
    read_mhd,
    world_to_voxel,
)

__all__ = [
    "EMR_COLUMNS",
    "CadxDataset",
    "CadxModel",
    "PipelineConfig",
    "Report",
    "assemble_dataset",
    "classification_metrics",
    "cmd_ablate",
    "cmd_cade_eval",
    "cmd_cadx_eval",
    "cmd_cadx_train",
    "cmd_emr_gen",
    "cmd_plot_roc",
    "load_config",
]

EMR_COLUMNS = (
    "age",
    "gender_male", "gender_female",
    "smoker_never", "smoker_former", "smoker_current",
    "alcohol_none", "alcohol_moderate", "alcohol_heavy",
)
SIMILARITY_COLUMNS = ("sim_benign", "sim_malignant", "sim_score")
CADX_MODEL_FORMAT = "emeralds-cadx"


# --- configuration --------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    out_dir: Path = Path("out")
    scans_dir: Optional[Path] = None
    annotations: Optional[Path] = None
    masks_dir: Optional[Path] = None
    window: Tuple[float, float] = DEFAULT_WINDOW
    backend: str = "toy"
    backend_dir: Optional[Path] = None
    toy_threshold: float = 128.0
    emr_config: Optional[Path] = None
    gbdt: GbdtConfig = GbdtConfig()
    folds: int = 5
    seed: int = 0
    k_features: int = 5
    use_emr: bool = True
    ranking: str = "trained"
    min_readers: int = 3
    min_diameter_mm: float = 3.0
    match_radius_mm: float = 5.0
    patch_size: int = 17
    embedding_dim: int = 32
    slices_2d: str = "truth"

    def __post_init__(self):
        if self.backend not in ("toy", "file"):
            raise ConfigError(f"backend must be 'toy' or 'file', got {self.backend!r}")
        if not 1 <= self.k_features <= len(FEATURE_NAMES):
            raise ConfigError(f"k_features must be in 1..{len(FEATURE_NAMES)}")
        if self.ranking not in ("trained", "default"):
            raise ConfigError("ranking must be 'trained' or 'default'")
        if self.slices_2d not in ("truth", "union"):
            raise ConfigError("slices_2d must be 'truth' or 'union'")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size must be odd and positive")
        if not self.window[0] < self.window[1]:
            raise ConfigError("window lower bound must be below upper bound")

    def require(self, *names: str):
        for name in names:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name} is not configured")
            if not Path(value).exists():
                raise ConfigError(f"{name} does not exist: {value}")

    def fingerprint(self) -> str:
        d = asdict(self)
        canon = json.dumps(d, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def emr_bias_config(self) -> EmrBiasConfig:
        if self.emr_config is not None:
            return EmrBiasConfig.from_file(self.emr_config, seed=self.seed)
        return EmrBiasConfig.default(seed=self.seed)


_PATH_KEYS = {"out_dir", "scans_dir", "annotations", "masks_dir", "backend_dir", "emr_config"}
_GBDT_PREFIX = "gbdt_"


def _coerce(value: str, kind):
    if kind is bool:
        v = value.strip().lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(value)
        return v in ("true", "1", "yes")
    return kind(value)


def load_config(path=None, **overrides) -> PipelineConfig:
    """Read ``key = value`` config text; relative paths resolve against
    the file's directory. Falls back to ``$EMERALDS_CONFIG`` when ``path``
    is None; with neither, returns defaults plus ``overrides``."""
    if path is None:
        path = os.environ.get("EMERALDS_CONFIG")
    values: Dict[str, object] = {}
    gbdt: Dict[str, object] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        types = {f.name: f.type for f in fields(PipelineConfig)}
        gtypes = {f.name: f.type for f in fields(GbdtConfig)}
        window = list(DEFAULT_WINDOW)
        for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            try:
                if key in _PATH_KEYS:
                    values[key] = (path.parent / value).resolve()
                elif key in ("window_lo", "window_hi"):
                    window[key == "window_hi"] = float(value)
                    values["window"] = tuple(window)
                elif key.startswith(_GBDT_PREFIX) and key[len(_GBDT_PREFIX):] in gtypes:
                    name = key[len(_GBDT_PREFIX):]
                    gbdt[name] = _coerce(value, {"int": int, "float": float}[gtypes[name]])
                elif key in types and key not in ("window", "gbdt"):
                    kind = {"int": int, "float": float, "bool": bool, "str": str}[types[key]]
                    values[key] = _coerce(value, kind)
                else:
                    raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            except ConfigError:
                raise
            except (ValueError, KeyError):
                raise ConfigError(f"{path}:{line_no}: bad value for {key}: {value!r}") from None
    gbdt_overrides = overrides.pop("gbdt", None)
    values.update({k: v for k, v in overrides.items() if v is not None})
    seed = int(values.get("seed", 0))
    try:
        values["gbdt"] = gbdt_overrides or GbdtConfig(**{"seed": seed, **gbdt})
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# --- reports --------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, float):
        return None if math.isnan(x) else x
    if isinstance(x, (np.floating,)):
        return _jsonable(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    return x


@dataclass
class Report:
    stage: str
    metrics: Dict[str, object]
    rows: List[Dict[str, object]]
    fingerprint: str
    version: str = __version__
    extra: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        d = {"stage": self.stage, "version": self.version, "fingerprint": self.fingerprint,
             "metrics": self.metrics, "rows": self.rows, "extra": self.extra}
        return json.dumps(_jsonable(d), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            cols = list(self.rows[0].keys())
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _csv_value(r[k]) for k in cols})
        return buf.getvalue()

    def write(self, out_dir, name: str) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{name}.csv").write_text(self.to_csv())
        path = out_dir / f"{name}.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path) -> "Report":
        d = json.loads(Path(path).read_text())
        return cls(d["stage"], d["metrics"], d["rows"], d["fingerprint"], d["version"],
                   d.get("extra", {}))

    def has_undefined_metric(self) -> bool:
        return any(isinstance(v, float) and math.isnan(v) for v in self.metrics.values())


def _csv_value(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, (list, tuple)):
        return "|".join(str(x) for x in v)
    return v


# --- CADe -----------------------------------------------------------------

def _backend(cfg: PipelineConfig):
    if cfg.backend == "toy":
        return ToyBackend(threshold=cfg.toy_threshold, window=cfg.window)
    if cfg.backend_dir is None or not Path(cfg.backend_dir).is_dir():
        raise BackendUnavailable(f"file backend directory missing: {cfg.backend_dir}")
    return FileBackend(cfg.backend_dir)


def _overlap_row(pred: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    def guarded(fn):
        try:
            return fn(pred, truth)
        except EmptyDenominator:
            return math.nan
    return {"dice": dice_score(pred, truth), "iou": iou(pred, truth),
            "precision": guarded(seg_precision), "recall": guarded(seg_recall)}


SEG_METRICS = ("dice", "iou", "precision", "recall")


def _mean_defined(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


def segmentation_summary(rows: Sequence[Dict[str, object]]) -> Dict[str, object]:
    """Per-mode means over case rows, skipping undefined entries."""
    out: Dict[str, object] = {}
    for mode in ("3d", "2d"):
        sub = [r for r in rows if r["mode"] == mode]
        out[f"{mode}_cases"] = len(sub)
        for m in SEG_METRICS:
            out[f"{mode}_{m}"] = _mean_defined([float(r[m]) for r in sub])
    return out


def cmd_cade_eval(cfg: PipelineConfig) -> Report:
    """Score backend masks against ground truth per volume (3D) and per slice (2D).

    Only scans with both a prediction and a truth mask count. 2D rows cover
    slices holding ground truth (``slices_2d = "truth"``) or slices where
    either mask is present (``"union"``).
    """
    cfg.require("scans_dir", "masks_dir")
    backend = _backend(cfg)
    rows: List[Dict[str, object]] = []
    for scan in sorted(Path(cfg.scans_dir).glob("*.mhd")):
        scan_id = scan.stem
        truth_path = Path(cfg.masks_dir) / f"{scan_id}.mhd"
        if not truth_path.is_file():
            continue
        req = DetectionRequest(scan_id, scan, TextPrompt("lung nodule"))
        try:
            resp = detect(backend, req)
        except BackendUnavailable:
            if cfg.backend == "file":
                continue
            raise
        truth_vol = read_mhd(truth_path)
        truth = truth_vol.array.astype(bool)
        pred = resp.union(truth_vol.header)
        rows.append({"scan_id": scan_id, "mode": "3d", "slice": -1,
                     "n_masks": len(resp.masks), **_overlap_row(pred, truth)})
        if cfg.slices_2d == "truth":
            zs = np.flatnonzero(truth.any(axis=(1, 2)))
        else:
            zs = np.flatnonzero((truth | pred).any(axis=(1, 2)))
        for z in zs:
            rows.append({"scan_id": scan_id, "mode": "2d", "slice": int(z),
                         "n_masks": len(resp.masks), **_overlap_row(pred[z], truth[z])})
    if not rows:
        raise NoOverlapInInputs("no scan has both a prediction and a ground-truth mask")
    report = Report("cade-eval", segmentation_summary(rows), rows, cfg.fingerprint(),
                    extra={"backend": cfg.backend})
    report.write(cfg.out_dir, "cade_eval")
    return report


# --- EMR ------------------------------------------------------------------

def load_consensus(cfg: PipelineConfig) -> List[ConsensusNodule]:
    cfg.require("annotations")
    anns = parse_annotations(Path(cfg.annotations).read_text(encoding="utf-8"))
    return cluster_and_consensus(anns, cfg.min_readers, cfg.min_diameter_mm, cfg.match_radius_mm)


def cmd_emr_gen(cfg: PipelineConfig) -> Tuple[Report, bool]:
    """Generate the EMR cohort and check its biases.

    Returns the report and whether the check passed. With a null-bias config
    the check always passes and the report states whether any bias showed up.
    """
    nodules = load_consensus(cfg)
    emr_cfg = cfg.emr_bias_config()
    records = generate_cohort(nodules, emr_cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "emr_cohort.csv").write_text(format_cohort_csv(nodules, records))
    bias = validate_bias(list(zip(nodules, records)))

    if emr_cfg.is_null_bias:
        ok = True
        status = "no bias detected" if bias.max_abs_z() < 3.0 else "unexpected bias detected"
    else:
        ok = bias.directional(3.0)
        status = "directional biases confirmed" if ok else "directional check failed"
    metrics: Dict[str, object] = {"cohort_size": bias.cohort_size, "status": status}
    for r in bias.rules:
        metrics[f"{r.rule}_z"] = r.z
    rows = [asdict(r) for r in bias.rules]
    report = Report("emr-gen", metrics, rows, cfg.fingerprint(),
                    extra={"emr_config": asdict(emr_cfg)})
    report.write(out, "emr_bias")
    return report, ok


# --- CADx -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CadxDataset:
    """Labelled nodules with everything the classifier can draw on."""

    scan_ids: List[str]
    ordinals: List[int]
    labels: np.ndarray
    radiomics: np.ndarray
    embeddings: np.ndarray
    emr: np.ndarray
    skipped: int = 0

    def __len__(self):
        return self.labels.size


def _emr_vector(r: EmrRecord) -> List[float]:
    return [float(r.age_years),
            float(r.gender is Gender.MALE), float(r.gender is Gender.FEMALE),
            float(r.smoker is Smoker.NEVER), float(r.smoker is Smoker.FORMER),
            float(r.smoker is Smoker.CURRENT),
            float(r.alcohol is Alcohol.NONE), float(r.alcohol is Alcohol.MODERATE),
            float(r.alcohol is Alcohol.HEAVY)]


def assemble_dataset(cfg: PipelineConfig) -> CadxDataset:
    """Consensus nodules with a usable label, a patch embedding and an EMR.

    Nodules whose scan is missing or whose centre falls outside the volume
    are skipped and counted.
    """
    cfg.require("scans_dir", "annotations")
    nodules = load_consensus(cfg)
    records = generate_cohort(nodules, cfg.emr_bias_config())
    ordinals = nodule_ordinals(nodules)
    cache = {}
    size = (cfg.patch_size,) * 3

    scan_ids, ords, labels, rad, emb, emr = [], [], [], [], [], []
    skipped = 0
    for nod, rec, o in zip(nodules, records, ordinals):
        label = malignancy_label(nod.malignancy_mean)
        if label is MalignancyLabel.EXCLUDED:
            continue
        if nod.scan_id not in cache:
            path = Path(cfg.scans_dir) / f"{nod.scan_id}.mhd"
            cache.clear()
            cache[nod.scan_id] = (normalize_volume(read_mhd(path), cfg.window)
                                  if path.is_file() else None)
        vol = cache[nod.scan_id]
        if vol is None:
            skipped += 1
            continue
        try:
            centre = world_to_voxel(nod.center_world, vol.header)
        except OutOfBounds:
            skipped += 1
            continue
        patch = extract_patch(vol, centre, size)
        scan_ids.append(nod.scan_id)
        ords.append(o)
        labels.append(int(label is MalignancyLabel.MALIGNANT))
        rad.append(nod.radiomics.as_array())
        emb.append(toy_image_encoder(patch, cfg.embedding_dim).values)
        emr.append(_emr_vector(rec))
    if not labels:
        raise ConfigError("no labelled nodules with available scans")
    return CadxDataset(scan_ids, ords, np.asarray(labels), np.asarray(rad),
                       np.asarray(emb), np.asarray(emr), skipped)


def feature_columns(selected: Sequence[str], use_emr: bool) -> Tuple[str, ...]:
    return tuple(selected) + SIMILARITY_COLUMNS + (EMR_COLUMNS if use_emr else ())


@dataclass
class CadxModel:
    """Prototype matcher + EMR scaling + boosted trees, fitted together."""

    selected: Tuple[str, ...]
    use_emr: bool
    prototypes: List[ClassPrototype]
    age_mean: float
    age_sd: float
    gbdt: GbdtModel

    @property
    def columns(self) -> Tuple[str, ...]:
        return feature_columns(self.selected, self.use_emr)

    def features(self, ds: CadxDataset, idx: np.ndarray) -> np.ndarray:
        return _feature_matrix(ds, idx, self.selected, self.use_emr, self.prototypes,
                               self.age_mean, self.age_sd)

    def predict_proba(self, ds: CadxDataset, idx: np.ndarray) -> np.ndarray:
        return self.gbdt.predict_proba(self.features(ds, idx))

    def to_dict(self) -> dict:
        return {
            "format": CADX_MODEL_FORMAT,
            "version": 1,
            "selected": list(self.selected),
            "use_emr": self.use_emr,
            "prototypes": [{"class": p.class_id.value, "centroid": p.centroid.values.tolist(),
                            "members": p.member_count} for p in self.prototypes],
            "age_mean": self.age_mean,
            "age_sd": self.age_sd,
            "gbdt": self.gbdt.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CadxModel":
        if d.get("format") != CADX_MODEL_FORMAT:
            raise ConfigError("not a CADx model file")
        protos = [ClassPrototype(MalignancyLabel(p["class"]), Embedding(p["centroid"]),
                                 int(p["members"])) for p in d["prototypes"]]
        return cls(tuple(d["selected"]), bool(d["use_emr"]), protos, float(d["age_mean"]),
                   float(d["age_sd"]), GbdtModel.from_dict(d["gbdt"]))


def _feature_matrix(ds, idx, selected, use_emr, prototypes, age_mean, age_sd) -> np.ndarray:
    cols = [FEATURE_NAMES.index(name) for name in selected]
    parts = [ds.radiomics[idx][:, cols]]
    sim = np.zeros((idx.size, 3))
    for row, i in enumerate(idx):
        label, score = nearest_class(ds.embeddings[i], prototypes)
        sim[row] = (label is MalignancyLabel.BENIGN, label is MalignancyLabel.MALIGNANT, score)
    parts.append(sim)
    if use_emr:
        emr = ds.emr[idx].copy()
        emr[:, 0] = (emr[:, 0] - age_mean) / age_sd
        parts.append(emr)
    return np.hstack(parts)


def fit_cadx(ds: CadxDataset, idx: np.ndarray, selected: Sequence[str], use_emr: bool,
             gbdt_cfg: GbdtConfig) -> CadxModel:
    """Fit prototypes, age scaling and trees on the rows in ``idx`` only."""
    idx = np.asarray(idx)
    labels = [MalignancyLabel.MALIGNANT if y else MalignancyLabel.BENIGN for y in ds.labels[idx]]
    prototypes = build_prototypes(list(zip(ds.embeddings[idx], labels)))
    age = ds.emr[idx, 0]
    age_mean = float(age.mean())
    age_sd = float(age.std()) or 1.0
    X = _feature_matrix(ds, idx, selected, use_emr, prototypes, age_mean, age_sd)
    gbdt = train_gbdt(X, ds.labels[idx], gbdt_cfg, columns=feature_columns(selected, use_emr))
    return CadxModel(tuple(selected), use_emr, prototypes, age_mean, age_sd, gbdt)


class _IndexTrainer:
    """Adapts :func:`fit_cadx` to :func:`cross_validate`, whose rows are indices."""

    def __init__(self, ds, selected, use_emr, gbdt_cfg):
        self.ds, self.selected, self.use_emr, self.gbdt_cfg = ds, selected, use_emr, gbdt_cfg

    def __call__(self, X, y):
        model = fit_cadx(self.ds, X[:, 0].astype(int), self.selected, self.use_emr, self.gbdt_cfg)
        ds = self.ds

        class _Fitted:
            def predict_proba(self, Xq):
                return model.predict_proba(ds, Xq[:, 0].astype(int))
        return _Fitted()


def radiomic_ranking(cfg: PipelineConfig, ds: CadxDataset) -> Tuple[str, ...]:
    """Radiomic features ordered by importance in a model given all seven."""
    if cfg.ranking == "default":
        return DEFAULT_RANKING
    model = fit_cadx(ds, np.arange(len(ds)), FEATURE_NAMES, cfg.use_emr, cfg.gbdt)
    return tuple(c for c in feature_importance(model.gbdt) if c in FEATURE_NAMES)


def classification_metrics(labels, scores, predictions) -> Dict[str, float]:
    c = confusion(labels, predictions)
    return {
        "accuracy": accuracy(c), "precision": precision(c), "recall": recall(c),
        "f1": f1(c), "specificity": specificity(c),
        "auc": auc(roc_curve(scores, labels)),
        "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
    }


def _case_rows(ds: CadxDataset, scores, predictions, folds=None) -> List[Dict[str, object]]:
    rows = []
    for i in range(len(ds)):
        row = {"scan_id": ds.scan_ids[i], "nodule_ordinal": ds.ordinals[i]}
        if folds is not None:
            row["fold"] = int(folds[i])
        row.update({"label": int(ds.labels[i]), "score": float(scores[i]),
                    "prediction": int(predictions[i])})
        rows.append(row)
    return rows


def _cross_validated(cfg: PipelineConfig, ds: CadxDataset, selected, use_emr):
    trainer = _IndexTrainer(ds, tuple(selected), use_emr, cfg.gbdt)
    rows = np.arange(len(ds))[:, None]
    return cross_validate(rows, ds.labels, trainer, cfg.folds, cfg.seed, groups=ds.scan_ids)


def cmd_cadx_train(cfg: PipelineConfig, ds: Optional[CadxDataset] = None,
                   ranking: Optional[Sequence[str]] = None) -> Report:
    """Cross-validated evaluation, then a final fit on all nodules.

    Folds are grouped by scan. Writes ``cadx_train.json``/``.csv`` and the
    model file ``cadx_model.json``.
    """
    ds = ds if ds is not None else assemble_dataset(cfg)
    ranking = tuple(ranking) if ranking is not None else radiomic_ranking(cfg, ds)
    selected = select_top_k(ranking, cfg.k_features)
    cv = _cross_validated(cfg, ds, selected, cfg.use_emr)
    preds = (cv.scores >= cv.threshold).astype(int)
    metrics = classification_metrics(ds.labels, cv.scores, preds)
    metrics.update({"n_samples": len(ds), "n_skipped": ds.skipped, "folds": cfg.folds})

    model = fit_cadx(ds, np.arange(len(ds)), selected, cfg.use_emr, cfg.gbdt)
    suffix = "" if cfg.use_emr else "_no_emr"
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"cadx_model{suffix}.json").write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")

    report = Report(
        "cadx-train", metrics, _case_rows(ds, cv.scores, preds, cv.fold_of), cfg.fingerprint(),
        extra={"columns": list(model.columns), "ranking": list(ranking),
               "selected": list(selected), "use_emr": cfg.use_emr,
               "roc": {"fpr": cv.roc.fpr.tolist(), "tpr": cv.roc.tpr.tolist()},
               "fold_counts": [asdict(c) for c in cv.fold_counts]})
    report.write(out, f"cadx_train{suffix}")
    return report


def load_cadx_model(path) -> CadxModel:
    return CadxModel.from_dict(json.loads(Path(path).read_text()))


def cmd_cadx_eval(cfg: PipelineConfig, model_path) -> Report:
    """Apply a saved CADx model to every labelled nodule in the dataset."""
    model = load_cadx_model(model_path)
    ds = assemble_dataset(cfg)
    idx = np.arange(len(ds))
    scores = model.predict_proba(ds, idx)
    preds = (scores >= 0.5).astype(int)
    metrics = classification_metrics(ds.labels, scores, preds)
    metrics.update({"n_samples": len(ds), "n_skipped": ds.skipped})
    roc = roc_curve(scores, ds.labels)
    report = Report("cadx-eval", metrics, _case_rows(ds, scores, preds), cfg.fingerprint(),
                    extra={"columns": list(model.columns), "model": str(model_path),
                           "roc": {"fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist()}})
    report.write(cfg.out_dir, "cadx_eval")
    return report


def cmd_ablate(cfg: PipelineConfig, k_list: Sequence[int] = range(1, 8),
               ds: Optional[CadxDataset] = None) -> Report:
    """Re-run cross-validation for each number of top-ranked radiomic features."""
    k_list = [int(k) for k in k_list]
    for k in k_list:
        select_top_k(FEATURE_NAMES, k)
    ds = ds if ds is not None else assemble_dataset(cfg)
    ranking = radiomic_ranking(cfg, ds)
    rows = []
    for k in k_list:
        selected = select_top_k(ranking, k)
        cv = _cross_validated(cfg, ds, selected, cfg.use_emr)
        preds = (cv.scores >= cv.threshold).astype(int)
        m = classification_metrics(ds.labels, cv.scores, preds)
        rows.append({"k": k, "features": list(selected), "precision": m["precision"],
                     "f1": m["f1"], "auc": m["auc"], "accuracy": m["accuracy"],
                     "recall": m["recall"], "specificity": m["specificity"]})
    best = max(rows, key=lambda r: (r["auc"], -r["k"]))
    report = Report("ablate", {"best_k_by_auc": best["k"], "n_samples": len(ds)}, rows,
                    cfg.fingerprint(), extra={"ranking": list(ranking)})
    report.write(cfg.out_dir, "ablation")
    return report


# --- ROC plot -------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def cmd_plot_roc(reports: Sequence[Tuple[str, Report]], out_path=None) -> str:
    """One SVG with a polyline per report, the chance diagonal and AUCs."""
    size, pad = 400, 50
    w, h = size + 2 * pad + 180, size + 2 * pad

    def px(fx, fy):
        return f"{pad + fx * size:.3f},{pad + (1.0 - fy) * size:.3f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect x="{pad}" y="{pad}" width="{size}" height="{size}" fill="none" stroke="#000"/>',
        f'<polyline points="{px(0, 0)} {px(1, 1)}" fill="none" stroke="#999" '
        f'stroke-dasharray="4 4"/>',
        f'<text x="{pad + size / 2}" y="{h - 12}" text-anchor="middle" font-size="13">'
        f'False positive rate</text>',
        f'<text x="14" y="{pad + size / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {pad + size / 2})">True positive rate</text>',
    ]
    for i, (name, rep) in enumerate(reports):
        roc = rep.extra.get("roc") if rep.extra else None
        if not roc or not roc.get("fpr"):
            raise MissingRocPoints(f"report {name!r} has no ROC points")
        colour = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(px(x, y) for x, y in zip(roc["fpr"], roc["tpr"]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" '
                     f'stroke-width="2"/>')
        area = float(np.trapezoid(roc["tpr"], roc["fpr"]))
        ly = pad + 20 + 20 * i
        parts.append(f'<line x1="{pad + size + 15}" y1="{ly - 4}" x2="{pad + size + 35}" '
                     f'y2="{ly - 4}" stroke="{colour}" stroke-width="2"/>')
        parts.append(f'<text x="{pad + size + 40}" y="{ly}" font-size="12">'
                     f'{_escape(name)} (AUC = {area:.3f})</text>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(svg)
    return svg


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
