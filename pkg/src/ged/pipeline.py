"""Run-level glue: flat run configuration, checkpoint directories and the
steps behind each command-line verb.

A checkpoint directory holds ``run.json`` (configuration, normalisation
statistics, store path) next to ``denoiser.safetensors`` and, once trained,
``postprocess.safetensors`` and ``baseline.safetensors``. Training histories
go to ``history_<phase>.csv``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .data import (
    ConditioningConfig,
    NormalizationStats,
    SequenceDataset,
    Store,
    fit_normalization,
    from_hours,
    to_hours,
)
from .ensemble import EnsembleConfig, aggregate_mean, aggregate_postprocess, sample_ensemble
from .errors import ConfigError, GedError
from .evaluation import MODEL_KINDS, EvalReport, GEDPredictor, evaluate, evaluate_many, make_predictor
from .schedule import NoiseSchedule
from .train import (
    TrainConfig,
    baseline_spec,
    denoiser_spec,
    finetune,
    noise_mae,
    postprocess_spec,
    train_baseline_unet,
    train_diffusion,
    train_postprocess,
)
from .unet import UNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

RUN_FILE = "run.json"
DENOISER = "denoiser.safetensors"
POSTPROCESS = "postprocess.safetensors"
BASELINE = "baseline.safetensors"

_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


@dataclass
class RunConfig:
    """Every tunable of a run as one flat mapping.

    Training keys are those of :class:`~ged.train.TrainConfig`; prefixing one
    with ``postprocess_`` or ``baseline_`` overrides it for that network only
    (``postprocess_learning_rate``, ``baseline_epochs``, ...).
    """

    # data
    train_years: tuple = (2016, 2020)
    test_years: tuple = (2021, 2021)
    filter: str = "eu20"
    n_rain: int = 8
    wind: str = "components"
    n_wind: int = 2
    static: bool = True
    time: bool = False
    test_stride: int = 1
    # networks
    widths: tuple = (64, 128, 256, 384)
    blocks_per_level: int = 2
    # diffusion and ensemble
    min_signal_rate: float = 0.02
    max_signal_rate: float = 0.95
    schedule: str = "cosine"
    n_members: int = 15
    n_steps: int = 15
    # metrics
    rain_threshold: float = 0.0
    seed: int = 0
    train: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_years = tuple(self.train_years)
        self.test_years = tuple(self.test_years)
        self.widths = tuple(self.widths)
        if self.test_years[0] <= self.train_years[1] and self.train_years[0] <= self.test_years[1]:
            raise ConfigError(f"train years {self.train_years} overlap test years {self.test_years}")

    @classmethod
    def from_mapping(cls, d: dict) -> "RunConfig":
        own = {f.name for f in fields(cls)} - {"train", "overrides"}
        kw, train, overrides = {}, {}, {}
        for key, value in d.items():
            if key in own:
                kw[key] = value
            elif key in _TRAIN_FIELDS:
                train[key] = value
            elif key.startswith(("postprocess_", "baseline_")) and key.split("_", 1)[1] in _TRAIN_FIELDS:
                overrides[key] = value
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        cfg = cls(**kw, train=train, overrides=overrides)
        cfg.train_config()  # validate eagerly
        return cfg

    def to_mapping(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("train", "overrides")}
        out.update(self.train)
        out.update(self.overrides)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    def train_config(self, role: str = "diffusion") -> TrainConfig:
        kw = {"seed": self.seed, **self.train}
        if role in ("postprocess", "baseline"):
            prefix = role + "_"
            kw.update({k[len(prefix):]: v for k, v in self.overrides.items() if k.startswith(prefix)})
        return TrainConfig(**kw)

    @property
    def conditioning(self) -> ConditioningConfig:
        return ConditioningConfig(self.n_rain, self.wind, self.n_wind, self.static, self.time)

    @property
    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.min_signal_rate, self.max_signal_rate, self.schedule)

    def ensemble(self, n_members: int | None = None, aggregation: str = "mean") -> EnsembleConfig:
        return EnsembleConfig(n_members or self.n_members, self.n_steps, aggregation, self.seed,
                              self.noise_schedule)


def load_config(path=None, base: dict | None = None, **overrides) -> RunConfig:
    """Read a flat YAML or JSON file on top of ``base``; keyword overrides
    (``None`` meaning unset) win over both."""
    data = dict(base or {})
    if path is not None:
        text = Path(path).read_text()
        loaded = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text) or {}
        if not isinstance(loaded, dict) or any(isinstance(v, dict) for v in loaded.values()):
            raise ConfigError(f"{path}: expected a flat key-value mapping")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(data)


# --------------------------------------------------------------------------
# checkpoint directories


@dataclass
class Run:
    path: Path
    config: RunConfig
    store_path: Path
    stats: NormalizationStats

    @property
    def store(self) -> Store:
        return Store(self.store_path)

    def save(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        doc = {
            "config": self.config.to_mapping(),
            "store": str(self.store_path),
            "stats": self.stats.to_dict(),
        }
        (self.path / RUN_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @staticmethod
    def stored_config(path) -> dict:
        doc_path = Path(path) / RUN_FILE
        if not doc_path.exists():
            raise GedError(f"{path} is not a checkpoint directory (no {RUN_FILE})")
        return json.loads(doc_path.read_text())["config"]

    @classmethod
    def open(cls, path, config: RunConfig | None = None) -> "Run":
        path = Path(path)
        cfg = config or RunConfig.from_mapping(cls.stored_config(path))
        doc = json.loads((path / RUN_FILE).read_text())
        return cls(path, cfg, Path(doc["store"]), NormalizationStats.from_dict(doc["stats"]))

    def network(self, name: str) -> UNet:
        file = self.path / name
        if not file.exists():
            raise GedError(f"{file} not found; train it first")
        model, _ = load_checkpoint(file)
        return model

    def dataset(self, split: str, filter_level: str | None = None):
        years = self.config.train_years if split == "train" else self.config.test_years
        level = filter_level or self.config.filter
        return SequenceDataset(self.store, self.stats, years, level, self.config.conditioning)


# --------------------------------------------------------------------------
# verbs


def _save_history(run: Run, hist, phase: str) -> None:
    hist.to_csv(run.path / f"history_{phase}.csv")


def run_train_diffusion(store_path, out_dir, cfg: RunConfig) -> Run:
    store = Store(store_path)
    stats = fit_normalization(store, cfg.train_years)
    run = Run(Path(out_dir), cfg, Path(store_path).resolve(), stats)
    run.save()
    data = run.dataset("train").materialize()
    log.info("training on %d sequences", len(data))
    spec = denoiser_spec(cfg.conditioning.channel_count, store.domain.crop_size, cfg.widths,
                         blocks_per_level=cfg.blocks_per_level)
    model, hist = train_diffusion(data, cfg.train_config(), spec, cfg.noise_schedule)
    save_checkpoint(model, run.path / DENOISER, "denoiser", {"final_loss": hist.losses[-1]})
    _save_history(run, hist, "diffusion")
    return run


def run_finetune(checkpoint, cfg: RunConfig | None = None) -> dict:
    run = Run.open(checkpoint, cfg)
    model = run.network(DENOISER)
    data = run.dataset("train").materialize()
    before = noise_mae(model, data, run.config.noise_schedule)
    tuned, hist = finetune(model, data, run.config.train_config(), run.config.noise_schedule)
    after = noise_mae(tuned, data, run.config.noise_schedule)
    (run.path / DENOISER).rename(run.path / "denoiser_pre_finetune.safetensors")
    save_checkpoint(tuned, run.path / DENOISER, "denoiser", {"finetuned": True})
    _save_history(run, hist, "finetune")
    return {"noise_mae_before": before, "noise_mae_after": after}


def run_train_postprocess(checkpoint, cfg: RunConfig | None = None) -> Run:
    run = Run.open(checkpoint, cfg)
    den = run.network(DENOISER)
    data = run.dataset("train").materialize()
    ens = run.config.ensemble()
    spec = postprocess_spec(ens.n_members, den.spec.image_size, run.config.widths,
                            blocks_per_level=run.config.blocks_per_level)
    pp, hist = train_postprocess(den, data, run.config.train_config("postprocess"), ens, spec)
    save_checkpoint(pp, run.path / POSTPROCESS, "postprocess", {"n_members": ens.n_members})
    _save_history(run, hist, "postprocess")
    return run


def run_train_baseline(checkpoint, cfg: RunConfig | None = None) -> Run:
    run = Run.open(checkpoint, cfg)
    data = run.dataset("train").materialize()
    spec = baseline_spec(run.config.conditioning.channel_count, run.store.domain.crop_size,
                         run.config.widths, blocks_per_level=run.config.blocks_per_level)
    model, hist = train_baseline_unet(data, run.config.train_config("baseline"), spec)
    save_checkpoint(model, run.path / BASELINE, "baseline")
    _save_history(run, hist, "baseline")
    return run


def conditioning_at(run: Run, at) -> tuple[np.ndarray, np.ndarray | None]:
    """Conditioning stack for issue time ``at`` and, when stored, the
    three observed target frames (both normalised)."""
    store = run.store
    hour = int(to_hours(np.datetime64(at, "h")))
    pos = np.flatnonzero(store.hours == hour)
    if pos.size == 0:
        raise GedError(f"{at} is not in the store")
    cfg = run.config.conditioning
    ds = SequenceDataset(store, run.stats, (1900, 2200), "none", cfg)
    k = np.searchsorted(ds.anchors, pos[0])
    if k < len(ds) and ds.anchors[k] == pos[0]:
        s = ds.sample(int(k))
        return s.conditioning.to_array(), s.targets
    # too close to the end of the record for targets: history only
    i = int(pos[0])
    if i < cfg.n_rain - 1 or store.hours[i] - store.hours[i - cfg.n_rain + 1] != cfg.n_rain - 1:
        raise GedError(f"not enough contiguous history before {at}")
    return ds.stack_at(i).to_array(), None


def run_nowcast(checkpoint, at, out_dir, members: int | None = None, agg: str = "mean",
                cfg: RunConfig | None = None, plots: bool = True) -> dict:
    """Forecast the three hours after ``at``; writes ``forecast.npy``
    (``[H, W, 3]`` in metres), ``members.npy`` and one PNG per lead."""
    run = Run.open(checkpoint, cfg)
    ens = run.config.ensemble(members, agg)
    den = run.network(DENOISER)
    cond, truth = conditioning_at(run, at)
    if agg == "single":
        ens = EnsembleConfig(1, ens.n_steps, agg, ens.seed, ens.schedule)
    ms = sample_ensemble(den, cond, ens)
    if agg == "postprocess":
        pp = run.network(POSTPROCESS)
        forecast = aggregate_postprocess(ms, pp)
    elif agg == "mean":
        forecast = aggregate_mean(ms)
    else:
        forecast = ms.members[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scale = run.stats.train_max
    np.save(out / "forecast.npy", (forecast * scale).astype(np.float32))
    np.save(out / "members.npy", (ms.members * scale).astype(np.float32))
    files = {"forecast": out / "forecast.npy", "members": out / "members.npy", "plots": []}
    if truth is not None:
        np.save(out / "observed.npy", (truth * scale).astype(np.float32))
        files["observed"] = out / "observed.npy"
    if plots:
        files["plots"] = _plot_leads(forecast * scale, truth * scale if truth is not None else None, at, out)
    return files


def _plot_leads(forecast, truth, at, out: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    vmax = float(max(forecast.max(), truth.max() if truth is not None else 0.0, 1e-9))
    for h in range(forecast.shape[-1]):
        ncols = 2 if truth is not None else 1
        fig, axes = plt.subplots(1, ncols, figsize=(4 * ncols, 3.6), squeeze=False)
        panels = [("forecast", forecast[..., h])] + ([("observed", truth[..., h])] if truth is not None else [])
        for ax, (title, img) in zip(axes[0], panels):
            im = ax.imshow(img * 1000.0, vmin=0, vmax=vmax * 1000.0, cmap="Blues")
            ax.set_title(f"{title} +{h + 1} h")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(im, ax=axes[0].tolist(), label="mm / h")
        fig.suptitle(f"issued {np.datetime64(at, 'h')}")
        path = out / f"forecast_lead{h + 1}.png"
        fig.savefig(path, dpi=90)
        plt.close(fig)
        paths.append(path)
    return paths


def run_evaluate(checkpoint, out_dir, models=("single", "mean", "persistence"),
                 cfg: RunConfig | None = None, filter_level: str | None = None,
                 rain_threshold: float | None = None) -> dict:
    """Score the requested models on the test split; writes one
    ``eval_<model>.npz`` per model for :func:`load_report`."""
    run = Run.open(checkpoint, cfg)
    unknown = set(models) - set(MODEL_KINDS)
    if unknown:
        raise ConfigError(f"unknown models {sorted(unknown)}; choose from {MODEL_KINDS}")
    level = filter_level or run.config.filter
    thr = run.config.rain_threshold if rain_threshold is None else rain_threshold
    test = run.dataset("test", level).materialize()
    if run.config.test_stride > 1:
        test = test.subset(np.arange(0, len(test), run.config.test_stride))
    reports: dict[str, EvalReport] = {}
    ged_kinds = [m for m in models if m in ("single", "mean", "postprocess")]
    if ged_kinds:
        pp = run.network(POSTPROCESS) if "postprocess" in ged_kinds else None
        got = evaluate_many(GEDPredictor(run.network(DENOISER), run.config.ensemble(), pp),
                            test, run.stats, level, thr)
        reports.update({k: got[k] for k in ged_kinds})
    for kind in ("persistence", "baseline"):
        if kind in models:
            base = run.network(BASELINE) if kind == "baseline" else None
            reports[kind] = evaluate(make_predictor(kind, baseline=base, rain_channel=run.config.n_rain - 1),
                                     test, run.stats, kind, level, thr)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        save_report(rep, out / f"eval_{name}.npz")
    return reports


def save_report(rep: EvalReport, path) -> None:
    np.savez(
        path,
        model=rep.model, dataset=rep.dataset, threshold=rep.threshold, train_max=rep.train_max,
        per_sample_mse=rep.per_sample_mse, counts=rep.counts,
        timestamps=to_hours(rep.timestamps), n_lead=rep.n_lead,
    )


def load_report(path) -> EvalReport:
    with np.load(path, allow_pickle=False) as z:
        return EvalReport(
            model=str(z["model"]), dataset=str(z["dataset"]), threshold=float(z["threshold"]),
            train_max=float(z["train_max"]), per_sample_mse=z["per_sample_mse"], counts=z["counts"],
            timestamps=from_hours(z["timestamps"]), n_lead=int(z["n_lead"]),
        )


def summary_lines(reports) -> list[str]:
    lines = []
    for name, rep in reports.items():
        cells = "  ".join(f"{lead}h {s['mse']:.3e}" for lead, s in rep.leads.items())
        lines.append(f"{name:<12} n={rep.n:<5} {cells}")
    return lines


__all__ = [
    "RunConfig",
    "Run",
    "load_config",
    "run_train_diffusion",
    "run_finetune",
    "run_train_postprocess",
    "run_train_baseline",
    "run_nowcast",
    "run_evaluate",
    "conditioning_at",
    "save_report",
    "load_report",
    "summary_lines",
]
