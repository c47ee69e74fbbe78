"""Test-set evaluation: per-lead and per-month scores on denormalised fields,
plus CSV/JSON/PNG rendering."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import NormalizationStats
from .ensemble import EnsembleConfig, aggregate_mean, postprocess_batch, sample_ensembles, stack_members
from .errors import ConfigError, GedError, ShapeError
from .metrics import BinaryMetrics, confusion_counts, predict_persistence
from .unet import UNet

__all__ = [
    "EvalReport",
    "evaluate",
    "evaluate_many",
    "make_predictor",
    "GEDPredictor",
    "render_report",
    "MODEL_KINDS",
]

MODEL_KINDS = ("baseline", "single", "mean", "postprocess", "persistence")


@dataclass
class EvalReport:
    """Scores of one model on one test set.

    ``per_sample_mse[i, h]`` is the denormalised MSE of sample ``i`` at lead
    ``h + 1``; ``counts[i, h]`` its ``(tp, fp, tn, fn)``.
    """

    model: str
    dataset: str
    threshold: float
    train_max: float
    per_sample_mse: np.ndarray
    counts: np.ndarray
    timestamps: np.ndarray
    n_lead: int = 3

    @property
    def n(self) -> int:
        return int(self.per_sample_mse.shape[0])

    @property
    def months(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[M]").astype(int) % 12 + 1

    def _scores(self, rows) -> dict:
        out = {}
        for h in range(self.n_lead):
            c = self.counts[rows, h].sum(axis=0)
            out[h + 1] = {
                "n": int(np.count_nonzero(rows) if rows.dtype == bool else len(rows)),
                "mse": float(np.mean(self.per_sample_mse[rows, h])),
                "metrics": BinaryMetrics.from_counts(*c, threshold=self.threshold),
            }
        return out

    @property
    def leads(self) -> dict:
        """``{lead: {"n", "mse", "metrics"}}`` over the whole test set."""
        return self._scores(np.ones(self.n, dtype=bool))

    def monthly(self) -> dict:
        """``{(month, lead): {"n", "mse", "metrics"}}`` for months present."""
        out = {}
        months = self.months
        for m in np.unique(months):
            for lead, s in self._scores(months == m).items():
                out[(int(m), lead)] = s
        return out

    def per_image_rates(self) -> dict:
        """Accuracy/precision/recall averaged over images instead of pixels;
        images with an undefined rate are left out of that average."""
        out = {}
        for h in range(self.n_lead):
            tp, fp, tn, fn = (self.counts[:, h, k].astype(float) for k in range(4))
            with np.errstate(invalid="ignore", divide="ignore"):
                acc = (tp + tn) / (tp + fp + tn + fn)
                prec = np.where(tp + fp > 0, tp / (tp + fp), np.nan)
                rec = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
            out[h + 1] = {
                "accuracy": float(np.nanmean(acc)),
                "precision": float(np.nanmean(prec)) if np.isfinite(prec).any() else None,
                "recall": float(np.nanmean(rec)) if np.isfinite(rec).any() else None,
            }
        return out


class _Accumulator:
    def __init__(self, stats: NormalizationStats, threshold: float, n_lead: int):
        self.stats = stats
        self.threshold = threshold
        self.n_lead = n_lead
        self.mse: list[np.ndarray] = []
        self.counts: list[np.ndarray] = []

    def update(self, preds, targets) -> None:
        preds = np.asarray(preds, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if preds.shape != targets.shape:
            raise ShapeError(f"predictions {preds.shape} vs targets {targets.shape}")
        y = self.stats.denormalize_precip(targets)
        yhat = self.stats.denormalize_precip(preds)
        d = y - yhat
        self.mse.append(np.mean(d * d, axis=(1, 2)))
        counts = confusion_counts(y, yhat, self.threshold, axis=(1, 2))
        self.counts.append(np.stack(counts, axis=-1).astype(np.int64))

    def report(self, model, dataset, timestamps) -> EvalReport:
        return EvalReport(
            model=model,
            dataset=dataset,
            threshold=self.threshold,
            train_max=self.stats.train_max,
            per_sample_mse=np.concatenate(self.mse),
            counts=np.concatenate(self.counts),
            timestamps=np.asarray(timestamps, dtype="datetime64[h]"),
            n_lead=self.n_lead,
        )


def _timestamps(testset) -> np.ndarray:
    ts = getattr(testset, "timestamps", None)
    if ts is None:
        return np.zeros(len(testset), dtype="datetime64[h]")
    return np.asarray(ts, dtype="datetime64[h]")


def evaluate_many(predictor, testset, stats: NormalizationStats, dataset: str = "none",
                  threshold: float = 0.0, batch: int = 16) -> dict:
    """Run a predictor returning ``{model_label: predictions}`` per batch.

    Predictions and targets are in normalised units; scores are computed
    after multiplying both by ``stats.train_max``.
    """
    n = len(testset)
    if n == 0:
        raise GedError("empty test set")
    accs: dict[str, _Accumulator] = {}
    for start in range(0, n, batch):
        idx = np.arange(start, min(start + batch, n))
        cond, targets = testset.arrays(idx)
        outputs = predictor(cond)
        for label, preds in outputs.items():
            acc = accs.setdefault(label, _Accumulator(stats, threshold, targets.shape[-1]))
            acc.update(preds, targets)
    ts = _timestamps(testset)
    return {label: acc.report(label, dataset, ts) for label, acc in accs.items()}


def evaluate(predictor, testset, stats: NormalizationStats, model: str = "model",
             dataset: str = "none", threshold: float = 0.0, batch: int = 16) -> EvalReport:
    """Score a predictor ``cond_batch -> predictions`` on every test sample."""
    reports = evaluate_many(lambda c: {model: predictor(c)}, testset, stats, dataset, threshold, batch)
    return reports[model]


class GEDPredictor:
    """Ensemble forecasts for a batch, returned under all aggregation labels.

    ``single`` is the first member, ``mean`` the member average and
    ``postprocess`` (when a post-processor is given) the fused output. All
    outputs are clipped at zero.
    """

    def __init__(self, denoiser: UNet, cfg: EnsembleConfig = EnsembleConfig(), pp: UNet | None = None):
        self.denoiser = denoiser
        self.cfg = cfg
        self.pp = pp

    def members(self, cond) -> np.ndarray:
        return sample_ensembles(self.denoiser, cond, self.cfg)

    def __call__(self, cond) -> dict:
        members = self.members(cond)
        out = {"single": members[:, 0], "mean": members.mean(axis=1)}
        if self.pp is not None:
            out["postprocess"] = np.clip(postprocess_batch(self.pp, stack_members(members)), 0, None)
        return out


def make_predictor(kind: str, denoiser: UNet | None = None, pp: UNet | None = None,
                   baseline: UNet | None = None, ens: EnsembleConfig = EnsembleConfig(),
                   rain_channel: int = 7):
    """Callable ``cond_batch -> predictions [B, H, W, 3]`` for one model kind."""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    if kind == "persistence":
        return lambda cond: predict_persistence(cond, rain_channel=rain_channel)
    if kind == "baseline":
        if baseline is None:
            raise ConfigError("baseline evaluation needs a trained baseline network")

        @torch.no_grad()
        def run(cond):
            baseline.eval()
            dtype = next(baseline.parameters()).dtype
            x = torch.as_tensor(np.asarray(cond), dtype=dtype).permute(0, 3, 1, 2)
            return np.clip(baseline(x).permute(0, 2, 3, 1).numpy(), 0, None)

        return run
    if denoiser is None:
        raise ConfigError(f"{kind} evaluation needs a trained denoiser")
    if kind == "postprocess" and pp is None:
        raise ConfigError("postprocess evaluation needs a trained post-processor")
    ged = GEDPredictor(denoiser, ens, pp if kind == "postprocess" else None)
    return lambda cond: ged(cond)[kind]


# --------------------------------------------------------------------------
# rendering

CSV_FIELDS = ["model", "dataset", "lead", "month", "n", "mse", "accuracy", "precision",
              "recall", "tp", "fp", "tn", "fn"]


def _row(report: EvalReport, lead: int, month, s: dict) -> dict:
    m = s["metrics"].to_dict()
    return {
        "model": report.model, "dataset": report.dataset, "lead": lead, "month": month,
        "n": s["n"], "mse": repr(s["mse"]),
        "accuracy": "" if m["accuracy"] is None else repr(m["accuracy"]),
        "precision": "" if m["precision"] is None else repr(m["precision"]),
        "recall": "" if m["recall"] is None else repr(m["recall"]),
        "tp": m["tp"], "fp": m["fp"], "tn": m["tn"], "fn": m["fn"],
    }


def render_report(reports, out_dir) -> dict:
    """Write ``report.csv`` (model x lead x month rows), ``summary.json`` and
    one ``monthly_mse_lead{h}.png`` per lead hour. Returns the file paths."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    elif isinstance(reports, dict):
        reports = list(reports.values())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in reports:
            for (month, lead), s in sorted(r.monthly().items(), key=lambda kv: (kv[0][1], kv[0][0])):
                w.writerow(_row(r, lead, month, s))

    summary = {}
    for r in reports:
        summary[r.model] = {
            "dataset": r.dataset,
            "n": r.n,
            "threshold": r.threshold,
            "train_max": r.train_max,
            "leads": {
                str(lead): {"mse": s["mse"], **s["metrics"].to_dict()} for lead, s in r.leads.items()
            },
            "per_image": {str(k): v for k, v in r.per_image_rates().items()},
        }
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plots = []
    n_lead = max(r.n_lead for r in reports)
    for lead in range(1, n_lead + 1):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for r in reports:
            monthly = r.monthly()
            months = sorted(m for (m, h) in monthly if h == lead)
            ax.plot(months, [monthly[(m, lead)]["mse"] for m in months], marker="o", label=r.model)
        ax.set_xlabel("month")
        ax.set_ylabel("MSE")
        ax.set_title(f"{lead} h ahead")
        ax.set_xticks(range(1, 13))
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = out / f"monthly_mse_lead{lead}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        plots.append(path)
    return {"csv": csv_path, "json": json_path, "plots": plots}
