"""Gridded weather store, normalisation, rain-fraction selection and
conditioning/target sequence assembly.

A store is a directory holding ``manifest.json`` plus one ``.npy`` array per
variable. Time-dependent arrays are time-major ``[T, H, W]`` on the full
selection window; static maps are ``[H, W]``. Time is kept as integer hours
since the unix epoch in ``time.npy``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataGapError, GedError, ShapeError

log = logging.getLogger(__name__)

__all__ = [
    "GridDomain",
    "Store",
    "NormalizationStats",
    "ConditioningConfig",
    "ConditioningStack",
    "SequenceSample",
    "SequenceDataset",
    "FILTER_THRESHOLDS",
    "ingest",
    "load_source",
    "compute_wind_speed",
    "fit_normalization",
    "rain_fraction",
    "make_sequences",
    "encode_timestamp",
    "to_hours",
    "from_hours",
]

STORE_FORMAT = "ged-store/1"
KNOWN_VARIABLES = {
    "tp": {"units": "m", "static": False},
    "u100": {"units": "m s-1", "static": False},
    "v100": {"units": "m s-1", "static": False},
    "lsm": {"units": "1", "static": True},
    "geopot": {"units": "m2 s-2", "static": True},
}
ALIASES = {
    "total_precipitation": "tp",
    "u": "u100",
    "v": "v100",
    "100m_u_component_of_wind": "u100",
    "100m_v_component_of_wind": "v100",
    "land_sea_mask": "lsm",
    "z": "geopot",
    "geopotential": "geopot",
}
FILTER_THRESHOLDS = {"none": 0.0, "eu20": 0.2, "eu50": 0.5}
TRAIN_YEARS = (2016, 2020)
TEST_YEARS = (2021, 2021)


def to_hours(ts) -> np.ndarray:
    """Datetime-like (scalar or array) to integer hours since the epoch."""
    return np.asarray(ts, dtype="datetime64[h]").astype(np.int64)


def from_hours(hours) -> np.ndarray:
    return np.asarray(hours, dtype=np.int64).astype("datetime64[h]")


def _year_month_day_hour(hours):
    t = from_hours(hours)
    years = t.astype("datetime64[Y]").astype(int) + 1970
    months = t.astype("datetime64[M]").astype(int) % 12 + 1
    days = (t.astype("datetime64[D]") - t.astype("datetime64[M]")).astype(int) + 1
    hrs = (t - t.astype("datetime64[D]")).astype(int)
    return years, months, days, hrs


@dataclass(frozen=True)
class GridDomain:
    lat_range: tuple = (-12.0, 12.0)
    lon_range: tuple = (36.0, 60.0)
    full_size: tuple = (105, 173)
    crop_size: tuple = (96, 96)
    cell_km: float = 31.0

    def __post_init__(self):
        for name in ("lat_range", "lon_range", "full_size", "crop_size"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if any(c > f for c, f in zip(self.crop_size, self.full_size)):
            raise ConfigError(f"crop {self.crop_size} does not fit in {self.full_size}")

    def crop_slices(self) -> tuple[slice, slice]:
        """Centred crop of the selection window."""
        top = (self.full_size[0] - self.crop_size[0]) // 2
        left = (self.full_size[1] - self.crop_size[1]) // 2
        return (
            slice(top, top + self.crop_size[0]),
            slice(left, left + self.crop_size[1]),
        )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# --------------------------------------------------------------------------
# store


class Store:
    """Read access to an ingested store directory."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path / "manifest.json") as f:
            self.manifest = json.load(f)
        if self.manifest.get("format") != STORE_FORMAT:
            raise GedError(f"{self.path} is not a {STORE_FORMAT} store")
        self.domain = GridDomain(**self.manifest["grid"])
        self.hours = np.load(self.path / "time.npy")
        self._cache: dict[str, np.ndarray] = {}

    @property
    def variables(self) -> list[str]:
        return list(self.manifest["variables"])

    @property
    def times(self) -> np.ndarray:
        return from_hours(self.hours)

    def __contains__(self, name: str) -> bool:
        return name in self.manifest["variables"]

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self._cache:
            if name not in self:
                raise KeyError(f"variable {name!r} not in store {self.path}")
            entry = self.manifest["variables"][name]
            self._cache[name] = np.load(self.path / entry["file"], mmap_mode="r")
        return self._cache[name]

    def year_indices(self, years: tuple[int, int]) -> np.ndarray:
        """Positions in the time axis falling in the inclusive year range."""
        y, _, _, _ = _year_month_day_hour(self.hours)
        return np.flatnonzero((y >= years[0]) & (y <= years[1]))

    def checksum(self) -> str:
        return hashlib.sha256((self.path / "manifest.json").read_bytes()).hexdigest()

    @property
    def stats(self) -> "NormalizationStats | None":
        s = self.manifest.get("stats")
        return NormalizationStats.from_dict(s) if s else None

    def save_stats(self, stats: "NormalizationStats") -> None:
        self.manifest["stats"] = stats.to_dict()
        _write_json(self.path / "manifest.json", self.manifest)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def load_source(path) -> dict:
    """Read one source file into ``{"time": ..., <variable>: array}``.

    ``.npz`` archives are read directly. ``.nc``/``.h5`` files are opened as
    HDF5 (NetCDF-4) and expect a ``time`` variable whose ``units`` attribute
    reads ``"hours since <ISO date>"``.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    if path.suffix in (".nc", ".h5", ".hdf5"):
        import h5py

        out = {}
        with h5py.File(path, "r") as f:
            t = f["time"]
            units = t.attrs.get("units", b"")
            units = units.decode() if isinstance(units, bytes) else str(units)
            if not units.startswith("hours since"):
                raise ConfigError(f"{path}: unsupported time units {units!r}")
            origin = np.datetime64(units.split("since", 1)[1].strip().replace(" ", "T")[:13], "h")
            out["time"] = origin + t[()].astype(np.int64)
            for k in f.keys():
                if k in ("time", "latitude", "longitude", "lat", "lon"):
                    continue
                out[k] = f[k][()]
        return out
    raise ConfigError(f"unsupported source format {path.suffix!r}")


def ingest(sources, out_dir, domain: GridDomain = GridDomain(), allow_gaps: bool = False) -> Store:
    """Merge hourly sources into a canonical store at ``out_dir``.

    ``sources`` is a sequence of file paths (see :func:`load_source`) or of
    already-loaded mappings. Missing hours raise :class:`DataGapError` unless
    ``allow_gaps``; re-ingesting identical inputs reproduces the manifest
    byte for byte.
    """
    if isinstance(sources, (str, Path, Mapping)):
        sources = [sources]
    loaded = [load_source(s) if not isinstance(s, Mapping) else dict(s) for s in sources]
    if not loaded:
        raise ConfigError("no sources given")

    times = []
    dynamic: dict[str, list] = {}
    static: dict[str, np.ndarray] = {}
    for src in loaded:
        if "time" not in src:
            raise ConfigError("source has no 'time' entry")
        t = to_hours(src["time"]).reshape(-1)
        times.append(t)
        for raw_name, arr in src.items():
            if raw_name == "time":
                continue
            name = ALIASES.get(raw_name, raw_name)
            if name not in KNOWN_VARIABLES:
                raise ConfigError(f"unknown variable {raw_name!r}")
            arr = np.asarray(arr, dtype=np.float32)
            if KNOWN_VARIABLES[name]["static"]:
                if arr.ndim == 3:
                    arr = arr[0]
                static[name] = arr
            else:
                if arr.ndim != 3 or arr.shape[0] != t.size:
                    raise ShapeError(f"{name}: expected [{t.size}, H, W], got {arr.shape}")
                dynamic.setdefault(name, []).append(arr)
    if "tp" not in dynamic:
        raise ConfigError("total precipitation 'tp' is required")

    hours = np.concatenate(times)
    order = np.argsort(hours, kind="stable")
    hours = hours[order]
    keep = np.ones(hours.size, dtype=bool)
    keep[1:] = hours[1:] != hours[:-1]
    arrays = {}
    for name, parts in dynamic.items():
        if sum(p.shape[0] for p in parts) != order.size:
            raise ShapeError(f"variable {name} missing from some sources")
        arrays[name] = np.concatenate(parts)[order][keep]
    hours = hours[keep]

    for name, arr in list(arrays.items()) + list(static.items()):
        if tuple(arr.shape[-2:]) != tuple(domain.full_size):
            raise ShapeError(f"{name}: grid {arr.shape[-2:]} != domain {domain.full_size}")
        if not np.all(np.isfinite(arr)):
            raise GedError(f"{name} contains non-finite values")

    expected = np.arange(hours[0], hours[-1] + 1)
    missing = np.setdiff1d(expected, hours)
    if missing.size and not allow_gaps:
        listing = ", ".join(str(m) for m in from_hours(missing[:20]))
        raise DataGapError(f"{missing.size} missing hour(s): {listing}", from_hours(missing))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "time.npy", hours)
    variables = {}
    for name, arr in sorted({**arrays, **static}.items()):
        np.save(out / f"{name}.npy", arr)
        variables[name] = {
            "file": f"{name}.npy",
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "static": KNOWN_VARIABLES[name]["static"],
            "units": KNOWN_VARIABLES[name]["units"],
            "sha256": _sha256(arr),
        }
    manifest = {
        "format": STORE_FORMAT,
        "grid": domain.to_dict(),
        "time": {
            "start": str(from_hours(hours[0])),
            "end": str(from_hours(hours[-1])),
            "count": int(hours.size),
            "sha256": _sha256(hours),
        },
        "gaps": [str(m) for m in from_hours(missing)],
        "variables": variables,
        "stats": None,
    }
    _write_json(out / "manifest.json", manifest)
    return Store(out)


# --------------------------------------------------------------------------
# features and normalisation


def compute_wind_speed(u, v):
    """Wind speed from eastward and northward components."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ShapeError(f"u {u.shape} vs v {v.shape}")
    return np.sqrt(u * u + v * v)


@dataclass
class NormalizationStats:
    """``train_max`` scales precipitation; other features are min-max scaled."""

    train_max: float
    feature_min: dict = field(default_factory=dict)
    feature_max: dict = field(default_factory=dict)
    train_years: tuple = TRAIN_YEARS

    def normalize_precip(self, x):
        return x / self.train_max

    def denormalize_precip(self, x):
        return x * self.train_max

    def scale_feature(self, name: str, x):
        lo, hi = self.feature_min[name], self.feature_max[name]
        if hi <= lo:
            return np.zeros_like(x, dtype=np.float32)
        return (x - lo) / (hi - lo)

    def to_dict(self) -> dict:
        return {
            "train_max": float(self.train_max),
            "feature_min": {k: float(v) for k, v in self.feature_min.items()},
            "feature_max": {k: float(v) for k, v in self.feature_max.items()},
            "train_years": list(self.train_years),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            train_max=d["train_max"],
            feature_min=dict(d.get("feature_min", {})),
            feature_max=dict(d.get("feature_max", {})),
            train_years=tuple(d.get("train_years", TRAIN_YEARS)),
        )


def _chunked_minmax(arr, idx: np.ndarray, chunk: int = 512, fn=None):
    lo, hi = np.inf, -np.inf
    for start in range(0, idx.size, chunk):
        block = np.asarray(arr[idx[start : start + chunk]], dtype=np.float64)
        if fn is not None:
            block = fn(block, start)
        lo = min(lo, float(block.min()))
        hi = max(hi, float(block.max()))
    return lo, hi


def fit_normalization(store: Store, train_years: tuple = TRAIN_YEARS) -> NormalizationStats:
    """Fit scaling statistics on the training years only."""
    idx = store.year_indices(train_years)
    if idx.size == 0:
        raise GedError(f"no training hours in years {train_years}")
    # idx is sorted; memmap fancy indexing reads only the requested frames
    _, train_max = _chunked_minmax(store["tp"], idx)
    if not train_max > 0:
        raise GedError("training precipitation is identically zero")

    fmin, fmax = {}, {}
    for name in ("u100", "v100"):
        if name in store:
            fmin[name], fmax[name] = _chunked_minmax(store[name], idx)
    if "u100" in store and "v100" in store:
        u, v = store["u100"], store["v100"]

        def speed(block, start):
            vb = np.asarray(v[idx[start : start + block.shape[0]]], dtype=np.float64)
            return compute_wind_speed(block, vb)

        fmin["wind_speed"], fmax["wind_speed"] = _chunked_minmax(u, idx, fn=speed)
    for name in ("lsm", "geopot"):
        if name in store:
            arr = np.asarray(store[name], dtype=np.float64)
            fmin[name], fmax[name] = float(arr.min()), float(arr.max())
    return NormalizationStats(float(train_max), fmin, fmax, tuple(train_years))


def rain_fraction(window) -> float:
    """Fraction of strictly positive pixels."""
    window = np.asarray(window)
    return float(np.count_nonzero(window > 0)) / window.size


def encode_timestamp(ts, size: tuple = (96, 96)) -> np.ndarray:
    """One-channel time tile from month, day and hour.

    The value is the mean of ``sin(2 pi month/12)``, ``sin(2 pi day/31)`` and
    ``sin(2 pi hour/24)``, mapped from ``[-1, 1]`` to ``[0, 1]``. The year is
    ignored.
    """
    _, m, d, h = _year_month_day_hour(to_hours(ts))
    s = (np.sin(2 * np.pi * m / 12) + np.sin(2 * np.pi * d / 31) + np.sin(2 * np.pi * h / 24)) / 3
    value = float((s + 1.0) / 2.0)
    return np.full(size, value, dtype=np.float32)


# --------------------------------------------------------------------------
# conditioning and sequences


@dataclass(frozen=True)
class ConditioningConfig:
    """Which past-weather channels feed the networks.

    ``wind`` is ``"components"`` (u and v per frame), ``"speed"`` or
    ``"none"``. The default yields 8 + 4 + 1 + 1 = 14 channels.
    """

    n_rain: int = 8
    wind: str = "components"
    n_wind: int = 2
    static: bool = True
    time: bool = False

    def __post_init__(self):
        if self.n_rain < 1:
            raise ConfigError("need at least one rain history frame")
        if self.wind not in ("components", "speed", "none"):
            raise ConfigError(f"unknown wind mode {self.wind!r}")
        if self.n_wind > self.n_rain:
            raise ConfigError("wind history longer than rain history")

    @property
    def wind_channels(self) -> int:
        return {"components": 2 * self.n_wind, "speed": self.n_wind, "none": 0}[self.wind]

    @property
    def channel_count(self) -> int:
        return self.n_rain + self.wind_channels + 2 * int(self.static) + int(self.time)


@dataclass
class ConditioningStack:
    """Past weather for one forecast, all frames ``[H, W]`` in ``[0, 1]``
    (rain may exceed 1 on test years).

    Wind frames are ordered ``u_-1, u_0, v_-1, v_0`` for components.
    """

    rain_history: np.ndarray
    wind: np.ndarray | None = None
    lsm: np.ndarray | None = None
    geopot: np.ndarray | None = None
    time_tile: np.ndarray | None = None

    @property
    def channel_count(self) -> int:
        return self.to_array().shape[-1]

    @property
    def last_rain(self) -> np.ndarray:
        return self.rain_history[-1]

    def to_array(self) -> np.ndarray:
        frames = list(self.rain_history)
        if self.wind is not None:
            frames.extend(self.wind)
        for extra in (self.lsm, self.geopot, self.time_tile):
            if extra is not None:
                frames.append(extra)
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ShapeError(f"conditioning frames disagree in shape: {shapes}")
        return np.stack(frames, axis=-1).astype(np.float32, copy=False)

    @classmethod
    def from_array(cls, arr: np.ndarray, cfg: ConditioningConfig) -> "ConditioningStack":
        arr = np.asarray(arr)
        if arr.shape[-1] != cfg.channel_count:
            raise ShapeError(f"{arr.shape[-1]} channels, config expects {cfg.channel_count}")
        ch = np.moveaxis(arr, -1, 0)
        k = cfg.n_rain
        rain = ch[:k]
        wind = ch[k : k + cfg.wind_channels] if cfg.wind_channels else None
        k += cfg.wind_channels
        lsm = geopot = time_tile = None
        if cfg.static:
            lsm, geopot = ch[k], ch[k + 1]
            k += 2
        if cfg.time:
            time_tile = ch[k]
        return cls(rain, wind, lsm, geopot, time_tile)


@dataclass
class SequenceSample:
    conditioning: ConditioningStack
    targets: np.ndarray  # [H, W, 3], normalized
    timestamp: np.datetime64  # forecast issue time (hour of r_0)
    rain_fraction: float


@dataclass
class SelectionReport:
    candidates: int = 0
    skipped_gaps: int = 0
    skipped_split: int = 0
    filtered_out: int = 0
    selected: int = 0


class SequenceDataset:
    """Index of all valid samples in a store for one split and filter level.

    A sample anchored at time position ``i`` uses rain frames
    ``i-n_rain+1 .. i`` and targets ``i+1 .. i+n_lead``; it is kept when all
    those hours are contiguous, inside ``years`` and the selection window of
    the first target frame has at least the filter's rain fraction.
    """

    def __init__(
        self,
        store: Store,
        stats: NormalizationStats,
        years: tuple = TRAIN_YEARS,
        filter_level: str = "none",
        cond: ConditioningConfig = ConditioningConfig(),
        n_lead: int = 3,
    ):
        if filter_level not in FILTER_THRESHOLDS:
            raise ConfigError(f"unknown filter level {filter_level!r}")
        self.store = store
        self.stats = stats
        self.years = tuple(years)
        self.filter_level = filter_level
        self.cond = cond
        self.n_lead = n_lead
        self.domain = store.domain
        self._rows, self._cols = self.domain.crop_slices()
        self._static = self._static_frames()

        hours = store.hours
        span = cond.n_rain - 1 + n_lead
        n = hours.size
        report = SelectionReport()
        anchors = np.arange(cond.n_rain - 1, n - n_lead)
        report.candidates = anchors.size
        if anchors.size:
            contiguous = hours[anchors + n_lead] - hours[anchors - cond.n_rain + 1] == span
            report.skipped_gaps = int((~contiguous).sum())
            anchors = anchors[contiguous]
            y, _, _, _ = _year_month_day_hour(hours)
            first = anchors - cond.n_rain + 1
            last = anchors + n_lead
            in_split = (y[first] >= self.years[0]) & (y[last] <= self.years[1])
            report.skipped_split = int((~in_split).sum())
            anchors = anchors[in_split]
        fractions = self.frame_rain_fractions(store)
        threshold = FILTER_THRESHOLDS[filter_level]
        if anchors.size:
            ok = fractions[anchors + 1] >= threshold
            report.filtered_out = int((~ok).sum())
            anchors = anchors[ok]
        report.selected = int(anchors.size)
        self.anchors = anchors
        self.fractions = fractions[anchors + 1] if anchors.size else np.zeros(0)
        self.report = report

    @staticmethod
    def frame_rain_fractions(store: Store, chunk: int = 1024) -> np.ndarray:
        """Rain fraction of the full selection window for every stored hour."""
        cache = getattr(store, "_fraction_cache", None)
        if cache is not None:
            return cache
        tp = store["tp"]
        out = np.empty(tp.shape[0])
        size = tp.shape[1] * tp.shape[2]
        for s in range(0, tp.shape[0], chunk):
            block = np.asarray(tp[s : s + chunk])
            out[s : s + chunk] = np.count_nonzero(block > 0, axis=(1, 2)) / size
        store._fraction_cache = out
        return out

    def _crop(self, arr):
        return arr[..., self._rows, self._cols]

    def _static_frames(self) -> dict:
        out = {}
        if self.cond.static:
            for name in ("lsm", "geopot"):
                if name not in self.store:
                    raise ConfigError(f"static map {name!r} missing from store")
                frame = self._crop(np.asarray(self.store[name], dtype=np.float64))
                out[name] = self.stats.scale_feature(name, frame).astype(np.float32)
        return out

    def __len__(self) -> int:
        return int(self.anchors.size)

    @property
    def timestamps(self) -> np.ndarray:
        return from_hours(self.store.hours[self.anchors])

    def _wind_frames(self, i: int) -> np.ndarray | None:
        cfg = self.cond
        if cfg.wind == "none":
            return None
        sl = slice(i - cfg.n_wind + 1, i + 1)
        u = self._crop(np.asarray(self.store["u100"][sl], dtype=np.float64))
        v = self._crop(np.asarray(self.store["v100"][sl], dtype=np.float64))
        if cfg.wind == "components":
            frames = np.concatenate(
                [self.stats.scale_feature("u100", u), self.stats.scale_feature("v100", v)]
            )
        else:
            frames = self.stats.scale_feature("wind_speed", compute_wind_speed(u, v))
        return frames.astype(np.float32)

    def stack_at(self, i: int) -> ConditioningStack:
        """Conditioning for issue time at store position ``i`` (not checked
        against the selection)."""
        cfg = self.cond
        rain = self._crop(np.asarray(self.store["tp"][i - cfg.n_rain + 1 : i + 1], dtype=np.float64))
        ts = from_hours(self.store.hours[i])
        return ConditioningStack(
            rain_history=self.stats.normalize_precip(rain).astype(np.float32),
            wind=self._wind_frames(i),
            lsm=self._static.get("lsm"),
            geopot=self._static.get("geopot"),
            time_tile=encode_timestamp(ts, self.domain.crop_size) if cfg.time else None,
        )

    def sample(self, k: int) -> SequenceSample:
        i = int(self.anchors[k])
        tp = self.store["tp"]
        target = self._crop(np.asarray(tp[i + 1 : i + 1 + self.n_lead], dtype=np.float64))
        ts = from_hours(self.store.hours[i])
        stack = self.stack_at(i)
        targets = np.moveaxis(self.stats.normalize_precip(target), 0, -1).astype(np.float32)
        return SequenceSample(stack, targets, ts, float(self.fractions[k]))

    def __getitem__(self, k: int) -> SequenceSample:
        return self.sample(k)

    def __iter__(self) -> Iterator[SequenceSample]:
        for k in range(len(self)):
            yield self.sample(k)

    def arrays(self, indices: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(conditioning [B,H,W,C], targets [B,H,W,n_lead])``."""
        if indices is None:
            indices = range(len(self))
        samples = [self.sample(int(k)) for k in indices]
        if not samples:
            h, w = self.domain.crop_size
            return (
                np.zeros((0, h, w, self.cond.channel_count), np.float32),
                np.zeros((0, h, w, self.n_lead), np.float32),
            )
        cond = np.stack([s.conditioning.to_array() for s in samples])
        targets = np.stack([s.targets for s in samples])
        return cond, targets

    def materialize(self) -> "ArrayDataset":
        """Load every sample into memory."""
        cond, targets = self.arrays()
        return ArrayDataset(cond, targets, self.timestamps, self.cond)


class ArrayDataset:
    """In-memory samples with the same batch interface as :class:`SequenceDataset`."""

    def __init__(self, cond, targets, timestamps=None, cond_cfg: ConditioningConfig | None = None):
        self.cond = np.asarray(cond, dtype=np.float32)
        self.targets = np.asarray(targets, dtype=np.float32)
        if self.cond.shape[0] != self.targets.shape[0]:
            raise ShapeError("conditioning and targets differ in length")
        if timestamps is None:
            timestamps = np.zeros(self.cond.shape[0], dtype="datetime64[h]")
        self.timestamps = np.asarray(timestamps, dtype="datetime64[h]")
        self.cond_cfg = cond_cfg

    def __len__(self) -> int:
        return self.cond.shape[0]

    def arrays(self, indices=None):
        if indices is None:
            return self.cond, self.targets
        idx = np.asarray(indices, dtype=np.int64)
        return self.cond[idx], self.targets[idx]

    def subset(self, indices) -> "ArrayDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.cond[idx], self.targets[idx], self.timestamps[idx], self.cond_cfg)


def make_sequences(
    store: Store,
    filter_level: str = "none",
    stats: NormalizationStats | None = None,
    years: tuple = TRAIN_YEARS,
    cond: ConditioningConfig = ConditioningConfig(),
) -> Iterator[SequenceSample]:
    """Yield every selected sample for a split, in time order."""
    stats = stats or store.stats
    if stats is None:
        raise GedError("store has no fitted normalization statistics")
    ds = SequenceDataset(store, stats, years, filter_level, cond)
    log.info("sequence selection: %s", ds.report)
    return iter(ds)
