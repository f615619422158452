"""Experiment configuration: an INI file with one section per stage.

Example::

    [experiment]
    pipeline = cae_mle          ; pretrain | cae_mle | deep_ifl
    seeds = 0, 1, 2, 3, 4
    output_dir = usps_cae_mle   ; relative paths resolve under $CAEMLE_OUTPUT_ROOT
    workers = 1                 ; >1 runs seeds in parallel processes

    [dataset]
    kind = usps                 ; synthetic | mnist | idx | usps
    path = data/usps.bin
    limit = 0                   ; >0 keeps a seeded random subset of that size

    [cae]
    epochs = 200

    [clustering]
    n_clusters = 10
    gamma = 0.1
    init = ac                   ; ac | kmeans

    [ifl]
    r = 10

Every key of :class:`~caemle.cae.CaeConfig`, :class:`~caemle.clustering.ClusteringConfig`
and :class:`~caemle.ifl.IflConfig` may appear in its section; unknown keys are errors.
"""

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .cae import CaeConfig
from .clustering import ClusteringConfig
from .ifl import IflConfig

PIPELINES = ("pretrain", "cae_mle", "deep_ifl")
DATASET_KINDS = ("synthetic", "mnist", "idx", "usps")
OUTPUT_ROOT_ENV = "CAEMLE_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    path: str = None
    images: str = None
    labels: str = None
    limit: int = 0
    limit_seed: int = 0
    classes: int = 3
    per_class: int = 100
    image_size: int = 16
    sigma: float = 0.1
    data_seed: int = 0


@dataclass
class ExperimentConfig:
    pipeline: str = "cae_mle"
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    workers: int = 1
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    cae: dict = field(default_factory=dict)  # CaeConfig overrides (input_shape comes from the data)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    ifl: IflConfig = field(default_factory=IflConfig)
    source: str = None

    def cae_config(self, input_shape, seed):
        return CaeConfig(input_shape=input_shape, seed=seed, **self.cae)

    def output_path(self):
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self):
        return {
            "pipeline": self.pipeline, "seeds": list(self.seeds), "output_dir": self.output_dir,
            "workers": self.workers, "dataset": dataclasses.asdict(self.dataset),
            "cae": {k: list(v) if isinstance(v, tuple) else v for k, v in self.cae.items()},
            "clustering": dataclasses.asdict(self.clustering), "ifl": dataclasses.asdict(self.ifl),
        }


def _convert(section, key, raw, typ):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is tuple:
            return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None


def _field_types(cls):
    types = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        if f.name in ("input_shape", "filters", "kernels", "strides"):
            types[f.name] = tuple
        elif f.name in ("target_loss",):
            types[f.name] = float
        elif f.name in ("subsample",):
            types[f.name] = int
        elif f.name in ("path", "images", "labels"):
            types[f.name] = str
        elif default is None:
            types[f.name] = str
        else:
            types[f.name] = type(default)
    return types


def _section(parser, name, cls, exclude=()):
    if not parser.has_section(name):
        return {}
    types = _field_types(cls)
    out = {}
    for key, raw in parser.items(name):
        if key in exclude or key not in types:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        if raw.strip().lower() in ("", "none"):
            out[key] = None
            continue
        out[key] = _convert(name, key, raw, types[key])
    return out


def parse_config(text, source=None):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"experiment", "dataset", "cae", "clustering", "ifl"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")

    cfg = ExperimentConfig(source=source)
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "pipeline":
                cfg.pipeline = raw.strip()
            elif key == "seeds":
                try:
                    cfg.seeds = [int(v) for v in raw.split(",") if v.strip()]
                except ValueError:
                    raise ConfigError(f"[experiment] seeds: cannot parse {raw!r}") from None
            elif key == "output_dir":
                cfg.output_dir = raw.strip()
            elif key == "workers":
                cfg.workers = _convert("experiment", key, raw, int)
            else:
                raise ConfigError(f"[experiment] unknown key {key!r}")
    if cfg.pipeline not in PIPELINES:
        raise ConfigError(f"[experiment] pipeline: expected one of {PIPELINES}, got {cfg.pipeline!r}")
    if not cfg.seeds:
        raise ConfigError("[experiment] seeds: at least one seed is required")
    if cfg.workers < 1:
        raise ConfigError("[experiment] workers: must be >= 1")

    ds = _section(parser, "dataset", DatasetSpec)
    cfg.dataset = DatasetSpec(**{k: v for k, v in ds.items() if v is not None})
    if cfg.dataset.kind not in DATASET_KINDS:
        raise ConfigError(f"[dataset] kind: expected one of {DATASET_KINDS}, got {cfg.dataset.kind!r}")
    if cfg.dataset.kind in ("mnist", "usps") and not cfg.dataset.path:
        raise ConfigError("[dataset] path: required for mnist/usps datasets")
    if cfg.dataset.kind == "idx" and not cfg.dataset.images:
        raise ConfigError("[dataset] images: required for idx datasets")

    cae = _section(parser, "cae", CaeConfig, exclude=("input_shape", "seed"))
    cfg.cae = {k: v for k, v in cae.items() if v is not None or k == "target_loss"}
    try:
        CaeConfig(input_shape=(1, 16, 16), **cfg.cae)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[cae] {exc}") from None

    try:
        clu = _section(parser, "clustering", ClusteringConfig, exclude=("seed",))
        cfg.clustering = ClusteringConfig(**clu)
        ifl = _section(parser, "ifl", IflConfig, exclude=("seed",))
        cfg.ifl = IflConfig(**{k: v for k, v in ifl.items() if v is not None})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.pipeline == "deep_ifl" and cfg.ifl.r < 2:
        raise ConfigError("[ifl] r: must be >= 2")
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))
