"""Run configuration: a JSON document validated against a bundled schema.

Relative paths inside a config resolve against the config file's directory.
When ``dataset.path`` or ``adjacency.path`` is omitted, stages read the files
that ``simulate`` writes into the output directory, so one config drives the
whole pipeline.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .errors import ValidationError
from .sampler import MCMCConfig

BUNDLED_CONFIGS = ("benchmark", "lattice")

DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "split_time": None,
    "kappa": 1.5,
    "priors_path": None,
    "dataset": {"format": "csv", "path": None, "transform": "identity", "scale": 1.0, "correction": None,
                "period": 12},
    "adjacency": {"source": "edge-list", "path": None, "id_property": "id", "snap_tol": 1e-9},
    "design": {"fourier_degree": "auto", "candidate_degrees": [1, 2, 3]},
    "mcmc": {"n_iter": 50000, "burn_in": 10000, "thin": 10},
    "forecast": {"horizon": None},
}


def load_schema(name: str) -> dict:
    text = resources.files("areal_gp").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_document(doc, schema_name: str, where: str = "document"):
    """Raise :class:`ValidationError` unless ``doc`` matches the named bundled schema."""
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"{where}: {loc}: {exc.message}") from None


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "simulation":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        validate_document(self.raw, "runconfig", "config")
        self.doc = _merge(DEFAULTS, self.raw)
        self.validate()

    # -- construction -----------------------------------------------------

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Load a config file, or a bundled config by name (``benchmark``, ``lattice``)."""
        if str(path) in BUNDLED_CONFIGS and not Path(path).exists():
            text = resources.files("areal_gp").joinpath("data", f"{path}.json").read_text()
            return cls(json.loads(text), Path.cwd())
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{p}: invalid JSON ({exc})") from None
        return cls(raw, p.resolve().parent)

    def write(self, path):
        Path(path).write_text(json.dumps(self.raw, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def with_overrides(self, **overrides) -> "RunConfig":
        """Return a copy with top-level or ``section.key`` overrides applied (None values skipped)."""
        raw = copy.deepcopy(self.raw)
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                section, sub = key.split(".", 1)
                raw.setdefault(section, {})[sub] = value
            else:
                raw[key] = value
        return RunConfig(raw, self.base_dir)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.raw == other.raw

    # -- validation ---------------------------------------------------------

    def validate(self):
        self.mcmc_config()
        st = self.doc["split_time"]
        if st is not None and st < 2:
            raise ValidationError("split_time must leave at least two training times")
        ds = self.doc["dataset"]
        if ds["format"] == "hungermap" and "hungermap" not in ds:
            raise ValidationError("dataset.format=hungermap needs a dataset.hungermap block")
        if ds["format"] == "hungermap" and ds["transform"] != "empirical-logit":
            raise ValidationError("hungermap panels use the empirical-logit transform")
        for key in ("path",):
            for section in ("dataset", "adjacency"):
                p = self.doc[section].get(key)
                if p is not None and not self.resolve(p).exists():
                    raise ValidationError(f"{section}.{key}: file {self.resolve(p)} does not exist")
        if self.doc["priors_path"] is not None and not self.resolve(self.doc["priors_path"]).exists():
            raise ValidationError(f"priors_path: file {self.resolve(self.doc['priors_path'])} does not exist")

    def check_split(self, n_times: int, first_time: int, last_time: int):
        st = self.split_time(last_time)
        if not (first_time < st <= last_time):
            raise ValidationError(f"split_time {st} must lie in ({first_time}, {last_time}]")
        if st - first_time + 1 < 3:
            raise ValidationError("split_time leaves fewer than 3 training times")

    # -- accessors ----------------------------------------------------------

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.doc["output_dir"])

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (self.base_dir / p)

    def split_time(self, last_time: int) -> int:
        st = self.doc["split_time"]
        return int(last_time if st is None else st)

    def mcmc_config(self) -> MCMCConfig:
        m = dict(self.doc["mcmc"])
        return MCMCConfig(seed=self.seed, **m)

    def dataset_path(self) -> Path:
        p = self.doc["dataset"]["path"]
        return self.resolve(p) if p is not None else self.output_dir / "panel.csv"

    def adjacency_path(self) -> Path:
        p = self.doc["adjacency"]["path"]
        return self.resolve(p) if p is not None else self.output_dir / "adjacency.csv"

    def priors_path(self) -> Optional[Path]:
        p = self.doc["priors_path"]
        return None if p is None else self.resolve(p)
