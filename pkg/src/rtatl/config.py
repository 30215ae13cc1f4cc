"""Dataset / AU inventory / hyperparameter configuration.

Config files are plain ``key = value`` INI files with three sections::

    [dataset]   name, AU ids, patch size, landmark layout, intensity threshold
    [roi]       one line per AU: ``<au> = <lm> <dx> <dy> | <lm> <dx> <dy>``
    [hyper]     model and optimisation hyperparameters

RoI offsets are expressed in units of half the inter-ocular distance so the
geometry scales with the face.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

KNOWN_DATASETS = ("bp4d", "disfa", "synthetic")

# dlib 68-point layout, indices are 0-based; "left" is image-left.
_DLIB68_MIRROR = (
    list(range(16, -1, -1))                      # jaw
    + list(range(26, 16, -1))                    # brows
    + [27, 28, 29, 30]                           # nose bridge
    + [35, 34, 33, 32, 31]                       # nostrils
    + [45, 44, 43, 42, 47, 46]                   # image-left eye -> image-right eye
    + [39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]   # outer lip
    + [64, 63, 62, 61, 60, 67, 66, 65]                    # inner lip
)

LANDMARK_LAYOUTS = {
    "dlib68": {
        "n_points": 68,
        "left_eye": tuple(range(36, 42)),
        "right_eye": tuple(range(42, 48)),
        "mirror": tuple(_DLIB68_MIRROR),
    },
}


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class RoIRule:
    landmark: int
    dx: float
    dy: float


@dataclass(frozen=True)
class AUSpec:
    dataset_name: str
    au_ids: tuple[int, ...]
    roi_rules: tuple[tuple[RoIRule, RoIRule], ...]
    patch_size: int = 48
    positive_intensity_threshold: Optional[int] = None
    landmark_layout: str = "dlib68"

    @property
    def N(self) -> int:
        return len(self.au_ids)

    @property
    def layout(self) -> dict:
        return LANDMARK_LAYOUTS[self.landmark_layout]

    def index_of(self, au_id: int) -> int:
        return self.au_ids.index(au_id)

    def validate(self) -> None:
        if self.dataset_name not in KNOWN_DATASETS:
            raise ConfigError("name", f"unknown dataset {self.dataset_name!r}")
        if len(self.roi_rules) != len(self.au_ids):
            raise ConfigError("roi", f"expected {len(self.au_ids)} rules, got {len(self.roi_rules)}")
        if len(set(self.au_ids)) != len(self.au_ids):
            raise ConfigError("au_ids", "duplicate AU id")
        if self.dataset_name == "bp4d" and self.N != 12:
            raise ConfigError("au_ids", "bp4d uses 12 AUs")
        if self.dataset_name == "disfa" and self.N != 8:
            raise ConfigError("au_ids", "disfa uses 8 AUs")
        if self.patch_size <= 0 or self.patch_size % 2:
            raise ConfigError("patch_size", "must be positive and even")
        if self.landmark_layout not in LANDMARK_LAYOUTS:
            raise ConfigError("landmark_layout", f"unknown layout {self.landmark_layout!r}")
        n_points = self.layout["n_points"]
        for au, pair in zip(self.au_ids, self.roi_rules):
            if len(pair) != 2:
                raise ConfigError(str(au), "each AU needs a left and a right rule")
            for rule in pair:
                if not 0 <= rule.landmark < n_points:
                    raise ConfigError(str(au), f"landmark {rule.landmark} out of range")
        t = self.positive_intensity_threshold
        if t is not None and not 0 <= t <= 5:
            raise ConfigError("positive_intensity_threshold", "must lie in 0..5")


@dataclass(frozen=True)
class HyperParams:
    d: int = 128
    heads: int = 8
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda_f: float = 0.2
    lr: float = 0.0003
    input_size: int = 192
    aligned_size: int = 200
    flow_step: int = 3
    pseudo_threshold: float = 0.5
    # not fixed by the method description; chosen defaults
    fusion_channels: int = 128
    roi_hidden: int = 256
    roi_cells: int = 6
    ffn_dim: int = 256
    gen_channels: tuple[int, ...] = (1024, 512, 256, 128)
    disc_channels: tuple[int, ...] = (128, 256, 512, 1024)
    flow_hidden: int = 256
    pixel_reduction: str = "mean"   # how L_rec / L_F combine pixels: mean or sum
    mask_fraction: float = 0.5
    batch_size: int = 8
    patience: int = 5

    def validate(self) -> None:
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError("heads", f"d={self.d} not divisible by heads={self.heads}")
        for name in ("lambda1", "lambda2", "lambda_f"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(name, f"must lie in (0, 1], got {v}")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.input_size > self.aligned_size:
            raise ConfigError("input_size", "must not exceed aligned_size")
        if self.input_size % 32:
            raise ConfigError("input_size", "must be a multiple of 32")
        if self.flow_step < 1:
            raise ConfigError("flow_step", "must be >= 1")
        if not 0.0 < self.pseudo_threshold < 1.0:
            raise ConfigError("pseudo_threshold", "must lie in (0, 1)")
        if self.pixel_reduction not in ("mean", "sum"):
            raise ConfigError("pixel_reduction", "must be 'mean' or 'sum'")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ConfigError("mask_fraction", "must lie in [0, 1]")
        if len(self.gen_channels) != 4 or len(self.disc_channels) != 4:
            raise ConfigError("gen_channels", "generator and critics use four hidden widths")


# keys that must be present in [hyper]; the rest fall back to defaults
REQUIRED_HYPER = ("d", "heads", "lambda1", "lambda2", "lambda_f", "lr",
                  "input_size", "aligned_size", "flow_step", "pseudo_threshold")


def _parse_value(raw: str, default, key: str):
    try:
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}") from exc
    return raw.strip()


def _parse_rule(text: str, key: str) -> RoIRule:
    parts = text.split()
    if len(parts) != 3:
        raise ConfigError(key, f"rule {text!r} must be '<landmark> <dx> <dy>'")
    try:
        return RoIRule(int(parts[0]), float(parts[1]), float(parts[2]))
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse rule {text!r}") from exc


def parse_config(text: str) -> tuple[AUSpec, HyperParams]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc)) from exc
    for section in ("dataset", "roi", "hyper"):
        if not cp.has_section(section):
            raise ConfigError(section, "missing section")

    ds = cp["dataset"]
    for key in ("name", "au_ids"):
        if key not in ds:
            raise ConfigError(key, "missing key")
    try:
        au_ids = tuple(int(v) for v in ds["au_ids"].replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError("au_ids", "AU ids must be integers") from exc
    rules = []
    for au in au_ids:
        key = str(au)
        if key not in cp["roi"]:
            raise ConfigError(key, "missing RoI rule")
        halves = cp["roi"][key].split("|")
        if len(halves) != 2:
            raise ConfigError(key, "expected 'left | right' rule pair")
        rules.append((_parse_rule(halves[0], key), _parse_rule(halves[1], key)))
    extra = set(cp["roi"]) - {str(a) for a in au_ids}
    if extra:
        raise ConfigError(sorted(extra)[0], "RoI rule for an AU not in au_ids")
    threshold = ds.get("positive_intensity_threshold")
    spec = AUSpec(
        dataset_name=ds["name"].strip(),
        au_ids=au_ids,
        roi_rules=tuple(rules),
        patch_size=_parse_value(ds.get("patch_size", "48"), 0, "patch_size"),
        positive_intensity_threshold=None if threshold is None else _parse_value(threshold, 0, "positive_intensity_threshold"),
        landmark_layout=ds.get("landmark_layout", "dlib68").strip(),
    )
    spec.validate()

    hy = cp["hyper"]
    defaults = HyperParams()
    known = {f.name for f in fields(HyperParams)}
    for key in hy:
        if key not in known:
            raise ConfigError(key, "unknown hyperparameter")
    for key in REQUIRED_HYPER:
        if key not in hy:
            raise ConfigError(key, "missing key")
    values = {k: _parse_value(hy[k], getattr(defaults, k), k) for k in hy}
    hp = replace(defaults, **values)
    hp.validate()
    if spec.patch_size >= hp.input_size:
        raise ConfigError("patch_size", "must be smaller than input_size")
    return spec, hp


def load_config(path) -> tuple[AUSpec, HyperParams]:
    path = Path(path)
    if not path.is_file():
        # bare names resolve to the configs shipped with the package
        shipped = Path(__file__).parent / "configs" / path.name
        if path.parent == Path(".") and shipped.is_file():
            path = shipped
        else:
            raise ConfigError("file", f"{path} does not exist")
    return parse_config(path.read_text())


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(spec: AUSpec, hp: HyperParams) -> str:
    out = io.StringIO()
    out.write("[dataset]\n")
    out.write(f"name = {spec.dataset_name}\n")
    out.write(f"au_ids = {_fmt(spec.au_ids)}\n")
    out.write(f"patch_size = {spec.patch_size}\n")
    out.write(f"landmark_layout = {spec.landmark_layout}\n")
    if spec.positive_intensity_threshold is not None:
        out.write(f"positive_intensity_threshold = {spec.positive_intensity_threshold}\n")
    out.write("\n[roi]\n")
    for au, (left, right) in zip(spec.au_ids, spec.roi_rules):
        out.write(f"{au} = {left.landmark} {left.dx!r} {left.dy!r} | "
                  f"{right.landmark} {right.dx!r} {right.dy!r}\n")
    out.write("\n[hyper]\n")
    for f in fields(hp):
        out.write(f"{f.name} = {_fmt(getattr(hp, f.name))}\n")
    return out.getvalue()


def save_config(path, spec: AUSpec, hp: HyperParams) -> None:
    Path(path).write_text(dump_config(spec, hp))


def config_hash(spec: AUSpec, hp: HyperParams) -> str:
    return hashlib.sha1(dump_config(spec, hp).encode()).hexdigest()[:16]


def binarize_intensity(intensity: int, spec: AUSpec) -> int:
    if spec.positive_intensity_threshold is None:
        raise ConfigError("positive_intensity_threshold", f"{spec.dataset_name} has no intensity threshold")
    if not 0 <= intensity <= 5:
        raise ValueError(f"AU intensity {intensity} outside 0..5")
    return int(intensity > spec.positive_intensity_threshold)
