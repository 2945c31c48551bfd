"""Experiment configuration: YAML parsing, validation and a canonical hash.

Every key is checked against a fixed schema; errors carry ``file:line`` so
a bad value can be found without guessing. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

METHODS = ("lth", "sap")
STOPPING = ("fixed", "flow")


class _Section(dict):
    """A mapping that remembers the source line of each key."""

    def __init__(self, *args, line: int = 0, **kw):
        super().__init__(*args, **kw)
        self.line = line
        self.lines: dict[str, int] = {}


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e9" and "1.0e9" as strings; accept the 1.2 float forms too
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                  |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _construct_mapping(loader: _Loader, node: yaml.MappingNode) -> _Section:
    out = _Section(line=node.start_mark.line + 1)
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        line = key_node.start_mark.line + 1
        if key in out:
            raise ConfigError(f"{line}: duplicate key {key!r}")
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = line
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


@dataclass(frozen=True)
class SyntheticParams:
    num_classes: int = 10
    dims: int = 784
    samples_per_class: int = 1000
    test_per_class: int = 200
    margin: float = 4.0
    seed: int = 0


@dataclass(frozen=True)
class DatasetSection:
    name: str = "synthetic"
    path: str | None = None
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)
    subset_train: int | None = None
    subset_test: int | None = None
    subset_seed: int = 0


@dataclass(frozen=True)
class ModelSection:
    arch: str = "mlp"
    widths: tuple[int, ...] = (784, 128, 64, 10)
    conv: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    E: int = 20
    k: int = 5


@dataclass(frozen=True)
class PruneSection:
    method: str = "sap"
    T: int = 10
    p: float = 0.5
    q: float = 1.0
    gamma: float = 1.0
    beta: float = 0.9
    eta_mode: str = "fixed"
    eta: float = 0.0
    lth_rate: float = 0.2
    stopping: str = "fixed"
    epsilon: float | None = None
    flow_kind: str = "GF"
    norm_mode: str = "per_layer_relative"
    probe_size: int = 1024
    rewind_to: str = "none"
    stall_prune_one: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    prune: PruneSection = field(default_factory=PruneSection)
    seed: int = 0
    trials: int = 1
    source: str = field(default="<memory>", compare=False)

    def canonical(self) -> dict:
        data = asdict(self)
        data.pop("source")
        return data

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def method_label(self) -> str:
        base = "LTH" if self.prune.method == "lth" else "SAP"
        if self.prune.stopping == "flow":
            return f"InCoP-{self.prune.flow_kind}" if base == "SAP" else f"InCoP-LTH-{self.prune.flow_kind}"
        return base

    @property
    def pq_pair(self) -> str:
        if self.prune.method == "lth":
            return ""
        return f"({self.prune.p:g},{self.prune.q:g})"


# ---------------------------------------------------------------- validation

class _Ctx:
    def __init__(self, source: str):
        self.source = source

    def fail(self, line: int, path: str, msg: str):
        raise ConfigError(f"{self.source}:{line}: {path}: {msg}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float))) and not isinstance(v, bool)


def _section(ctx: _Ctx, parent: _Section, key: str, path: str) -> _Section:
    value = parent.get(key, _Section(line=parent.line))
    if not isinstance(value, dict):
        ctx.fail(parent.lines.get(key, parent.line), path, "must be a mapping")
    return value


def _check_keys(ctx: _Ctx, sec: _Section, allowed, path: str):
    for key in sec:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            ctx.fail(sec.lines.get(key, sec.line), where,
                     f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _field(ctx, sec, key, path, default, check, msg):
    if key not in sec:
        return default
    value = sec[key]
    if not check(value):
        ctx.fail(sec.lines[key], f"{path}.{key}" if path else key, f"{msg}, got {value!r}")
    return value


def _pos_int(v):
    return _is_int(v) and v >= 1


def _nonneg_int(v):
    return _is_int(v) and v >= 0


def _dataset(ctx, root) -> DatasetSection:
    sec = _section(ctx, root, "dataset", "dataset")
    _check_keys(ctx, sec, {"name", "path", "synthetic", "subset"}, "dataset")
    d = DatasetSection()
    name = _field(ctx, sec, "name", "dataset", d.name, lambda v: isinstance(v, str) and v, "must be a nonempty string")
    path = _field(ctx, sec, "path", "dataset", None, lambda v: v is None or isinstance(v, str), "must be a string")
    syn = _section(ctx, sec, "synthetic", "dataset.synthetic")
    if "synthetic" in sec and name != "synthetic":
        ctx.fail(sec.lines["synthetic"], "dataset.synthetic", "only valid when dataset.name is 'synthetic'")
    _check_keys(ctx, syn, set(SyntheticParams.__dataclass_fields__), "dataset.synthetic")
    s = SyntheticParams()
    p = "dataset.synthetic"
    synthetic = SyntheticParams(
        num_classes=_field(ctx, syn, "num_classes", p, s.num_classes, lambda v: _is_int(v) and v >= 2, "must be an integer >= 2"),
        dims=_field(ctx, syn, "dims", p, s.dims, lambda v: _is_int(v) and v >= 2, "must be an integer >= 2"),
        samples_per_class=_field(ctx, syn, "samples_per_class", p, s.samples_per_class, _pos_int, "must be a positive integer"),
        test_per_class=_field(ctx, syn, "test_per_class", p, s.test_per_class, _pos_int, "must be a positive integer"),
        margin=float(_field(ctx, syn, "margin", p, s.margin, lambda v: _is_num(v) and v > 0, "must be a positive number")),
        seed=_field(ctx, syn, "seed", p, s.seed, _nonneg_int, "must be a nonnegative integer"),
    )
    sub = _section(ctx, sec, "subset", "dataset.subset")
    _check_keys(ctx, sub, {"train", "test", "seed"}, "dataset.subset")
    return DatasetSection(
        name=name, path=path, synthetic=synthetic,
        subset_train=_field(ctx, sub, "train", "dataset.subset", None, _pos_int, "must be a positive integer"),
        subset_test=_field(ctx, sub, "test", "dataset.subset", None, _pos_int, "must be a positive integer"),
        subset_seed=_field(ctx, sub, "seed", "dataset.subset", 0, _nonneg_int, "must be a nonnegative integer"),
    )


def _model(ctx, root) -> ModelSection:
    sec = _section(ctx, root, "model", "model")
    _check_keys(ctx, sec, {"arch", "widths", "conv"}, "model")
    m = ModelSection()
    arch = _field(ctx, sec, "arch", "model", m.arch, lambda v: v in ("mlp", "cnn"), "must be 'mlp' or 'cnn'")
    min_len = 1 if arch == "cnn" else 2
    widths = _field(ctx, sec, "widths", "model", list(m.widths),
                    lambda v: isinstance(v, list) and len(v) >= min_len and all(_pos_int(x) for x in v),
                    f"must be a list of at least {min_len} positive integers")
    conv = _field(ctx, sec, "conv", "model", [],
                  lambda v: isinstance(v, list) and all(
                      isinstance(c, list) and len(c) == 2 and all(_pos_int(x) for x in c) for c in v),
                  "must be a list of [channels, kernel] pairs")
    if arch == "cnn" and not conv:
        ctx.fail(sec.lines.get("conv", sec.line), "model.conv", "a cnn needs at least one conv layer")
    if arch == "mlp" and conv:
        ctx.fail(sec.lines["conv"], "model.conv", "only valid when model.arch is 'cnn'")
    return ModelSection(arch, tuple(widths), tuple(tuple(c) for c in conv))


def _train(ctx, root) -> TrainSection:
    sec = _section(ctx, root, "train", "train")
    _check_keys(ctx, sec, set(TrainSection.__dataclass_fields__), "train")
    t = TrainSection()
    return TrainSection(
        lr=float(_field(ctx, sec, "lr", "train", t.lr, lambda v: _is_num(v) and v > 0, "must be a positive number")),
        momentum=float(_field(ctx, sec, "momentum", "train", t.momentum, lambda v: _is_num(v) and 0 <= v < 1, "must lie in [0, 1)")),
        weight_decay=float(_field(ctx, sec, "weight_decay", "train", t.weight_decay, lambda v: _is_num(v) and v >= 0, "must be nonnegative")),
        batch_size=_field(ctx, sec, "batch_size", "train", t.batch_size, _pos_int, "must be a positive integer"),
        E=_field(ctx, sec, "E", "train", t.E, _pos_int, "must be a positive integer"),
        k=_field(ctx, sec, "k", "train", t.k, _nonneg_int, "must be a nonnegative integer"),
    )


def _prune(ctx, root) -> PruneSection:
    sec = _section(ctx, root, "prune", "prune")
    _check_keys(ctx, sec, set(PruneSection.__dataclass_fields__), "prune")
    d = PruneSection()
    f = lambda key, check, msg: _field(ctx, sec, key, "prune", getattr(d, key), check, msg)  # noqa: E731
    out = dict(
        method=f("method", lambda v: v in METHODS, "must be 'lth' or 'sap'"),
        T=f("T", _pos_int, "must be a positive integer"),
        p=float(f("p", lambda v: _is_num(v) and 0 < v <= 1, "must lie in (0, 1]")),
        q=float(f("q", lambda v: _is_num(v) and v >= 1, "must be >= 1")),
        gamma=float(f("gamma", lambda v: _is_num(v) and v > 0, "must be positive")),
        beta=float(f("beta", lambda v: _is_num(v) and 0 < v <= 1, "must lie in (0, 1]")),
        eta_mode=f("eta_mode", lambda v: v in ("fixed", "exact"), "must be 'fixed' or 'exact'"),
        eta=float(f("eta", lambda v: _is_num(v) and v >= 0, "must be nonnegative")),
        lth_rate=float(f("lth_rate", lambda v: _is_num(v) and 0 < v < 1, "must lie in (0, 1)")),
        stopping=f("stopping", lambda v: v in STOPPING, "must be 'fixed' or 'flow'"),
        epsilon=f("epsilon", lambda v: _is_num(v) and v > 0, "must be a positive number"),
        flow_kind=f("flow_kind", lambda v: v in ("IF", "GF"), "must be 'IF' or 'GF'"),
        norm_mode=f("norm_mode", lambda v: v in ("global_l2", "per_layer_relative"),
                    "must be 'global_l2' or 'per_layer_relative'"),
        probe_size=f("probe_size", _pos_int, "must be a positive integer"),
        rewind_to=f("rewind_to", lambda v: v in ("none", "init", "finetuned"),
                    "must be 'none', 'init' or 'finetuned'"),
        stall_prune_one=f("stall_prune_one", lambda v: isinstance(v, bool), "must be true or false"),
    )
    if out["p"] >= out["q"]:
        ctx.fail(sec.lines.get("q", sec.line), "prune.q", "must be greater than prune.p")
    if out["epsilon"] is not None:
        out["epsilon"] = float(out["epsilon"])
    if out["stopping"] == "flow" and out["epsilon"] is None:
        ctx.fail(sec.lines.get("stopping", sec.line), "prune.epsilon",
                 "flow stopping needs an explicit epsilon (see calibrate-epsilon)")
    return PruneSection(**out)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    ctx = _Ctx(source)
    try:
        root = yaml.load(text, Loader=_Loader)
    except ConfigError as exc:
        raise ConfigError(f"{source}:{exc}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        raise ConfigError(f"{source}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if root is None:
        root = _Section(line=1)
    if not isinstance(root, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    _check_keys(ctx, root, {"dataset", "model", "train", "prune", "seed", "trials"}, "")
    return ExperimentConfig(
        dataset=_dataset(ctx, root),
        model=_model(ctx, root),
        train=_train(ctx, root),
        prune=_prune(ctx, root),
        seed=_field(ctx, root, "seed", "", 0, _nonneg_int, "must be a nonnegative integer"),
        trials=_field(ctx, root, "trials", "", 1, _pos_int, "must be a positive integer"),
        source=source,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """YAML text that parses back to an equal config."""
    data: dict[str, Any] = cfg.canonical()
    ds = data["dataset"]
    dataset: dict[str, Any] = {"name": ds["name"]}
    if ds["path"] is not None:
        dataset["path"] = ds["path"]
    if ds["name"] == "synthetic":
        dataset["synthetic"] = ds["synthetic"]
    subset = {k: ds[f"subset_{k}"] for k in ("train", "test") if ds[f"subset_{k}"] is not None}
    if subset:
        subset["seed"] = ds["subset_seed"]
        dataset["subset"] = subset
    model: dict[str, Any] = {"arch": data["model"]["arch"], "widths": list(data["model"]["widths"])}
    if data["model"]["conv"]:
        model["conv"] = [list(c) for c in data["model"]["conv"]]
    prune = {k: v for k, v in data["prune"].items() if v is not None}
    doc = {"dataset": dataset, "model": model, "train": data["train"], "prune": prune,
           "seed": data["seed"], "trials": data["trials"]}
    return yaml.safe_dump(doc, sort_keys=False)
