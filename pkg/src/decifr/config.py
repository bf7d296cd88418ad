"""Experiment configuration: a versioned YAML document parsed into dataclasses.

Every validation failure is reported as ``<file>:<line>: <message>`` using the
line of the offending key, so a hand-edited config can be fixed quickly.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import segnet
from .errors import InvalidConfigError
from .fedsim import FLConfig
from .giattack import GIAConfig
from .mia import PostProcessConfig
from .synthcell import LAYER_CLASSES, SynthesisParams, class_key, parse_class_key

SCHEMA_VERSION = 1
POOLING_MODES = ("per_cell", "global")


class ConfigError(InvalidConfigError):
    """Config problem located at a key path; ``line`` is 1-based when known."""

    def __init__(self, message: str, path: tuple = (), line: int | None = None, source: str = "<config>"):
        self.message, self.path, self.line, self.source = message, tuple(path), line, source
        where = f"{source}:{line}" if line else source
        key = ".".join(str(p) for p in path)
        super().__init__(f"{where}: {key + ': ' if key else ''}{message}")


@dataclass
class DatasetBlock:
    per_client: int = 20
    holdout_per_class: int = 10
    library_size: int = 1000
    image_size: int | None = None  # defaults to the model's image size
    synthesis: dict = field(default_factory=dict)  # SynthesisParams fields except image_size / rng_seed


@dataclass
class ModelBlock:
    preset: str = "desk"
    overrides: dict = field(default_factory=dict)


@dataclass
class AttackBlock:
    member_classes: list[str] = field(default_factory=lambda: ["metal/coarse", "diffusion/coarse"])
    guide_classes: list[str] = field(default_factory=lambda: ["metal/coarse", "diffusion/coarse"])
    lambda_dummy: list[float] = field(default_factory=lambda: [0.0, 5.0])
    targets_per_class: int = 25
    target_round: int | None = None  # defaults to the last round
    target_client: int | None = None  # None: targets drawn round-robin from all clients
    eta: float | None = None  # defaults to the federation's learning rate
    eta_grid: list[float] | None = None
    guide_seed: int = 12345
    gia: dict = field(default_factory=dict)  # GIAConfig fields except lambda_dummy / eta_grid / seed


@dataclass
class EvalBlock:
    pooling: str = "per_cell"
    postprocess: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    run_id: str
    seed: int = 0
    schema_version: int = SCHEMA_VERSION
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    fl: dict = field(default_factory=dict)  # FLConfig fields except seed
    attack: AttackBlock = field(default_factory=AttackBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    text: str = field(default="", repr=False, compare=False)  # source bytes, for hashing

    # ---- derived, validated objects -------------------------------------------------
    def model_config(self) -> segnet.UNetConfig:
        return segnet.preset(self.model.preset, **self.model.overrides)

    def image_size(self) -> int:
        return self.dataset.image_size or self.model_config().image_size

    def synthesis(self) -> SynthesisParams:
        return SynthesisParams(image_size=self.image_size(), rng_seed=self.seed, **self.dataset.synthesis)

    def fl_config(self) -> FLConfig:
        return FLConfig(seed=derive_seed(self.seed, "fl"), **self.fl)

    def gia_config(self, lambda_dummy: float, seed: int = 0) -> GIAConfig:
        return GIAConfig(lambda_dummy=float(lambda_dummy), eta_grid=self.attack.eta_grid, seed=seed,
                         **self.attack.gia)

    def postprocess(self) -> PostProcessConfig:
        pp = dict(self.eval.postprocess)
        if "order" in pp:
            pp["order"] = tuple(pp["order"])
        return PostProcessConfig(**pp)

    @property
    def target_round(self) -> int:
        return self.attack.target_round or self.fl_config().rounds

    @property
    def eta(self) -> float:
        return self.attack.eta if self.attack.eta is not None else self.fl_config().learning_rate

    @property
    def hash(self) -> str:
        return config_hash(self.text)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("text")
        return d


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seed(master: int, *key) -> int:
    """Independent 32-bit seed for a named stream under the master seed."""
    words = [int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little") if not isinstance(k, int) else k
             for k in key]
    return int(np.random.SeedSequence(master, spawn_key=tuple(words)).generate_state(1, dtype=np.uint32)[0])


def complement_class(key: str) -> str:
    layer, node = parse_class_key(key)
    other = [c for c in LAYER_CLASSES if c != layer][0]
    return class_key(other, node)


# --------------------------------------------------------------------------
# parsing


def _to_python(node, lines: dict, path: tuple = (), source: str = "<config>"):
    """Convert a composed YAML node to Python, recording each key path's line."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError("duplicate key", path + (key,), k.start_mark.line + 1, source)
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _to_python(v, lines, path + (key,), source)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(v, lines, path + (i,), source) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def _check_keys(d, allowed, path, lines, src):
    if not isinstance(d, dict):
        raise ConfigError("expected a mapping", path, lines.get(path), src)
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", path + (k,),
                              lines.get(path + (k,)), src)


def _names(cls, exclude=()) -> set[str]:
    return {f.name for f in fields(cls)} - set(exclude)


def _typed(value, kind, path, lines, src):
    ok = {int: lambda v: isinstance(v, int) and not isinstance(v, bool),
          float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
          str: lambda v: isinstance(v, str),
          list: lambda v: isinstance(v, list)}[kind](value)
    if not ok:
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", path, lines.get(path), src)
    return float(value) if kind is float else value


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", (),
                          mark.line + 1 if mark else None, source) from None
    if root is None:
        raise ConfigError("empty config", (), 1, source)
    lines: dict = {}
    raw = _to_python(root, lines, (), source)

    def err(msg, *path):
        # report against the deepest path that has a recorded line
        p = tuple(path)
        while p and p not in lines:
            p = p[:-1]
        return ConfigError(msg, tuple(path), lines.get(p), source)

    _check_keys(raw, _names(ExperimentConfig, ("text",)), (), lines, source)
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise err(f"schema_version must be {SCHEMA_VERSION}", "schema_version")
    if "run_id" not in raw:
        raise err("run_id is required")
    run_id = _typed(raw["run_id"], str, ("run_id",), lines, source)
    if not run_id or any(c in run_id for c in "/\\") or run_id.startswith("."):
        raise err("run_id must be a plain directory name", "run_id")
    seed = _typed(raw.get("seed", 0), int, ("seed",), lines, source)

    blocks = {}
    for name, cls in (("dataset", DatasetBlock), ("model", ModelBlock), ("attack", AttackBlock), ("eval", EvalBlock)):
        sub = raw.get(name, {})
        _check_keys(sub, _names(cls), (name,), lines, source)
        blocks[name] = cls(**sub)
    fl = raw.get("fl", {})
    _check_keys(fl, _names(FLConfig, ("seed",)), ("fl",), lines, source)

    cfg = ExperimentConfig(run_id=run_id, seed=seed, schema_version=raw["schema_version"], fl=fl, text=text,
                           **blocks)
    _validate(cfg, err)
    return cfg


def _validate(cfg: ExperimentConfig, err) -> None:
    ds, at, ev = cfg.dataset, cfg.attack, cfg.eval
    for name in ("per_client", "holdout_per_class", "library_size"):
        v = getattr(ds, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < (1 if name != "holdout_per_class" else 0):
            raise err(f"must be a positive integer, got {v!r}", "dataset", name)
    _check_sub(ds.synthesis, SynthesisParams, ("image_size", "rng_seed"), err, "dataset", "synthesis")
    if cfg.model.preset not in segnet.PRESETS:
        raise err(f"unknown preset {cfg.model.preset!r} (known: {', '.join(sorted(segnet.PRESETS))})",
                  "model", "preset")
    _check_sub(cfg.model.overrides, segnet.UNetConfig, (), err, "model", "overrides")
    try:
        mc = cfg.model_config()
    except (InvalidConfigError, TypeError, ValueError) as exc:
        raise err(str(exc), *_blame(exc, cfg.model.overrides, "model", "overrides")) from None
    if ds.image_size is not None and ds.image_size != mc.image_size:
        raise err(f"image_size {ds.image_size} differs from the model's {mc.image_size}", "dataset", "image_size")
    try:
        cfg.synthesis()
    except (InvalidConfigError, TypeError) as exc:
        raise err(str(exc), *_blame(exc, ds.synthesis, "dataset", "synthesis")) from None
    try:
        flc = cfg.fl_config()
    except (InvalidConfigError, TypeError) as exc:
        raise err(str(exc), *_blame(exc, cfg.fl, "fl")) from None

    for name in ("member_classes", "guide_classes"):
        keys = getattr(at, name)
        if not isinstance(keys, list) or not keys:
            raise err("must be a nonempty list of classes", "attack", name)
        if len(set(keys)) != len(keys):
            raise err("classes must be distinct", "attack", name)
        for i, key in enumerate(keys):
            try:
                parse_class_key(key)
            except (InvalidConfigError, AttributeError):
                raise err(f"unknown class {key!r}", "attack", name, i) from None
    if len(at.guide_classes) < 2:
        raise err("need at least two guide classes to separate members from non-members", "attack", "guide_classes")
    for i, key in enumerate(at.member_classes):
        if key not in at.guide_classes:
            raise err(f"member class {key} has no matching guide class", "attack", "member_classes", i)
    if not isinstance(at.lambda_dummy, list) or not at.lambda_dummy:
        raise err("lambda grid must be a nonempty list", "attack", "lambda_dummy")
    for i, lam in enumerate(at.lambda_dummy):
        if isinstance(lam, bool) or not isinstance(lam, (int, float)) or lam < 0:
            raise err(f"lambda must be a number >= 0, got {lam!r}", "attack", "lambda_dummy", i)
    if len(set(float(x) for x in at.lambda_dummy)) != len(at.lambda_dummy):
        raise err("lambda values must be distinct", "attack", "lambda_dummy")
    pool = flc.num_clients * ds.per_client if at.target_client is None else ds.per_client
    if not isinstance(at.targets_per_class, int) or not 1 <= at.targets_per_class <= pool:
        raise err(f"must be between 1 and {pool} (training records available)", "attack", "targets_per_class")
    if at.target_round is not None and (not isinstance(at.target_round, int) or not 1 <= at.target_round <= flc.rounds):
        raise err(f"target_round must lie in 1..{flc.rounds}", "attack", "target_round")
    if at.target_client is not None and (not isinstance(at.target_client, int)
                                         or not 0 <= at.target_client < flc.num_clients):
        raise err(f"target_client must lie in 0..{flc.num_clients - 1}", "attack", "target_client")
    if at.eta is not None and (isinstance(at.eta, bool) or not isinstance(at.eta, (int, float)) or at.eta <= 0):
        raise err("eta must be a positive number", "attack", "eta")
    _check_sub(at.gia, GIAConfig, ("lambda_dummy", "eta_grid", "seed"), err, "attack", "gia")
    try:
        cfg.gia_config(0.0)
    except (InvalidConfigError, TypeError) as exc:
        raise err(str(exc), *_blame(exc, cfg.attack.gia, "attack", "gia")) from None
    if ev.pooling not in POOLING_MODES:
        raise err(f"pooling must be one of {POOLING_MODES}", "eval", "pooling")
    _check_sub(ev.postprocess, PostProcessConfig, (), err, "eval", "postprocess")


def _blame(exc: Exception, block: dict, *path) -> tuple:
    """Narrow a block-level validation error to the key its message names."""
    msg = str(exc)
    for k in sorted(block, key=len, reverse=True):
        if msg.startswith(k) or f" {k} " in f" {msg} ":
            return path + (k,)
    return path


def _check_sub(d, cls, exclude, err, *path):
    if not isinstance(d, dict):
        raise err("expected a mapping", *path)
    allowed = _names(cls, exclude)
    for k in d:
        if k not in allowed:
            raise err(f"unknown key (allowed: {', '.join(sorted(allowed))})", *path, k)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", (), None, str(path)) from None
    return parse_config(text, str(path))


def variant_text(text: str, **updates) -> str:
    """A config derived from ``text`` with dotted-key overrides, e.g. ``{"attack.member_classes": [...]}``.

    Comments are not preserved; the result is validated before it is returned.
    """
    doc = yaml.safe_load(text)
    for dotted, value in updates.items():
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    out = yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
    parse_config(out, "<variant>")
    return out
