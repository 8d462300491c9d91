"""Scenario files: strict JSON schema with defaults.

Every section is a frozen dataclass. Unknown keys, wrong types and out-of-range
values raise ``ScenarioError`` carrying a JSON-pointer path to the offending
field. ``snr_db: null`` in JSON means the noise-free channel.
"""
from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .channel import KINDS as CHANNEL_KINDS
from .channel import ChannelParams
from .errors import ConfigurationError

FED_MECHANISMS = ("fedavg", "krum", "robust", "none")
TRUST_MECHANISMS = ("audit_trust", "trust_no_audit", "krum", "none")
ATTACK_KINDS = ("none", "untargeted", "targeted", "label_flip")


class ScenarioError(ConfigurationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '/'}: {message}")
        self.path = path or "/"


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    fraction: float = 0.0
    strength: float = 100.0  # untargeted noise std, in multiples of the honest delta std
    target_class: int = 0
    substitute_class: int = 3
    flip_pair: typing.Optional[typing.List[int]] = None

    def adversary_count(self, client_count: int) -> int:
        if self.kind == "none":
            return 0
        return int(math.floor(self.fraction * client_count + 1e-9))

    def validate(self, path):
        _choice(path, "kind", self.kind, ATTACK_KINDS)
        _bounded(path, "fraction", self.fraction, 0.0, 1.0)
        if self.strength <= 0:
            raise ScenarioError(f"{path}/strength", "must be > 0")
        if self.target_class < 0 or self.substitute_class < 0:
            raise ScenarioError(f"{path}/target_class", "class ids must be >= 0")
        if self.flip_pair is not None and (len(self.flip_pair) != 2 or min(self.flip_pair) < 0):
            raise ScenarioError(f"{path}/flip_pair", "must be two non-negative class ids")


@dataclass(frozen=True)
class CodecSection:
    latent_dim: int = 16
    hidden: int = 64
    epochs: int = 40
    lr: float = 4.0
    batch_size: int = 16
    train_size: int = 400
    test_size: int = 200

    def validate(self, path):
        for name in ("latent_dim", "hidden", "epochs", "batch_size", "train_size", "test_size"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{path}/{name}", "must be >= 1")
        if self.lr < 0:
            raise ScenarioError(f"{path}/lr", "must be >= 0")


@dataclass(frozen=True)
class CamouflageSection:
    epsilon: typing.Optional[float] = None
    lam: float = 1.0
    epochs: int = 20
    lr: float = 2.0
    batch_size: int = 16
    hidden: int = 64
    policy: str = "next_class"
    trials: int = 3
    judge_epochs: int = 30

    def validate(self, path):
        if self.epsilon is not None and self.epsilon < 0:
            raise ScenarioError(f"{path}/epsilon", "must be >= 0")
        if self.lam < 0:
            raise ScenarioError(f"{path}/lam", "must be >= 0")
        for name in ("epochs", "batch_size", "hidden", "trials", "judge_epochs"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{path}/{name}", "must be >= 1")
        _choice(path, "policy", self.policy, ("next_class",))


@dataclass(frozen=True)
class FederationSection:
    rounds: int = 20
    mechanism: str = "robust"
    samples_per_client: int = 40
    local_epochs: int = 8
    local_lr: float = 4.0
    batch_size: int = 40
    eval_size: int = 80
    test_size: int = 200
    tau_sep: float = 0.05
    krum_f: typing.Optional[int] = None

    def validate(self, path):
        for name in ("rounds", "samples_per_client", "batch_size", "eval_size", "test_size"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{path}/{name}", "must be >= 1")
        if self.local_epochs < 0:
            raise ScenarioError(f"{path}/local_epochs", "must be >= 0")
        _choice(path, "mechanism", self.mechanism, FED_MECHANISMS)
        if self.tau_sep < 0:
            raise ScenarioError(f"{path}/tau_sep", "must be >= 0")
        if self.krum_f is not None and self.krum_f < 0:
            raise ScenarioError(f"{path}/krum_f", "must be >= 0")


@dataclass(frozen=True)
class PayoffSection:
    c_high: float = 1.0
    c_low: float = 0.0
    g: float = 3.0
    f: float = 1.0
    c_audit: float = 0.2
    loss_l: float = 1.0

    def validate(self, path):
        for name in ("c_high", "g", "f", "c_audit", "loss_l"):
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{path}/{name}", "must be > 0")
        if self.c_low < 0:
            raise ScenarioError(f"{path}/c_low", "must be >= 0")
        if self.c_low > self.c_high:
            raise ScenarioError(f"{path}/c_low", "must not exceed c_high")


@dataclass(frozen=True)
class GameSection:
    payoffs: PayoffSection = field(default_factory=PayoffSection)
    alpha: float = 0.1
    beta: float = 0.2
    initial_trust: float = 0.5
    theta: float = 0.7
    min_rounds: int = 5
    exclusion_trust: float = 0.3
    declared_p_floor: float = 0.3
    assessor_count: int = 3
    rounds: int = 20
    mechanism: str = "audit_trust"
    untrustworthy_fraction: float = 0.4
    dataset: str = "shapes8"
    samples_per_client: int = 40
    local_epochs: int = 2
    local_lr: float = 0.5
    hidden: int = 32
    batch_size: int = 16
    test_size: int = 400

    def validate(self, path):
        for name in ("alpha", "beta", "initial_trust", "theta", "exclusion_trust",
                     "declared_p_floor", "untrustworthy_fraction"):
            _bounded(path, name, getattr(self, name), 0.0, 1.0)
        for name in ("assessor_count", "rounds", "samples_per_client", "hidden", "batch_size", "test_size"):
            if getattr(self, name) < 1:
                raise ScenarioError(f"{path}/{name}", "must be >= 1")
        if self.min_rounds < 0 or self.local_epochs < 0:
            raise ScenarioError(f"{path}/min_rounds", "must be >= 0")
        if self.local_lr < 0:
            raise ScenarioError(f"{path}/local_lr", "must be >= 0")
        _choice(path, "mechanism", self.mechanism, TRUST_MECHANISMS)


@dataclass(frozen=True)
class SweepSection:
    snr_db: typing.List[float] = field(default_factory=lambda: [20.0, 15.0, 10.0, 5.0, 0.0])
    channel_kind: str = "rician"
    k_factor: float = 4.0

    def validate(self, path):
        if not self.snr_db:
            raise ScenarioError(f"{path}/snr_db", "must list at least one SNR")
        _choice(path, "channel_kind", self.channel_kind, CHANNEL_KINDS)
        if self.k_factor < 0:
            raise ScenarioError(f"{path}/k_factor", "must be >= 0")


@dataclass(frozen=True)
class OverheadSection:
    frames: int = 10000

    def validate(self, path):
        if self.frames < 1:
            raise ScenarioError(f"{path}/frames", "must be >= 1")


@dataclass(frozen=True)
class OutputSection:
    dir: typing.Optional[str] = None
    csv: bool = True
    json: bool = True
    kept_csv: bool = False


@dataclass(frozen=True)
class Scenario:
    master_seed: int = 0
    vehicle_count: int = 10
    dataset: str = "shapes4"
    image_side: int = 16
    attack: AttackSpec = field(default_factory=AttackSpec)
    legit_channel: ChannelParams = field(default_factory=lambda: ChannelParams("rician", 4.0, 15.0))
    eaves_channel: ChannelParams = field(default_factory=lambda: ChannelParams("rayleigh", 0.0, 0.0))
    codec: CodecSection = field(default_factory=CodecSection)
    camouflage: CamouflageSection = field(default_factory=CamouflageSection)
    federation: FederationSection = field(default_factory=FederationSection)
    game: GameSection = field(default_factory=GameSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    overhead: OverheadSection = field(default_factory=OverheadSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self, path=""):
        if self.vehicle_count < 1:
            raise ScenarioError(f"{path}/vehicle_count", "must be >= 1")
        if self.image_side < 2:
            raise ScenarioError(f"{path}/image_side", "must be >= 2")
        from .codec import GENERATORS  # local import: codec imports channel only

        for name, spec in (("dataset", self.dataset), ("game/dataset", self.game.dataset)):
            if spec not in GENERATORS:
                raise ScenarioError(f"{path}/{name}", f"unknown generator {spec!r}")
        if self.codec.latent_dim >= self.image_side ** 2:
            raise ScenarioError(f"{path}/codec/latent_dim", "must be smaller than image_side^2")

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# generic strict loader


def _choice(path, name, value, options):
    if value not in options:
        raise ScenarioError(f"{path}/{name}", f"{value!r} not one of {list(options)}")


def _bounded(path, name, value, lo, hi):
    if not lo <= value <= hi:
        raise ScenarioError(f"{path}/{name}", f"must be in [{lo}, {hi}], got {value}")


def _convert(tp, value, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, path)
    if origin in (list, typing.List):
        if not isinstance(value, list):
            raise ScenarioError(path, "expected an array")
        (item,) = typing.get_args(tp)
        return [_convert(item, v, f"{path}/{i}") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        return _load(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ScenarioError(path, "expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ScenarioError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioError(path, "expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ScenarioError(path, "expected a string")
        return value
    raise ScenarioError(path, f"unsupported field type {tp}")


def _load(cls, data, path):
    if not isinstance(data, dict):
        raise ScenarioError(path, "expected an object")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in names:
            raise ScenarioError(f"{path}/{key}", "unknown key")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        value = data[name]
        if cls is ChannelParams and name == "snr_db" and value is None:
            kwargs[name] = math.inf
            continue
        kwargs[name] = _convert(hints[name], value, f"{path}/{name}")
    try:
        obj = cls(**kwargs)
    except ConfigurationError as exc:
        raise ScenarioError(path, str(exc)) from None
    if hasattr(obj, "validate"):
        obj.validate(path)
    return obj


def scenario_from_dict(data: dict) -> Scenario:
    return _load(Scenario, data, "")


def parse_scenario(source) -> Scenario:
    """Parse a scenario from a path or an already-decoded JSON object."""
    if not isinstance(source, (str, bytes)) and not hasattr(source, "__fspath__"):
        return scenario_from_dict(source)
    try:
        text = Path(source).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ScenarioError("", f"not UTF-8: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("", f"invalid JSON: {exc}") from None
    return scenario_from_dict(data)


def scenario_to_dict(scn: Scenario) -> dict:
    def enc(obj):
        if dataclasses.is_dataclass(obj):
            out = {}
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if isinstance(obj, ChannelParams) and f.name == "snr_db" and value == math.inf:
                    value = None
                out[f.name] = enc(value)
            return out
        if isinstance(obj, (list, tuple)):
            return [enc(v) for v in obj]
        return obj

    return enc(scn)


def dump_scenario(scn: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scn), indent=2) + "\n", encoding="utf-8")
