"""Flat ``key=value`` run configuration.

One pair per line, ``#`` starts a comment.  Keys and defaults:

==============  ================  ==================================================
key             default           meaning
==============  ================  ==================================================
model           mlp               ``mlp`` or ``cnn``
dataset         blobs             ``blobs`` or ``cifar10``
data_path       (empty)           directory with the CIFAR-10 ``*.bin`` batches
train_n         1000              training examples (blobs points / CIFAR subset)
test_n          500               held-out examples
classes         2                 blobs classes
cifar_classes   (empty)           comma list restricting CIFAR labels, e.g. ``0,1,2``
spread          0.1               blobs cluster standard deviation
offset          0.0               blobs translation (a second domain)
hidden          32,32             MLP hidden sizes
widths          16,32,64,64       CNN conv widths
bits            4                 index bits per quantized weight
k               0                 mixture components K+1 (0 means 2**bits)
tau_init        0.01              initial temperature
tau_mode        fixed             ``fixed`` or ``learned``
gamma_init      empirical:0.01    ``std`` or ``empirical:VALUE``
pi_mode         simplex           ``simplex`` or ``unconstrained``
freeze_gm       0                 1 keeps every mixture parameter fixed
lr_max          0.01              one-cycle peak learning rate
momentum        0.9
weight_decay    0.0005            applied to network parameters only
epochs          30
batch           64
seed            0
skip_layers     (empty)           extra layers to keep in full precision; the first
                                  and last weight layers are always skipped
act_bits        32                activation bits at evaluation (32 = off)
==============  ================  ==================================================
"""
from __future__ import annotations

from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    model: str = "mlp"
    dataset: str = "blobs"
    data_path: str = ""
    train_n: int = 1000
    test_n: int = 500
    classes: int = 2
    cifar_classes: str = ""
    spread: float = 0.1
    offset: float = 0.0
    hidden: str = "32,32"
    widths: str = "16,32,64,64"
    bits: int = 4
    k: int = 0
    tau_init: float = 0.01
    tau_mode: str = "fixed"
    gamma_init: str = "empirical:0.01"
    pi_mode: str = "simplex"
    freeze_gm: int = 0
    lr_max: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch: int = 64
    seed: int = 0
    skip_layers: str = ""
    act_bits: int = 32

    def __post_init__(self):
        choices = {"model": ("mlp", "cnn"), "dataset": ("blobs", "cifar10"),
                   "tau_mode": ("fixed", "learned"), "pi_mode": ("simplex", "unconstrained")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        self.gamma  # validates
        if self.bits < 1 or self.epochs < 0 or self.batch < 1 or self.lr_max <= 0:
            raise ConfigError("bits >= 1, epochs >= 0, batch >= 1 and lr_max > 0 are required")
        if self.tau_init <= 0:
            raise ConfigError("tau_init must be positive")

    @property
    def gamma(self) -> tuple[str, float]:
        mode, _, val = self.gamma_init.partition(":")
        if mode == "std" and not val:
            return "std", 0.0
        if mode == "empirical":
            try:
                v = float(val or 0.01)
            except ValueError:
                raise ConfigError(f"bad gamma_init {self.gamma_init!r}") from None
            if v <= 0:
                raise ConfigError("empirical gamma must be positive")
            return "empirical", v
        raise ConfigError(f"gamma_init must be 'std' or 'empirical:VALUE', got {self.gamma_init!r}")

    @staticmethod
    def _ints(s: str) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in s.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"expected a comma list of integers, got {s!r}") from None

    @property
    def hidden_sizes(self):
        return self._ints(self.hidden)

    @property
    def conv_widths(self):
        return self._ints(self.widths)

    @property
    def cifar_class_list(self):
        return self._ints(self.cifar_classes) or None

    @property
    def skip(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.skip_layers.split(",") if s.strip())

    def replace(self, **kw) -> "Config":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return Config(**d)

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def parse_pairs(lines, source="<config>") -> dict:
    types = {f.name: f.type for f in fields(Config)}
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        conv = {"int": int, "float": float}.get(types[key], str)
        try:
            out[key] = conv(val)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: {key} expects {types[key]}, got {val!r}") from None
    return out


def load_config(path=None, overrides=()) -> Config:
    pairs = {}
    if path is not None:
        try:
            with open(path) as fh:
                pairs.update(parse_pairs(fh, str(path)))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    pairs.update(parse_pairs(overrides, "<override>"))
    return Config(**pairs)
