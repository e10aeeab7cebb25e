"""Experiment configuration.

The config file is TOML restricted to plain ``key = value`` pairs, plus an
optional ``[synthetic]`` table for the data generator. Every key and its
default is a field of :class:`Config` or :class:`~mtm.tasks.SyntheticConfig`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .metalearn import HyperParams
from .pretrain import PretrainConfig
from .seeding import derive_seed as derive
from .tasks import SyntheticConfig, domain_names


class ConfigError(ValueError):
    pass


# fields that locate files rather than shape results; excluded from fingerprints
PATH_FIELDS = ("data_dir", "out_dir")


@dataclass(frozen=True)
class Config:
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs"

    embed_dim: int = 16
    hidden_dim: int = 16
    c_max: int = 2
    max_len: int = 16
    min_count: int = 1

    pretrain_steps: int = 15000
    pretrain_batch_size: int = 32
    pretrain_lr: float = 0.05
    mask_rate: float = 0.15

    alpha: float = 1.0
    beta: float = 0.2
    inner_steps: int = 1
    task_batch_size: int = 4
    meta_iterations: int = 100
    first_order: bool = False
    early_stop: bool = False
    k_shot: int = 5
    q_query: int = 5

    eval_alpha: float | None = None
    eval_inner_steps: int | None = None

    test_domains: tuple = ()
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)

    def validate(self) -> Config:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.seed >= 0, "seed must be >= 0")
        need(min(self.embed_dim, self.hidden_dim, self.max_len, self.min_count) >= 1, "encoder dims must be >= 1")
        need(self.c_max >= 2, "c_max must be >= 2")
        need(self.pretrain_steps >= 0, "pretrain_steps must be >= 0")
        need(self.pretrain_batch_size >= 1, "pretrain_batch_size must be >= 1")
        need(self.pretrain_lr > 0, "pretrain_lr must be > 0")
        need(0 < self.mask_rate <= 1, "mask_rate must be in (0, 1]")
        need(self.eval_alpha is None or self.eval_alpha >= 0, "eval_alpha must be >= 0")
        need(self.eval_inner_steps is None or self.eval_inner_steps >= 1, "eval_inner_steps must be >= 1")
        need(len(self.resolved_test_domains()) >= 1, "test_domains is empty")
        try:
            self.hyperparams().validate()
            if self.synthetic is not None:
                self.synthetic.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.synthetic is not None and self.test_domains:
            expected = domain_names(self.synthetic.num_domains)[self.synthetic.num_domains - self.synthetic.test_domains :]
            need(sorted(self.test_domains) == expected, f"test_domains {list(self.test_domains)} disagree with the generator's {expected}")
        return self

    def resolved_test_domains(self) -> tuple:
        if self.test_domains:
            return tuple(self.test_domains)
        if self.synthetic is None:
            return ()
        n = self.synthetic.num_domains
        return tuple(domain_names(n)[n - self.synthetic.test_domains :])

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            alpha=self.alpha,
            beta=self.beta,
            inner_steps=self.inner_steps,
            task_batch_size=self.task_batch_size,
            meta_iterations=self.meta_iterations,
            first_order=self.first_order,
            k_shot=self.k_shot,
            q_query=self.q_query,
            seed=derive(self.seed, "metatrain"),
            early_stop=self.early_stop,
        )

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            steps=self.pretrain_steps,
            batch_size=self.pretrain_batch_size,
            lr=self.pretrain_lr,
            mask_rate=self.mask_rate,
            seed=derive(self.seed, "pretrain"),
        )

    def synthetic_config(self) -> SyntheticConfig:
        if self.synthetic is None:
            raise ConfigError("no [synthetic] generator config")
        return dataclasses.replace(self.synthetic, seed=derive(self.seed, "data"))

    @property
    def eval_settings(self) -> tuple[float, int]:
        alpha = self.alpha if self.eval_alpha is None else self.eval_alpha
        steps = self.inner_steps if self.eval_inner_steps is None else self.eval_inner_steps
        return alpha, steps

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["test_domains"] = list(self.test_domains)
        return d

    def fingerprint(self) -> str:
        d = {k: v for k, v in self.as_dict().items() if k not in PATH_FIELDS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def from_mapping(raw: dict) -> Config:
    raw = dict(raw)
    known = {f.name for f in dataclasses.fields(Config)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    syn = raw.pop("synthetic", {})
    if syn is None or syn is False:
        synthetic = None
    else:
        syn_known = {f.name for f in dataclasses.fields(SyntheticConfig)} - {"seed"}
        bad = set(syn) - syn_known
        if bad:
            raise ConfigError(f"unknown [synthetic] keys: {sorted(bad)}")
        synthetic = SyntheticConfig(**syn)
    if "test_domains" in raw:
        raw["test_domains"] = tuple(raw["test_domains"])
    try:
        cfg = Config(synthetic=synthetic, **raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    _check_types(cfg)
    return cfg


def _check_types(cfg: Config):
    for f in dataclasses.fields(Config):
        value = getattr(cfg, f.name)
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{f.name} must be true/false")
        if isinstance(default, int) and not isinstance(default, bool) and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{f.name} must be an integer")
        if isinstance(default, float) and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{f.name} must be a number")
    if cfg.synthetic is not None:
        for f in dataclasses.fields(SyntheticConfig):
            value = getattr(cfg.synthetic, f.name)
            if isinstance(f.default, float) and not isinstance(value, (int, float)):
                raise ConfigError(f"synthetic.{f.name} must be a number")
            if isinstance(f.default, int) and not isinstance(value, int):
                raise ConfigError(f"synthetic.{f.name} must be an integer")


def parse_override(item: str) -> tuple[str, object]:
    """``key=value`` with a TOML value; bare words are taken as strings."""
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not key=value")
    key = key.strip()
    try:
        parsed = tomllib.loads(f"v = {value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value.strip()
    return key, parsed


def load_config(path=None, overrides=()) -> Config:
    raw: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        key, value = parse_override(item)
        if key.startswith("synthetic."):
            raw.setdefault("synthetic", {})[key.split(".", 1)[1]] = value
        else:
            raw[key] = value
    return from_mapping(raw).validate()
