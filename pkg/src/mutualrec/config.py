"""Run configuration: a JSON document with fixed sections and fail-closed key checking."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .crm import CrmConfig
from .data import SyntheticSpec
from .errors import ConfigError, ContractError
from .evaluation import DEFAULT_KS, parse_policy
from .llm_proxy import LlmConfig
from .training import DistillConfig


@dataclass
class DataSection:
    path: str | None = None          # interaction CSV/TSV; None means synthetic
    format: str = "csv"
    has_header: bool = False
    dir: str | None = None           # prepared dataset directory (output of `prepare`)
    k_core: int = 5
    max_len: int = 50
    min_timestamp: int | None = None
    synthetic: dict = field(default_factory=lambda: asdict(SyntheticSpec()))


@dataclass
class CrmSection:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    dropout: float = 0.2
    ffn_mult: int = 1


@dataclass
class LlmSection:
    width: int = 128
    layers: int = 4
    heads: int = 4
    lora_rank: int = 8
    ffn_mult: int = 2
    pretrain_backbone: bool = True
    pretrain_epochs: int = 2


@dataclass
class EvalSection:
    ks: list[int] = field(default_factory=lambda: list(DEFAULT_KS))
    policy: str = "full-catalog"


@dataclass
class OutputSection:
    dir: str = "runs/default"


SECTIONS = {
    "data": DataSection,
    "crm": CrmSection,
    "llm": LlmSection,
    "distill": DistillConfig,
    "eval": EvalSection,
    "output": OutputSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    crm: CrmSection = field(default_factory=CrmSection)
    llm: LlmSection = field(default_factory=LlmSection)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        problems = _unknown_keys(doc)
        if problems:
            raise ConfigError(problems)
        cfg = cls()
        for name, section in doc.items():
            target = getattr(cfg, name)
            for key, value in section.items():
                setattr(target, key, copy.deepcopy(value))
        cfg.validate()
        return cfg

    def crm_config(self, num_items: int) -> CrmConfig:
        c = self.crm
        return CrmConfig(num_items, c.dim, c.layers, c.heads, self.data.max_len, c.dropout, c.ffn_mult)

    def llm_config(self, num_items: int) -> LlmConfig:
        c = self.llm
        return LlmConfig(num_items, self.crm.dim, c.width, c.layers, c.heads, self.data.max_len,
                         c.lora_rank, c.ffn_mult)

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.data.synthetic)

    def validate(self) -> None:
        problems = []
        d = self.data
        if d.format not in ("csv", "tsv"):
            problems.append(f"data.format must be csv or tsv, got {d.format!r}")
        if d.k_core < 1:
            problems.append("data.k_core must be >= 1")
        if d.max_len < 2:
            problems.append("data.max_len must be >= 2")
        if d.path is None and d.dir is None:
            bad = sorted(set(d.synthetic) - {f.name for f in fields(SyntheticSpec)})
            problems += [f"unknown key data.synthetic.{k}" for k in bad]
            if not bad:
                try:
                    SyntheticSpec(**d.synthetic).validate()
                except ContractError as exc:
                    problems.append(f"data.synthetic: {exc}")
        for name in ("dim", "layers", "heads"):
            if getattr(self.crm, name) < 1:
                problems.append(f"crm.{name} must be >= 1")
        if self.crm.heads >= 1 and self.crm.dim % self.crm.heads:
            problems.append("crm.dim must be divisible by crm.heads")
        if not 0.0 <= self.crm.dropout < 1.0:
            problems.append("crm.dropout must lie in [0, 1)")
        for name in ("width", "layers", "heads", "lora_rank", "ffn_mult"):
            if getattr(self.llm, name) < 1:
                problems.append(f"llm.{name} must be >= 1")
        if self.llm.heads >= 1 and self.llm.width % self.llm.heads:
            problems.append("llm.width must be divisible by llm.heads")
        if not self.eval.ks or any(int(k) < 1 for k in self.eval.ks):
            problems.append("eval.ks must be a non-empty list of positive integers")
        try:
            parse_policy(self.eval.policy)
        except ContractError as exc:
            problems.append(f"eval.policy: {exc}")
        try:
            self.distill.validate()
        except ConfigError as exc:
            problems += exc.problems
        if problems:
            raise ConfigError(problems)


def _unknown_keys(doc) -> list[str]:
    if not isinstance(doc, dict):
        return ["config document must be a JSON object"]
    problems = []
    for name, section in doc.items():
        if name not in SECTIONS:
            problems.append(f"unknown section {name!r}")
            continue
        if not isinstance(section, dict):
            problems.append(f"section {name!r} must be an object")
            continue
        known = {f.name for f in fields(SECTIONS[name])}
        problems += [f"unknown key {name}.{k}" for k in sorted(set(section) - known)]
    return problems


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)
