"""Experiment configuration: model, skills, synthetic data, training settings.

Config files are YAML (JSON is accepted too).  Unknown keys are errors so that
stale configs fail loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import yaml

from .data import LanguageSpec, TaskDataset, TaskRecipe, generate_corpus, generate_task_dataset, make_languages, vocab_size
from .model import ModelConfig, Variant
from .skills import (
    NEW_TASK_ROUTING,
    BENCHMARK_ROUTING,
    SkillMatrix,
    SkillTaxonomy,
    TaskSpec,
    TaskType,
    build_skill_matrix,
)
from .trainer import TrainHyper


class ConfigError(ValueError):
    pass


# train sizes of the eleven benchmark datasets, in thousands
TABLE_SIZES_K = {
    "mnli": 393, "qnli": 105, "sst2": 67.3, "squad": 11.5, "conll": 14, "ocnli": 50,
    "tnews": 53, "marc-de": 200, "wikiann-de": 20, "marc-es": 200, "squad-es": 88,
}
CLASS_COUNTS = {
    "mnli": 3, "qnli": 2, "sst2": 2, "conll": 7, "ocnli": 3, "tnews": 15,
    "marc-de": 5, "wikiann-de": 7, "marc-es": 5, "mrpc": 2, "wikiann-es": 7,
}
NEW_TASK_SIZES = {"mrpc": 3668, "wikiann-es": 2000}


@dataclass
class TaskEntry:
    """One row of the routing matrix together with its synthetic data recipe."""

    task_id: str
    type: str
    language: str
    num_classes: int
    train_size: int
    dev_size: int
    skills: list
    rule: str = "default"

    def recipe(self) -> TaskRecipe:
        return TaskRecipe(
            self.task_id, TaskType(self.type), self.language, self.num_classes,
            self.train_size, self.dev_size, self.rule,
        )

    def spec(self, taxonomy: SkillTaxonomy) -> TaskSpec:
        skills = frozenset(taxonomy.resolve(s) for s in self.skills)
        return TaskSpec(self.task_id, TaskType(self.type), self.language, self.num_classes, skills)


@dataclass
class LanguageSettings:
    size: int = 120
    zipf: float = 1.0
    tier: int = 8
    min_len: int = 5
    max_len: int = 12
    seed: int = 0


@dataclass
class PretrainSettings:
    steps: int = 0
    docs_per_language: int = 400
    languages: Optional[list] = None  # default: every taxonomy language
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class AdaptSettings:
    lr: float = 1e-3
    batch_size: int = 16
    step_grid: list = field(default_factory=lambda: [100, 200, 300, 500, 800, 1000])
    size_grid: list = field(default_factory=lambda: [1000, 2000, "all"])
    epochs: int = 3
    threshold: float = 90.0


@dataclass
class SweepSettings:
    alphas: list = field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    variants: list = field(default_factory=lambda: ["dense", "skill-ffn-mha"])
    steps: Optional[int] = None


@dataclass
class ExperimentConfig:
    model: ModelConfig
    languages: LanguageSettings
    tasks: list
    new_tasks: list
    train: TrainHyper
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    adapt: AdaptSettings = field(default_factory=AdaptSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    data_seed: int = 0
    output_dir: str = "runs/default"

    # derived objects ---------------------------------------------------------
    @property
    def taxonomy(self) -> SkillTaxonomy:
        return self.model.taxonomy

    def language_specs(self) -> list[LanguageSpec]:
        ls = self.languages
        return make_languages(
            self.taxonomy.languages, ls.size, ls.seed,
            zipf=ls.zipf, tier=ls.tier, min_len=ls.min_len, max_len=ls.max_len,
        )

    def language(self, tag: str) -> LanguageSpec:
        for lang in self.language_specs():
            if lang.tag == tag:
                return lang
        raise ConfigError(f"no language spec for {tag!r}")

    def skill_matrix(self) -> SkillMatrix:
        return build_skill_matrix([t.spec(self.taxonomy) for t in self.tasks], self.taxonomy)

    def new_task_specs(self) -> list[TaskSpec]:
        return [t.spec(self.taxonomy) for t in self.new_tasks]

    def datasets(self, entries: Optional[list] = None) -> dict[str, TaskDataset]:
        entries = self.tasks if entries is None else entries
        return {
            t.task_id: generate_task_dataset(t.recipe(), self.language(t.language), self.data_seed)
            for t in entries
        }

    def corpora(self) -> dict:
        langs = self.pretrain.languages or list(self.taxonomy.languages)
        return {
            tag: generate_corpus(self.language(tag), self.pretrain.docs_per_language, self.data_seed)
            for tag in langs
        }

    def with_variant(self, variant: Union[str, Variant]) -> "ExperimentConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, variant=Variant(variant)))

    def with_train(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    # validation --------------------------------------------------------------
    def validate(self) -> None:
        tax = self.taxonomy
        expected_vocab = vocab_size(self.language_specs())
        if self.model.vocab_size != expected_vocab:
            raise ConfigError(f"model.vocab_size {self.model.vocab_size} != language blocks {expected_vocab}")
        ids = [t.task_id for t in self.tasks + self.new_tasks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate task ids in {ids}")
        for t in self.tasks + self.new_tasks:
            if t.language not in tax.languages:
                raise ConfigError(f"task {t.task_id!r} uses language {t.language!r} without a language spec")
            try:
                spec = t.spec(tax)
                spec.validate(tax)
            except (KeyError, ValueError) as exc:
                raise ConfigError(f"task {t.task_id!r}: {exc}") from None
            if TaskType(t.type) is TaskType.SPAN_EXTRACTION and t.num_classes != self.model.max_len:
                raise ConfigError(f"span task {t.task_id!r} must declare num_classes = max_len")
        if self.pretrain.languages:
            for lang in self.pretrain.languages:
                if lang not in tax.languages:
                    raise ConfigError(f"pretrain language {lang!r} not in taxonomy")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # (de)serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        model = self.model.to_dict()
        taxonomy = model.pop("taxonomy")
        model.pop("vocab_size")
        return {
            "model": model,
            "taxonomy": taxonomy,
            "languages": dataclasses.asdict(self.languages),
            "tasks": [dataclasses.asdict(t) for t in self.tasks],
            "new_tasks": [dataclasses.asdict(t) for t in self.new_tasks],
            "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self.train).items()},
            "pretrain": dataclasses.asdict(self.pretrain),
            "adapt": dataclasses.asdict(self.adapt),
            "sweep": dataclasses.asdict(self.sweep),
            "data_seed": self.data_seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        allowed = {
            "model", "taxonomy", "languages", "tasks", "new_tasks", "train",
            "pretrain", "adapt", "sweep", "data_seed", "output_dir",
        }
        _reject_unknown("config", raw, allowed)
        tax_raw = raw.get("taxonomy", {})
        _reject_unknown("taxonomy", tax_raw, {"task_skills", "languages"})
        taxonomy = SkillTaxonomy(
            tuple(tax_raw.get("task_skills", SkillTaxonomy().task_skills)),
            tuple(tax_raw.get("languages", SkillTaxonomy().languages)),
        )
        languages = _build(LanguageSettings, raw.get("languages", {}), "languages")
        lang_blocks = make_languages(taxonomy.languages, languages.size, languages.seed)
        model_raw = dict(raw.get("model", {}))
        _reject_unknown("model", model_raw, {f.name for f in dataclasses.fields(ModelConfig)} - {"taxonomy", "vocab_size"})
        try:
            model = ModelConfig(taxonomy=taxonomy, vocab_size=vocab_size(lang_blocks), **model_raw)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        train_raw = dict(raw.get("train", {}))
        cfg = cls(
            model=model,
            languages=languages,
            tasks=[_build(TaskEntry, t, "tasks[]") for t in raw.get("tasks", [])],
            new_tasks=[_build(TaskEntry, t, "new_tasks[]") for t in raw.get("new_tasks", [])],
            train=_build(TrainHyper, train_raw, "train"),
            pretrain=_build(PretrainSettings, raw.get("pretrain", {}), "pretrain"),
            adapt=_build(AdaptSettings, raw.get("adapt", {}), "adapt"),
            sweep=_build(SweepSettings, raw.get("sweep", {}), "sweep"),
            data_seed=int(raw.get("data_seed", 0)),
            output_dir=str(raw.get("output_dir", "runs/default")),
        )
        if not cfg.tasks:
            raise ConfigError("config lists no tasks")
        cfg.validate()
        return cfg


def _reject_unknown(section: str, raw: dict, allowed: set) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section} must be a mapping")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _build(cls, raw: dict, section: str):
    _reject_unknown(section, raw, {f.name for f in dataclasses.fields(cls)})
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        raise ConfigError(f"{path} is empty")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def desk_config(scale: float = 50.0, dev_size: int = 200, steps: int = 5000, max_len: int = 32) -> ExperimentConfig:
    """Synthetic analogue of the eleven-task, four-language setup at desk scale."""
    tasks = []
    for task_id, tt, lang, skills in BENCHMARK_ROUTING:
        n_classes = max_len if tt is TaskType.SPAN_EXTRACTION else CLASS_COUNTS[task_id]
        tasks.append(
            {
                "task_id": task_id, "type": tt.value, "language": lang, "num_classes": n_classes,
                "train_size": max(1, round(TABLE_SIZES_K[task_id] * 1000 / scale)),
                "dev_size": dev_size, "skills": [f"t_s{k}" for k in skills] + [lang],
            }
        )
    new_tasks = []
    for task_id, tt, lang, skills in NEW_TASK_ROUTING:
        new_tasks.append(
            {
                "task_id": task_id, "type": tt.value, "language": lang,
                "num_classes": CLASS_COUNTS[task_id], "train_size": NEW_TASK_SIZES[task_id],
                "dev_size": dev_size, "skills": [f"t_s{k}" for k in skills] + [lang],
                "rule": "paraphrase" if task_id == "mrpc" else "default",
            }
        )
    return ExperimentConfig.from_dict(
        {
            "model": {"variant": "skill-ffn-mha", "layers": 2, "hidden": 64, "intermediate": 128,
                      "heads": 4, "max_len": max_len},
            "tasks": tasks,
            "new_tasks": new_tasks,
            "train": {"alpha": 0.4, "lr": 1e-3, "batch_size": 16, "max_steps": steps, "eval_every": 1000},
            "output_dir": "runs/desk",
        }
    )
