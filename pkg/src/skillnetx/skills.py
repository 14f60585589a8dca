"""Skill taxonomy, task specs, and the binary task-skill routing matrix."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)


class SkillKind(str, enum.Enum):
    TASK = "task"
    LANGUAGE = "language"


@dataclass(frozen=True, order=True)
class SkillId:
    kind: SkillKind
    index: int  # 1-based within kind

    def __str__(self) -> str:
        return f"{'t' if self.kind is SkillKind.TASK else 'l'}_s{self.index}"

    @classmethod
    def parse(cls, name: str) -> "SkillId":
        name = name.strip()
        if len(name) < 4 or name[1:3] != "_s" or name[0] not in "tl":
            raise ValueError(f"bad skill name {name!r}; expected t_sK or l_sK")
        kind = SkillKind.TASK if name[0] == "t" else SkillKind.LANGUAGE
        index = int(name[3:])
        if index < 1:
            raise ValueError(f"skill index must be >= 1 in {name!r}")
        return cls(kind, index)


def task_skill(i: int) -> SkillId:
    return SkillId(SkillKind.TASK, i)


def language_skill(i: int) -> SkillId:
    return SkillId(SkillKind.LANGUAGE, i)


DEFAULT_TASK_SKILLS = (
    "generic skill",
    "get the semantic meaning of a token",
    "get the semantic meaning of a sentence",
    "understand how two text segments interact",
    "understand the sentiment of text",
    "understand natural language questions",
)
DEFAULT_LANGUAGES = ("en", "zh", "de", "es")


@dataclass(frozen=True)
class SkillTaxonomy:
    """Skill names and counts.  Columns are task skills first, then languages."""

    task_skills: tuple = DEFAULT_TASK_SKILLS
    languages: tuple = DEFAULT_LANGUAGES

    def __post_init__(self):
        if not self.task_skills or not self.languages:
            raise ValueError("taxonomy needs at least one task skill and one language")
        if len(set(self.languages)) != len(self.languages):
            raise ValueError(f"duplicate language tags in {self.languages}")

    @property
    def n_task(self) -> int:
        return len(self.task_skills)

    @property
    def n_language(self) -> int:
        return len(self.languages)

    @property
    def n_total(self) -> int:
        return self.n_task + self.n_language

    def skills(self) -> list[SkillId]:
        return [task_skill(i + 1) for i in range(self.n_task)] + [
            language_skill(i + 1) for i in range(self.n_language)
        ]

    def __contains__(self, skill: SkillId) -> bool:
        limit = self.n_task if skill.kind is SkillKind.TASK else self.n_language
        return 1 <= skill.index <= limit

    def column(self, skill: SkillId) -> int:
        if skill not in self:
            raise KeyError(f"skill {skill} not in taxonomy")
        if skill.kind is SkillKind.TASK:
            return skill.index - 1
        return self.n_task + skill.index - 1

    def language_skill(self, lang: str) -> SkillId:
        try:
            return language_skill(self.languages.index(lang) + 1)
        except ValueError:
            raise KeyError(f"language {lang!r} not in taxonomy {self.languages}") from None

    def language_of(self, skill: SkillId) -> str:
        if skill.kind is not SkillKind.LANGUAGE or skill not in self:
            raise KeyError(f"{skill} is not a language skill of this taxonomy")
        return self.languages[skill.index - 1]

    def resolve(self, name: Union[str, SkillId]) -> SkillId:
        """Accept ``t_s3``, ``l_s2``, a language tag such as ``zh``, or a SkillId."""
        if isinstance(name, SkillId):
            skill = name
        elif name in self.languages:
            skill = self.language_skill(name)
        else:
            skill = SkillId.parse(name)
        if skill not in self:
            raise KeyError(f"skill {skill} not in taxonomy")
        return skill


class TaskType(str, enum.Enum):
    PAIR_CLASSIFICATION = "pair_classification"
    CLASSIFICATION = "classification"
    TOKEN_CLASSIFICATION = "token_classification"
    SPAN_EXTRACTION = "span_extraction"
    MLM = "mlm"
    NSP = "nsp"

    @property
    def is_sentence_level(self) -> bool:
        return self in (TaskType.PAIR_CLASSIFICATION, TaskType.CLASSIFICATION, TaskType.NSP)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    task_type: TaskType
    language: str
    num_classes: int
    skills: frozenset = field(default_factory=frozenset)

    @property
    def task_skills(self) -> list[SkillId]:
        return sorted(s for s in self.skills if s.kind is SkillKind.TASK)

    @property
    def language_skills(self) -> list[SkillId]:
        return sorted(s for s in self.skills if s.kind is SkillKind.LANGUAGE)

    def validate(self, taxonomy: Optional[SkillTaxonomy] = None) -> None:
        if len(self.language_skills) != 1:
            raise ValueError(
                f"task {self.task_id!r} activates {len(self.language_skills)} language skills; exactly one required"
            )
        if not self.task_skills:
            raise ValueError(f"task {self.task_id!r} activates no task skill")
        if taxonomy is None:
            return
        for s in self.skills:
            if s not in taxonomy:
                raise ValueError(f"task {self.task_id!r} references unknown skill {s}")
        if self.language in taxonomy.languages:
            expected = taxonomy.language_skill(self.language)
            if self.language_skills[0] != expected:
                raise ValueError(
                    f"task {self.task_id!r} is {self.language} but activates {self.language_skills[0]}"
                )


def make_spec(
    task_id: str,
    task_type: Union[TaskType, str],
    language: str,
    num_classes: int,
    task_skills: Iterable[Union[int, str]],
    taxonomy: SkillTaxonomy = SkillTaxonomy(),
) -> TaskSpec:
    """Build a spec whose language skill follows ``language``."""
    skills = {
        task_skill(s) if isinstance(s, int) else taxonomy.resolve(s) for s in task_skills
    }
    skills.add(taxonomy.language_skill(language))
    return TaskSpec(task_id, TaskType(task_type), language, int(num_classes), frozenset(skills))


@dataclass(frozen=True)
class SkillMask:
    """One row of the routing matrix, split into its task and language parts."""

    bits: tuple
    n_task: int

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int8)

    @property
    def task_bits(self) -> tuple:
        return self.bits[: self.n_task]

    @property
    def language_bits(self) -> tuple:
        return self.bits[self.n_task:]

    @property
    def language_index(self) -> int:
        """0-based index of the single active language skill."""
        on = [i for i, b in enumerate(self.language_bits) if b]
        if len(on) != 1:
            raise ValueError(f"mask has {len(on)} active language skills")
        return on[0]

    @property
    def language(self) -> SkillId:
        return language_skill(self.language_index + 1)

    @property
    def active_task_skills(self) -> list[SkillId]:
        return [task_skill(i + 1) for i, b in enumerate(self.task_bits) if b]

    def popcount(self) -> int:
        return int(sum(self.bits))

    def describe(self) -> str:
        names = [str(s) for s in self.active_task_skills]
        return ",".join(names) + f"+{self.language}"

    @classmethod
    def from_skills(cls, skills: Iterable[SkillId], taxonomy: SkillTaxonomy) -> "SkillMask":
        bits = [0] * taxonomy.n_total
        for s in skills:
            bits[taxonomy.column(s)] = 1
        return cls(tuple(bits), taxonomy.n_task)


@dataclass(frozen=True)
class SkillMatrix:
    tasks: tuple
    matrix: np.ndarray
    taxonomy: SkillTaxonomy

    def index(self, task_id: str) -> int:
        for i, t in enumerate(self.tasks):
            if t.task_id == task_id:
                return i
        raise KeyError(f"unknown task_id {task_id!r}")

    def spec(self, task_id: str) -> TaskSpec:
        return self.tasks[self.index(task_id)]

    @property
    def task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks]

    def row_skills(self, i: int) -> frozenset:
        cols = self.taxonomy.skills()
        return frozenset(cols[j] for j in np.flatnonzero(self.matrix[i]))

    def with_task(self, spec: TaskSpec) -> "SkillMatrix":
        """A new matrix with ``spec`` appended (used when adapting to new tasks)."""
        return build_skill_matrix(list(self.tasks) + [spec], self.taxonomy)


def build_skill_matrix(specs: Iterable[TaskSpec], taxonomy: SkillTaxonomy = SkillTaxonomy()) -> SkillMatrix:
    specs = tuple(specs)
    seen = set()
    for s in specs:
        if s.task_id in seen:
            raise ValueError(f"duplicate task_id {s.task_id!r}")
        seen.add(s.task_id)
        s.validate(taxonomy)
    matrix = np.zeros((len(specs), taxonomy.n_total), dtype=np.int8)
    for i, s in enumerate(specs):
        for skill in s.skills:
            matrix[i, taxonomy.column(skill)] = 1
    matrix.setflags(write=False)
    return SkillMatrix(specs, matrix, taxonomy)


def active_skill_mask(m: SkillMatrix, task_id: str) -> SkillMask:
    return SkillMask(tuple(int(b) for b in m.matrix[m.index(task_id)]), m.taxonomy.n_task)


# ----------------------------------------------------------------- perturbations


@dataclass(frozen=True)
class Identity:
    def __str__(self):
        return "identity"


@dataclass(frozen=True)
class LanguageSwap:
    target: str  # language tag or l_sK

    def __str__(self):
        return f"language->{self.target}"


@dataclass(frozen=True)
class AllTaskSkills:
    def __str__(self):
        return "all-task-skills"


@dataclass(frozen=True)
class RandomTaskSkills:
    seed: int
    p: float = 0.5

    def __str__(self):
        return f"random-task-skills(seed={self.seed})"


Perturbation = Union[Identity, LanguageSwap, AllTaskSkills, RandomTaskSkills]


def perturbed_mask(m: SkillMatrix, task_id: str, perturbation: Perturbation) -> SkillMask:
    base = active_skill_mask(m, task_id)
    tax = m.taxonomy
    bits = list(base.bits)
    if isinstance(perturbation, Identity):
        return base
    if isinstance(perturbation, LanguageSwap):
        target = tax.resolve(perturbation.target)
        if target.kind is not SkillKind.LANGUAGE:
            raise ValueError(f"swap target {target} is not a language skill")
        bits[tax.n_task + base.language_index] = 0
        bits[tax.column(target)] = 1
    elif isinstance(perturbation, AllTaskSkills):
        bits[: tax.n_task] = [1] * tax.n_task
    elif isinstance(perturbation, RandomTaskSkills):
        # keyed by task position so one seed gives each task its own draw
        rng = np.random.default_rng([perturbation.seed, m.index(task_id)])
        while True:
            draw = (rng.random(tax.n_task) < perturbation.p).astype(int)
            if draw.any():
                break
            logger.info("random task-skill draw for %s was empty; redrawing", task_id)
        bits[: tax.n_task] = [int(b) for b in draw]
    else:
        raise TypeError(f"unknown perturbation {perturbation!r}")
    return SkillMask(tuple(bits), tax.n_task)


# ----------------------------------------------------------------- benchmark routing

# task_id, type, language, task skills for the eleven benchmark tasks
BENCHMARK_ROUTING = (
    ("mnli", TaskType.PAIR_CLASSIFICATION, "en", (1, 3, 4)),
    ("qnli", TaskType.PAIR_CLASSIFICATION, "en", (1, 3, 4, 6)),
    ("sst2", TaskType.CLASSIFICATION, "en", (1, 3, 5)),
    ("squad", TaskType.SPAN_EXTRACTION, "en", (1, 2, 4, 6)),
    ("conll", TaskType.TOKEN_CLASSIFICATION, "en", (1, 2)),
    ("ocnli", TaskType.PAIR_CLASSIFICATION, "zh", (1, 3)),
    ("tnews", TaskType.CLASSIFICATION, "zh", (1, 3)),
    ("marc-de", TaskType.CLASSIFICATION, "de", (1, 3)),
    ("wikiann-de", TaskType.TOKEN_CLASSIFICATION, "de", (1, 2)),
    ("marc-es", TaskType.CLASSIFICATION, "es", (1, 3)),
    ("squad-es", TaskType.SPAN_EXTRACTION, "es", (1, 2, 4, 6)),
)

NEW_TASK_ROUTING = (
    ("mrpc", TaskType.PAIR_CLASSIFICATION, "en", (1, 3, 4)),
    ("wikiann-es", TaskType.TOKEN_CLASSIFICATION, "es", (1, 2)),
)

MLM_SKILLS = (1, 2)
NSP_SKILLS = (1, 3, 4)
