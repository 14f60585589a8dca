import pytest
from hypothesis import given
from hypothesis import strategies as st

from skillnetx.skills import (
    BENCHMARK_ROUTING,
    NEW_TASK_ROUTING,
    AllTaskSkills,
    Identity,
    LanguageSwap,
    RandomTaskSkills,
    SkillId,
    SkillKind,
    SkillTaxonomy,
    TaskSpec,
    TaskType,
    active_skill_mask,
    build_skill_matrix,
    language_skill,
    make_spec,
    perturbed_mask,
    task_skill,
)

TAX = SkillTaxonomy()


def benchmark_matrix():
    return build_skill_matrix([make_spec(t, tt, lang, 3, sk) for t, tt, lang, sk in BENCHMARK_ROUTING])


def names(mask):
    return {str(s) for s in mask.active_task_skills}, str(mask.language)


def test_default_taxonomy_counts_and_columns():
    assert (TAX.n_task, TAX.n_language, TAX.n_total) == (6, 4, 10)
    assert [str(s) for s in TAX.skills()][:2] == ["t_s1", "t_s2"]
    assert TAX.column(language_skill(1)) == 6
    assert TAX.resolve("zh") == language_skill(2)
    assert TAX.resolve("t_s5") == task_skill(5)


def test_extended_taxonomy_needs_no_code_change():
    tax = SkillTaxonomy(task_skills=("a", "b", "c"), languages=("en", "fr", "ja", "ru", "sw"))
    spec = make_spec("x", TaskType.CLASSIFICATION, "sw", 2, [1, 3], tax)
    m = build_skill_matrix([spec], tax)
    assert m.matrix.shape == (1, 8)
    assert active_skill_mask(m, "x").language == language_skill(5)


def test_skill_name_round_trip_and_errors():
    for s in TAX.skills():
        assert SkillId.parse(str(s)) == s
    with pytest.raises(ValueError):
        SkillId.parse("x_s1")
    with pytest.raises(KeyError):
        TAX.resolve("t_s7")
    with pytest.raises(KeyError):
        TAX.language_skill("fr")


def test_squad_like_row():
    m = benchmark_matrix()
    assert names(active_skill_mask(m, "squad")) == ({"t_s1", "t_s2", "t_s4", "t_s6"}, "l_s1")


def test_german_ner_row():
    m = benchmark_matrix()
    assert names(active_skill_mask(m, "wikiann-de")) == ({"t_s1", "t_s2"}, "l_s3")


def test_mnli_and_sst2_rows():
    m = benchmark_matrix()
    assert names(active_skill_mask(m, "mnli")) == ({"t_s1", "t_s3", "t_s4"}, "l_s1")
    assert names(active_skill_mask(m, "sst2")) == ({"t_s1", "t_s3", "t_s5"}, "l_s1")


def test_new_task_rows():
    specs = {t: make_spec(t, tt, lang, 2, sk) for t, tt, lang, sk in NEW_TASK_ROUTING}
    assert {str(s) for s in specs["mrpc"].skills} == {"t_s1", "t_s3", "t_s4", "l_s1"}
    assert {str(s) for s in specs["wikiann-es"].skills} == {"t_s1", "t_s2", "l_s4"}


def test_unknown_task_is_error():
    with pytest.raises(KeyError):
        active_skill_mask(benchmark_matrix(), "nope")


def test_two_language_skills_rejected():
    bad = TaskSpec("x", TaskType.CLASSIFICATION, "en", 2, frozenset({task_skill(1), language_skill(1), language_skill(2)}))
    with pytest.raises(ValueError, match="exactly one"):
        build_skill_matrix([bad])


def test_no_language_or_no_task_skill_rejected():
    with pytest.raises(ValueError):
        build_skill_matrix([TaskSpec("x", TaskType.CLASSIFICATION, "en", 2, frozenset({task_skill(1)}))])
    with pytest.raises(ValueError, match="no task skill"):
        build_skill_matrix([TaskSpec("x", TaskType.CLASSIFICATION, "en", 2, frozenset({language_skill(1)}))])


def test_language_skill_must_match_language_tag():
    spec = TaskSpec("x", TaskType.CLASSIFICATION, "en", 2, frozenset({task_skill(1), language_skill(3)}))
    with pytest.raises(ValueError, match="activates l_s3"):
        build_skill_matrix([spec])


def test_duplicate_task_ids_rejected():
    s = make_spec("x", TaskType.CLASSIFICATION, "en", 2, [1])
    with pytest.raises(ValueError, match="duplicate"):
        build_skill_matrix([s, s])


def test_generic_skill_is_optional():
    s = make_spec("x", TaskType.CLASSIFICATION, "en", 2, [5])
    assert build_skill_matrix([s]).matrix[0, 0] == 0


def test_matrix_is_read_only_and_rows_round_trip():
    m = benchmark_matrix()
    with pytest.raises(ValueError):
        m.matrix[0, 0] = 1
    for i, spec in enumerate(m.tasks):
        assert m.row_skills(i) == spec.skills
    assert set(m.matrix.flatten()) <= {0, 1}


def test_every_mask_has_one_language_bit():
    m = benchmark_matrix()
    for t in m.task_ids:
        assert sum(active_skill_mask(m, t).language_bits) == 1


def test_language_swap_en_to_zh():
    m = benchmark_matrix()
    assert names(perturbed_mask(m, "mnli", LanguageSwap("zh"))) == ({"t_s1", "t_s3", "t_s4"}, "l_s2")


@pytest.mark.parametrize("target", ["zh", "de", "es", "l_s2"])
def test_language_swap_flips_one_bit_pair(target):
    m = benchmark_matrix()
    before = active_skill_mask(m, "conll").bits
    after = perturbed_mask(m, "conll", LanguageSwap(target)).bits
    changed = [i for i, (a, b) in enumerate(zip(before, after)) if a != b]
    assert len(changed) == 2 and all(i >= TAX.n_task for i in changed)


def test_swap_to_task_skill_rejected():
    with pytest.raises(ValueError):
        perturbed_mask(benchmark_matrix(), "mnli", LanguageSwap("t_s2"))


def test_all_task_skills_keeps_language():
    m = benchmark_matrix()
    mask = perturbed_mask(m, "conll", AllTaskSkills())
    assert names(mask) == ({f"t_s{i}" for i in range(1, 7)}, "l_s1")


def test_identity_is_the_row():
    m = benchmark_matrix()
    assert perturbed_mask(m, "qnli", Identity()) == active_skill_mask(m, "qnli")


@given(st.integers(0, 10_000))
def test_random_task_skills_deterministic_and_nonempty(seed):
    m = benchmark_matrix()
    for t in m.task_ids:
        a = perturbed_mask(m, t, RandomTaskSkills(seed))
        assert a == perturbed_mask(m, t, RandomTaskSkills(seed))
        assert any(a.task_bits)
        assert a.language == active_skill_mask(m, t).language


def test_random_task_skills_redraw_is_logged(caplog):
    m = benchmark_matrix()
    with caplog.at_level("INFO", logger="skillnetx.skills"):
        for seed in range(200):
            perturbed_mask(m, "mnli", RandomTaskSkills(seed, p=0.1))
    assert "was empty; redrawing" in caplog.text


def test_skill_kind_of_language_skill():
    assert language_skill(2).kind is SkillKind.LANGUAGE
