import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcc.clusters import (
    MISC_TAG,
    ClusterAssignment,
    PromptTemplates,
    StopCondition,
    cluster_vector,
    generate_clusters,
    parse_assignment,
)
from pcc.errors import ParseError
from pcc.llm import LLMBackend, LLMClient, MockScript

CATS = ["cat", "dog", "car"]
STABLE = "cat: animal, pet\ndog: animal, pet\ncar: vehicle"
OTHER = "cat: animal\ndog: animal\ncar: vehicle"


def mock_client(entries, policy="repeat_last"):
    return LLMClient(LLMBackend(), script=MockScript(entries, policy))


def test_parse_is_case_insensitive_and_strips_markers():
    z, missing = parse_assignment("- Cat: Animal, PET.\n2. DOG: animal\nnonsense line\nzebra: animal", CATS)
    assert z.mapping == {"cat": {"animal", "pet"}, "dog": {"animal"}}
    assert missing == ["car"]


def test_parse_raises_when_nothing_matches():
    with pytest.raises(ParseError):
        parse_assignment("I cannot help with that.", CATS)


def test_constant_mock_converges_after_first_refine():
    client = mock_client([("", STABLE)])
    z = generate_clusters(CATS, client, stop=StopCondition(2, 10))
    assert (z.iteration_index, z.stalled) == (1, False)
    assert z.vocabulary == ["animal", "pet", "vehicle"]
    assert len(client.transcript) == 2


@pytest.mark.parametrize("r", [2, 3, 4])
def test_window_counts_initial_iterate(r):
    z = generate_clusters(CATS, mock_client([("", STABLE)]), stop=StopCondition(r, 10))
    assert z.iteration_index == r - 1 and not z.stalled


def test_oscillating_mock_stalls_at_cap():
    entries = [("", STABLE if i % 2 == 0 else OTHER) for i in range(20)]
    z = generate_clusters(CATS, mock_client(entries), stop=StopCondition(2, 5))
    assert (z.iteration_index, z.stalled) == (5, True)
    # z0 = STABLE, z1..z5 alternate, so z5 = OTHER
    assert z.mapping["cat"] == frozenset({"animal"})


def test_transcripts_replay_identically():
    entries = [("", STABLE if i % 2 else OTHER) for i in range(6)]
    runs = []
    for _ in range(2):
        client = mock_client(entries)
        generate_clusters(CATS, client, stop=StopCondition(2, 4))
        runs.append([(e.prompt_text, e.response_text) for e in client.transcript])
    assert runs[0] == runs[1]


def test_missing_category_is_repaired_with_misc():
    z = generate_clusters(CATS, mock_client([("", "cat: animal\ndog: animal")]))
    assert z.mapping["car"] == frozenset({MISC_TAG})


def test_unparseable_reply_gets_one_reprompt():
    client = mock_client([("", "sorry"), ("previous reply could not be read", STABLE)])
    z = generate_clusters(CATS, client)
    assert z.mapping["cat"] == {"animal", "pet"}
    assert "could not be read" in client.transcript[1].prompt_text


def test_second_unparseable_reply_raises():
    with pytest.raises(ParseError):
        generate_clusters(CATS, mock_client([("", "sorry")]))


def test_refine_prompt_carries_previous_assignment():
    client = mock_client([("", STABLE)])
    generate_clusters(CATS, client)
    assert "cat: animal, pet" in client.transcript[1].prompt_text


def test_template_slot_validation():
    with pytest.raises(ValueError):
        PromptTemplates(gen_template="no slot here")
    with pytest.raises(ValueError):
        StopCondition(3, 3)


def test_duplicate_categories_rejected():
    with pytest.raises(ValueError):
        generate_clusters(["cat", "cat"], mock_client([("", STABLE)]))


def test_cluster_vector_multi_hot():
    z = ClusterAssignment({"cat": {"animal", "pet"}, "dog": {"animal"}, "car": {"vehicle"}})
    assert z.vocabulary == ["animal", "pet", "vehicle"]
    assert cluster_vector(["dog", "car"], z).tolist() == [1, 0, 1]
    assert cluster_vector([], z).tolist() == [0, 0, 0]
    with pytest.raises(KeyError):
        cluster_vector(["boat"], z)


def test_assignment_round_trip(tmp_path):
    z = ClusterAssignment({"b": {"y"}, "a": {"x", "y"}}, iteration_index=3, stalled=True)
    z.save(tmp_path / "z.json")
    back = ClusterAssignment.load(tmp_path / "z.json")
    assert back == z and back.iteration_index == 3 and back.stalled
    assert back.categories == ("b", "a")


tag = st.sampled_from(["animal", "pet", "vehicle", "tool", "food"])
assignment = st.dictionaries(st.sampled_from(["cat", "dog", "car", "axe", "pie"]),
                             st.frozensets(tag, min_size=1), min_size=1)


@given(assignment, st.lists(st.sampled_from(["cat", "dog", "car", "axe", "pie"]), max_size=5))
@settings(max_examples=60, deadline=None)
def test_cluster_vector_matches_set_union(mapping, labels):
    z = ClusterAssignment(mapping)
    labels = [lab for lab in labels if lab in mapping]
    union = set().union(*(mapping[lab] for lab in labels)) if labels else set()
    vec = cluster_vector(labels, z)
    assert {t for t, bit in zip(z.vocabulary, vec) if bit} == union


@given(assignment)
@settings(max_examples=60, deadline=None)
def test_text_round_trips_through_parser(mapping):
    z = ClusterAssignment(mapping)
    parsed, missing = parse_assignment(z.to_text(), list(mapping))
    assert parsed == z and missing == []
    assert np.all(cluster_vector(list(mapping), z) == 1)
