from __future__ import annotations

import pytest

from sitdial.corpus import Corpus, Dialogue, Scene, SceneObject, Turn
from sitdial.synth import CorpusSpec, generate


def obj(index, colour="blue", type_="jacket hanging", prefab=None, bbox=(10.0, 20.0, 100.0, 200.0), roi=(1.0, 0.0, 0.0, 0.0), pred=True):
    return SceneObject(
        index=index,
        prefab=prefab or f"fashion/{type_.replace(' ', '_')}/{colour}_{index}",
        bbox=bbox,
        colour=colour,
        type=type_,
        pred_colour=colour if pred else None,
        pred_type=type_ if pred else None,
        roi=roi,
    )


@pytest.fixture
def tiny_corpus():
    """One scene, one four-turn dialogue with a clarification at turn 1."""
    scene = Scene(
        "s0",
        (
            obj(60, "red", "blouse hanging", bbox=(10, 10, 50, 80)),
            obj(56, "white", "blouse hanging", bbox=(1500, 10, 50, 80)),
            obj(3, "blue", "jacket hanging", bbox=(900, 500, 60, 90)),
            obj(7, "black", "shoes", bbox=(300, 900, 40, 40)),
        ),
    )
    turns = (
        Turn(0, "Hi, show me blouses.", "We have this red blouse on the left, and the white blouse on the right", (60, 56), None, ()),
        Turn(1, "How much is that blouse?", "Which one do you mean?", (60, 56), True, (56,), excluded=True),
        Turn(2, "The white one.", "It is $30.", (56,), None, (56,)),
        Turn(3, "And the jacket and two of those shoes.", "Sure.", (3, 7), False, (3, 7, 7)),
    )
    return Corpus({"s0": scene}, (Dialogue("d0", "s0", turns, "devtest"),))


@pytest.fixture(scope="session")
def small_synthetic():
    return generate(CorpusSpec(n_dialogues=60, seed=11))


@pytest.fixture(scope="session")
def default_synthetic():
    return generate(CorpusSpec())


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in VERDICTS:
        terminalreporter.write_line(f"{status:4s}  {label}  ({detail})")
