"""Canonical in-memory model of scenes and dialogues, plus its JSON format.

Canonical document layout (one document per split)::

    {
      "format": "sitdial-corpus/1",
      "split": "devtest",
      "scenes": {
        "<scene_id>": {
          "domain": "fashion",
          "objects": [
            {"index": 3, "prefab": "...", "bbox": [x, y, w, h],
             "colour": "light blue", "type": "jacket hanging",
             "pred_colour": "blue", "pred_type": "jacket hanging",
             "roi": [...]}
          ]
        }
      },
      "dialogues": {
        "<dialogue_id>": {
          "scene_id": "<scene_id>",
          "turns": [
            {"user": "...", "system": "...", "system_mentioned": [3],
             "disambiguate": null, "targets": [3], "excluded": false}
          ]
        }
      }
    }

A turn may carry ``"scene_id"`` when the dialogue moves to another scene.
``targets`` is ``null`` when the turn has no coreference annotation and a list
(possibly empty, possibly with repeats) otherwise.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import DanglingObjectId, EmptyCorpus, MalformedRecord, MissingScene

FORMAT_TAG = "sitdial-corpus/1"
SPLITS = ("train", "dev", "devtest", "teststd")
DOMAINS = ("fashion", "furniture")
MAX_SCENE_OBJECTS = 141
TRAIN_OBJECT_CAP = 60


@dataclass(frozen=True)
class SceneObject:
    index: int
    prefab: str
    bbox: tuple[float, float, float, float]
    colour: str
    type: str
    pred_colour: Optional[str] = None
    pred_type: Optional[str] = None
    roi: tuple[float, ...] = ()

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"object index must be non-negative, got {self.index}")
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"object {self.index}: bbox needs positive width/height, got {self.bbox}")


@dataclass(frozen=True)
class Scene:
    scene_id: str
    objects: tuple[SceneObject, ...]
    domain: str = "fashion"
    image_size: tuple[float, float] = (1920.0, 1080.0)

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_SCENE_OBJECTS:
            raise ValueError(f"scene {self.scene_id}: {len(self.objects)} objects outside [1, {MAX_SCENE_OBJECTS}]")
        ids = [o.index for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"scene {self.scene_id}: duplicate object_index")

    @property
    def ids(self) -> frozenset[int]:
        return frozenset(o.index for o in self.objects)

    def get(self, index: int) -> SceneObject:
        for o in self.objects:
            if o.index == index:
                return o
        raise KeyError(index)


@dataclass(frozen=True)
class Turn:
    index: int
    user: str
    system: str = ""
    system_mentioned: tuple[int, ...] = ()
    disambiguate: Optional[bool] = None
    targets: Optional[tuple[int, ...]] = None
    # Excluded turns keep their targets for slice analysis but are skipped by
    # the official coreference evaluation.
    excluded: bool = False
    scene_id: Optional[str] = None

    @property
    def evaluated(self) -> bool:
        return self.targets is not None and not self.excluded


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    scene_id: str
    turns: tuple[Turn, ...]
    split: str = "train"

    def __post_init__(self):
        for i, t in enumerate(self.turns):
            if t.index != i:
                raise ValueError(f"dialogue {self.dialogue_id}: turn indexes must run 0..n-1")
        if self.split not in SPLITS:
            raise ValueError(f"dialogue {self.dialogue_id}: unknown split {self.split!r}")

    def scene_id_at(self, t: int) -> str:
        return self.turns[t].scene_id or self.scene_id


@dataclass(frozen=True)
class Corpus:
    scenes: dict[str, Scene]
    dialogues: tuple[Dialogue, ...]

    def __post_init__(self):
        for d in self.dialogues:
            for t in d.turns:
                sid = d.scene_id_at(t.index)
                if sid not in self.scenes:
                    raise MissingScene(f"dialogue {d.dialogue_id} turn {t.index}: scene {sid!r} not in registry")
                ids = self.scenes[sid].ids
                refs = list(t.system_mentioned) + list(t.targets or ())
                bad = [i for i in refs if i not in ids]
                if bad:
                    raise DanglingObjectId(
                        f"dialogue {d.dialogue_id} turn {t.index}: ids {bad} not in scene {sid}"
                    )

    def __len__(self):
        return len(self.dialogues)

    def scene_for(self, dialogue: Dialogue, t: int) -> Scene:
        return self.scenes[dialogue.scene_id_at(t)]

    def split(self, *names: str) -> "Corpus":
        dialogues = tuple(d for d in self.dialogues if d.split in names)
        used = {d.scene_id_at(t.index) for d in dialogues for t in d.turns} | {d.scene_id for d in dialogues}
        return Corpus({k: v for k, v in self.scenes.items() if k in used}, dialogues)

    def iter_turns(self):
        for d in self.dialogues:
            for t in d.turns:
                yield d, t

    def used_scene_ids(self) -> list[str]:
        seen = {}
        for d in self.dialogues:
            seen.setdefault(d.scene_id, None)
            for t in d.turns:
                seen.setdefault(d.scene_id_at(t.index), None)
        return list(seen)


# ---------------------------------------------------------------------------
# canonical JSON


def object_to_json(o: SceneObject) -> dict:
    return {
        "index": o.index,
        "prefab": o.prefab,
        "bbox": list(o.bbox),
        "colour": o.colour,
        "type": o.type,
        "pred_colour": o.pred_colour,
        "pred_type": o.pred_type,
        "roi": list(o.roi),
    }


def scene_to_json(s: Scene) -> dict:
    return {
        "domain": s.domain,
        "image_size": list(s.image_size),
        "objects": [object_to_json(o) for o in s.objects],
    }


def turn_to_json(t: Turn) -> dict:
    out = {
        "user": t.user,
        "system": t.system,
        "system_mentioned": list(t.system_mentioned),
        "disambiguate": t.disambiguate,
        "targets": None if t.targets is None else list(t.targets),
        "excluded": t.excluded,
    }
    if t.scene_id is not None:
        out["scene_id"] = t.scene_id
    return out


def to_canonical(corpus: Corpus, split: Optional[str] = None) -> dict:
    """Serialise ``corpus`` (or one split of it) to a canonical document."""
    sub = corpus.split(split) if split else corpus
    dialogues = {}
    for d in sub.dialogues:
        dialogues[d.dialogue_id] = {
            "scene_id": d.scene_id,
            "split": d.split,
            "turns": [turn_to_json(t) for t in d.turns],
        }
    return {
        "format": FORMAT_TAG,
        "split": split,
        "scenes": {sid: scene_to_json(sub.scenes[sid]) for sid in sub.used_scene_ids()},
        "dialogues": dialogues,
    }


def _object_from_json(rec: dict) -> SceneObject:
    return SceneObject(
        index=int(rec["index"]),
        prefab=str(rec["prefab"]),
        bbox=tuple(float(v) for v in rec["bbox"]),
        colour=rec["colour"],
        type=rec["type"],
        pred_colour=rec.get("pred_colour"),
        pred_type=rec.get("pred_type"),
        roi=tuple(float(v) for v in rec.get("roi") or ()),
    )


def from_canonical(docs: dict | Sequence[dict], source: str = "<memory>") -> Corpus:
    """Build a corpus from one or more canonical documents (e.g. one per split)."""
    if isinstance(docs, dict):
        docs = [docs]
    scenes: dict[str, Scene] = {}
    dialogues: list[Dialogue] = []
    for doc in docs:
        if doc.get("format") != FORMAT_TAG:
            raise MalformedRecord(source, "format", f"expected {FORMAT_TAG!r}, got {doc.get('format')!r}")
        for sid, rec in doc["scenes"].items():
            try:
                scene = Scene(
                    scene_id=sid,
                    domain=rec.get("domain", "fashion"),
                    image_size=tuple(rec.get("image_size", (1920.0, 1080.0))),
                    objects=tuple(_object_from_json(o) for o in rec["objects"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(source, f"scenes.{sid}", str(exc)) from exc
            scenes[sid] = scene
        for did, rec in doc["dialogues"].items():
            try:
                turns = tuple(
                    Turn(
                        index=i,
                        user=t["user"],
                        system=t.get("system", ""),
                        system_mentioned=tuple(int(v) for v in t.get("system_mentioned", ())),
                        disambiguate=t.get("disambiguate"),
                        targets=None if t.get("targets") is None else tuple(int(v) for v in t["targets"]),
                        excluded=bool(t.get("excluded", False)),
                        scene_id=t.get("scene_id"),
                    )
                    for i, t in enumerate(rec["turns"])
                )
                dialogues.append(
                    Dialogue(did, rec["scene_id"], turns, rec.get("split") or doc.get("split") or "train")
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(source, f"dialogues.{did}", str(exc)) from exc
    return Corpus(scenes, tuple(dialogues))


def save_corpus(corpus: Corpus, out_dir: str | Path) -> list[Path]:
    """Write one canonical document per split present in ``corpus``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for split in SPLITS:
        if not any(d.split == split for d in corpus.dialogues):
            continue
        path = out_dir / f"{split}.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(to_canonical(corpus, split), fh, ensure_ascii=False)
        written.append(path)
    return written


def load_corpus(path: str | Path) -> Corpus:
    """Load a canonical document, or every ``*.json`` document in a directory."""
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    docs = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            try:
                docs.append(json.load(fh))
            except json.JSONDecodeError as exc:
                raise MalformedRecord(f, f"line {exc.lineno}", exc.msg) from exc
    return from_canonical(docs, source=str(path))


# ---------------------------------------------------------------------------
# statistics


@dataclass
class StatsReport:
    n_dialogues: int
    n_turns: int
    n_scenes: int
    scene_size_mean: float
    scene_size_sd: float
    scene_size_max: int
    n_targets: int
    target_frac_below_10: float
    target_frac_below_5: float
    n_labeled: int
    disamb_true_rate: float
    disamb_false_rate: float
    n_history_turns: int
    target_in_history_rate: float
    frac_turns_over_train_cap: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    if n == 0:
        return float("nan"), float("nan")
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    return mean, math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def corpus_stats(corpus: Corpus, train_cap: int = TRAIN_OBJECT_CAP) -> StatsReport:
    """Dataset statistics over evaluated turns (targets present, not excluded).

    Scene sizes are taken over every distinct scene referenced by a turn; SD
    uses the n-1 denominator.
    """
    if not corpus.dialogues:
        raise EmptyCorpus("corpus has no dialogues")
    sizes = [len(corpus.scenes[sid].objects) for sid in corpus.used_scene_ids()]
    size_mean, size_sd = _mean_sd(sizes)

    n_turns = n_targets = below10 = below5 = 0
    labels = Counter()
    hist_turns = hist_hits = over_cap = 0
    for d in corpus.dialogues:
        mentioned: set[int] = set()
        for t in d.turns:
            n_turns += 1
            if len(corpus.scene_for(d, t.index).objects) > train_cap:
                over_cap += 1
            if t.disambiguate is not None:
                labels[t.disambiguate] += 1
            if t.evaluated and t.targets:
                n_targets += len(t.targets)
                below10 += sum(1 for i in t.targets if i < 10)
                below5 += sum(1 for i in t.targets if i < 5)
                hist_turns += 1
                if any(i in mentioned for i in t.targets):
                    hist_hits += 1
            mentioned.update(t.system_mentioned)

    n_labeled = labels[True] + labels[False]
    return StatsReport(
        n_dialogues=len(corpus.dialogues),
        n_turns=n_turns,
        n_scenes=len(sizes),
        scene_size_mean=size_mean,
        scene_size_sd=size_sd,
        scene_size_max=max(sizes),
        n_targets=n_targets,
        target_frac_below_10=_ratio(below10, n_targets),
        target_frac_below_5=_ratio(below5, n_targets),
        n_labeled=n_labeled,
        disamb_true_rate=_ratio(labels[True], n_labeled),
        disamb_false_rate=_ratio(labels[False], n_labeled),
        n_history_turns=hist_turns,
        target_in_history_rate=_ratio(hist_hits, hist_turns),
        frac_turns_over_train_cap=_ratio(over_cap, n_turns),
    )


def turns_with_targets(corpus: Corpus, include_excluded: bool = False) -> Iterable[tuple[Dialogue, Turn]]:
    for d, t in corpus.iter_turns():
        if t.targets is None:
            continue
        if t.excluded and not include_excluded:
            continue
        yield d, t
