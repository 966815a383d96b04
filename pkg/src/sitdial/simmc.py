"""Adapter from the released SIMMC 2.0 file layout to the canonical corpus.

Field names are read from a small JSON mapping file (see
``data/simmc_mapping.json``) so that schema drift in a release is absorbed by
editing the mapping rather than this module.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional

from .corpus import SPLITS, Corpus, Dialogue, Scene, SceneObject, Turn
from .errors import DanglingObjectId, MalformedRecord, MissingScene
from .taxonomy import TYPES
from .featurize import simplify_colour

log = logging.getLogger(__name__)

_MISSING = object()


def default_mapping() -> dict:
    return json.loads(resources.files("sitdial.data").joinpath("simmc_mapping.json").read_text())


def get_path(record: Any, dotted: str, default=_MISSING):
    cur = record
    for part in dotted.split("."):
        try:
            cur = cur[int(part)] if isinstance(cur, list) else cur[part]
        except (KeyError, IndexError, ValueError, TypeError):
            if default is _MISSING:
                raise KeyError(dotted) from None
            return default
    return cur


def normalise_type(raw: str) -> str:
    """``blouse_hanging`` -> ``blouse hanging``; ``CoffeeTable`` -> ``coffee table``."""
    s = re.sub(r"(?<=[a-z])(?=[A-Z])", " ", raw)
    return " ".join(s.replace("_", " ").replace("-", " ").lower().split())


@dataclass
class IngestReport:
    n_dialogues: int = 0
    n_scenes: int = 0
    unknown_colours: int = 0
    unknown_types: int = 0
    dangling: list[str] = field(default_factory=list)
    missing_metadata: list[str] = field(default_factory=list)


def _split_from_name(path: Path) -> str:
    name = path.name.lower()
    for split in ("devtest", "teststd", "dev", "train"):
        if f"_{split}" in name or name.startswith(split):
            return split
    return "train"


def _load_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(path, f"line {exc.lineno}", exc.msg) from exc


def _bbox(raw, order: str, locator: str, path: Path) -> tuple[float, float, float, float]:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise MalformedRecord(path, locator, f"bbox must have 4 numbers, got {raw!r}")
    vals = dict(zip(order, (float(v) for v in raw)))
    w, h = vals["w"], vals["h"]
    # Degenerate boxes exist in some releases; keep them valid with a 1px floor.
    return (vals["x"], vals["y"], max(w, 1.0), max(h, 1.0))


def ingest_simmc(
    dialogue_files: Iterable[str | Path],
    scene_files: Iterable[str | Path],
    metadata_files: Iterable[str | Path],
    mapping: Optional[dict] = None,
    features: Optional[dict] = None,
    strict: bool = False,
) -> tuple[Corpus, IngestReport]:
    """Read SIMMC 2.0 release files into a canonical corpus.

    ``features`` optionally maps ``scene_id -> {object_index: {"roi": [...],
    "pred_colour": ..., "pred_type": ...}}`` for vision outputs computed
    elsewhere. Dangling object references raise in ``strict`` mode; otherwise
    they are dropped and listed in the report.
    """
    m = dict(default_mapping())
    m.update(mapping or {})
    report = IngestReport()

    metadata: dict[str, dict] = {}
    for p in map(Path, metadata_files):
        metadata.update(_load_json(p))

    scene_paths = {}
    suffix = m["scene_file_suffix"]
    for p in map(Path, scene_files):
        sid = p.name[: -len(suffix)] if p.name.endswith(suffix) else p.stem
        scene_paths[sid] = p

    scenes: dict[str, Scene] = {}

    def load_scene(sid: str, domain: str) -> Scene:
        if sid in scenes:
            return scenes[sid]
        if sid not in scene_paths:
            raise MissingScene(f"scene {sid!r} referenced but no scene file supplied")
        path = scene_paths[sid]
        doc = _load_json(path)
        try:
            objs = get_path(doc, m["scene_objects"])
        except KeyError:
            raise MalformedRecord(path, m["scene_objects"], "object list not found") from None
        feats = (features or {}).get(sid, {})
        out = []
        for k, rec in enumerate(objs):
            loc = f"{m['scene_objects']}[{k}]"
            try:
                idx = int(get_path(rec, m["object_index"]))
                prefab = str(get_path(rec, m["object_prefab"]))
            except (KeyError, ValueError):
                raise MalformedRecord(path, loc, "object without index/prefab") from None
            bbox = _bbox(get_path(rec, m["object_bbox"], None), m["bbox_order"], loc, path)
            meta = metadata.get(prefab)
            if meta is None:
                report.missing_metadata.append(prefab)
                meta = {}
            colour = str(meta.get(m["metadata_colour"], "unknown"))
            type_key = m["metadata_type"].get(domain, "type")
            type_ = normalise_type(str(meta.get(type_key, "unknown")))
            if simplify_colour(colour) == "unknown":
                report.unknown_colours += 1
            if type_ not in TYPES:
                report.unknown_types += 1
            f = feats.get(idx, feats.get(str(idx), {}))
            out.append(
                SceneObject(
                    index=idx,
                    prefab=prefab,
                    bbox=bbox,
                    colour=colour,
                    type=type_,
                    pred_colour=f.get("pred_colour"),
                    pred_type=f.get("pred_type"),
                    roi=tuple(float(v) for v in f.get("roi", ())),
                )
            )
        try:
            scene = Scene(sid, tuple(out), domain, tuple(float(v) for v in m["image_size"]))
        except ValueError as exc:
            raise MalformedRecord(path, m["scene_objects"], str(exc)) from exc
        scenes[sid] = scene
        return scene

    dialogues = []
    for p in map(Path, dialogue_files):
        doc = _load_json(p)
        split = _split_from_name(p)
        try:
            records = get_path(doc, m["dialogue_list"])
        except KeyError:
            raise MalformedRecord(p, m["dialogue_list"], "dialogue list not found") from None
        for di, rec in enumerate(records):
            loc = f"{m['dialogue_list']}[{di}]"
            try:
                did = str(get_path(rec, m["dialogue_id"]))
                domain = str(get_path(rec, m["domain"], "fashion"))
                scene_ids = get_path(rec, m["scene_ids"])
                raw_turns = get_path(rec, m["turns"])
            except KeyError as exc:
                raise MalformedRecord(p, loc, f"missing field {exc}") from None
            starts = sorted((int(k), v) for k, v in scene_ids.items())
            if not starts:
                raise MalformedRecord(p, loc, "no scene ids")

            def scene_at(t: int) -> str:
                sid = starts[0][1]
                for k, v in starts:
                    if k <= t:
                        sid = v
                return sid

            first_scene = scene_at(0)
            turns = []
            for ti, tr in enumerate(raw_turns):
                tloc = f"{loc}.{m['turns']}[{ti}]"
                sid = scene_at(ti)
                scene = load_scene(sid, domain)
                ids = scene.ids

                def resolve(values, what):
                    kept = []
                    for v in values or ():
                        v = int(v)
                        if v in ids:
                            kept.append(v)
                            continue
                        msg = f"{p}:{tloc}: {what} id {v} not in scene {sid}"
                        if strict:
                            raise DanglingObjectId(msg)
                        report.dangling.append(msg)
                    return tuple(kept)

                label = get_path(tr, m["disambiguation_label"], None)
                label = None if label is None else bool(label)
                raw_targets = get_path(tr, m["targets"], None)
                targets = None if raw_targets is None else resolve(raw_targets, "target")
                turns.append(
                    Turn(
                        index=ti,
                        user=str(get_path(tr, m["user"], "")),
                        system=str(get_path(tr, m["system"], "")),
                        system_mentioned=resolve(get_path(tr, m["system_mentioned"], ()), "system-mentioned"),
                        disambiguate=label,
                        targets=targets,
                        excluded=bool(m.get("exclude_disambiguate_true")) and label is True,
                        scene_id=None if sid == first_scene else sid,
                    )
                )
            load_scene(first_scene, domain)
            dialogues.append(Dialogue(did, first_scene, tuple(turns), split))

    dialogues.sort(key=lambda d: (SPLITS.index(d.split), int(d.dialogue_id) if d.dialogue_id.isdigit() else 0, d.dialogue_id))
    report.n_dialogues = len(dialogues)
    report.n_scenes = len(scenes)
    if report.dangling:
        log.warning("%d dangling object references dropped", len(report.dangling))
    return Corpus(scenes, tuple(dialogues)), report


def ingest_directory(root: str | Path, mapping: Optional[dict] = None, splits=("devtest",)) -> tuple[Corpus, IngestReport]:
    """Locate release files under ``root`` by name and ingest the requested splits."""
    root = Path(root)
    mapping_file = root / "simmc_mapping.json"
    if mapping is None and mapping_file.exists():
        mapping = _load_json(mapping_file)
    m = dict(default_mapping())
    m.update(mapping or {})
    dialogue_files = [
        p for p in sorted(root.rglob("*dials*.json")) if _split_from_name(p) in splits
    ]
    scene_files = sorted(root.rglob(f"*{m['scene_file_suffix']}"))
    metadata_files = sorted(root.rglob("*metadata*.json"))
    features = None
    feat_file = root / "features.json"
    if feat_file.exists():
        features = _load_json(feat_file)
    return ingest_simmc(dialogue_files, scene_files, metadata_files, mapping=m, features=features)
