"""Turn corpus records into model-ready token and visual sequences."""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .corpus import TRAIN_OBJECT_CAP, Corpus, Dialogue, Scene, SceneObject, Turn
from .errors import ConfigError, MissingPredictedClass, SceneTooLarge, TurnOutOfRange
from .taxonomy import COLOUR_ALIASES, COLOUR_MODIFIERS, COLOURS, TYPES, UNKNOWN

log = logging.getLogger(__name__)

ALL = "all"

PAD, CLS, SEP, UNK, SYS, USR = "[PAD]", "[CLS]", "[SEP]", "[UNK]", "[SYS]", "[USR]"
SPECIALS = (PAD, CLS, SEP, UNK, SYS, USR, "SYSTEM", "USER")
# Canonical object ids are a small closed set; reserving them keeps eval-only
# ids out of [UNK].
RESERVED_ID_TOKENS = tuple(str(i) for i in range(200))

_COLOUR_SET = frozenset(COLOURS)


def simplify_colour(raw: str) -> str:
    """Map a metadata colour string onto the 17 canonical colours.

    Multi-colour strings keep their first colour; modifier prefixes
    (light, dark, ...) are dropped. Anything unmapped becomes ``unknown``.
    """
    if not raw:
        return UNKNOWN
    first = raw.split(",")[0].strip().lower()
    words = [w for w in first.replace("-", " ").split() if w not in COLOUR_MODIFIERS]
    if len(words) != 1:
        return UNKNOWN
    word = COLOUR_ALIASES.get(words[0], words[0])
    return word if word in _COLOUR_SET else UNKNOWN


# ---------------------------------------------------------------------------
# tokenisation

_SPECIAL_RE = re.compile(r"\[[A-Z]+(?:_\d+)?\]|\bSYSTEM\b|\bUSER\b")
_WORD_RE = re.compile(r"'[^\W_]+|[^\W_]+|[^\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lower-case, split on whitespace and punctuation; punctuation is kept.

    Bracketed specials (``[SEP]``, ``[OBJECT_12]``) and the speaker markers
    ``SYSTEM``/``USER`` pass through untouched.

    >>> tokenize("I'd like it.")
    ['i', "'d", 'like', 'it', '.']
    """
    out: list[str] = []
    pos = 0
    for m in _SPECIAL_RE.finditer(text):
        out.extend(_WORD_RE.findall(text[pos:m.start()].lower()))
        out.append(m.group())
        pos = m.end()
    out.extend(_WORD_RE.findall(text[pos:].lower()))
    return out


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary has duplicate tokens")
        for i, s in enumerate(SPECIALS):
            if self.tokens[i] != s:
                raise ValueError("vocabulary must start with the special tokens")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def pad_id(self):
        return 0

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def encode(self, text: str) -> list[int]:
        return self.encode_tokens(tokenize(text))

    def decode(self, ids: Sequence[int]) -> str:
        return detokenize([self.tokens[i] for i in ids])

    @classmethod
    def build(cls, texts, object_tokens: Sequence[str] = ()) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(tokenize(text))
        fixed = list(SPECIALS) + list(object_tokens)
        extra = set(counts) | set(RESERVED_ID_TOKENS)
        for label in COLOURS + TYPES:
            extra.update(tokenize(label))
        extra -= set(fixed)
        return cls(fixed + sorted(extra))

    def save(self, path: str | Path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


# ---------------------------------------------------------------------------
# configuration and descriptions


@dataclass(frozen=True)
class FeaturizerConfig:
    history_object_turns: Union[int, str] = 1
    use_descriptions: bool = True
    use_colours: bool = True
    use_types: bool = True
    use_ids_in_descriptions: bool = True
    use_global_tokens: bool = False
    oracle_descriptions: bool = False
    use_prev_system_turn: bool = True
    use_user_utterance: bool = True
    use_roi: bool = True
    use_bbox: bool = True
    use_position_counts: bool = True
    dedup_descriptions: bool = False
    max_objects: int = TRAIN_OBJECT_CAP
    max_tokens: int = 128

    def __post_init__(self):
        if self.use_global_tokens and self.use_ids_in_descriptions:
            raise ConfigError("use_global_tokens replaces ids in descriptions; disable use_ids_in_descriptions")
        x = self.history_object_turns
        if not (x == ALL or (isinstance(x, int) and x >= 0)):
            raise ConfigError(f"history_object_turns must be >= 0 or 'all', got {x!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown featurizer options: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "FeaturizerConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class ObjectDescription:
    object_index_token: Optional[str]
    colour_token: Optional[str]
    type_tokens: tuple[str, ...]
    positional_id: int

    @property
    def text(self) -> str:
        parts = [self.object_index_token, self.colour_token, *self.type_tokens]
        return " ".join(p for p in parts if p)

    @property
    def key(self) -> str:
        """The description without its identity token; used for duplicate detection."""
        return " ".join(p for p in (self.colour_token, *self.type_tokens) if p)


class GlobalTokens:
    """Injective prefab -> ``[OBJECT_k]`` mapping, k = rank in sorted prefab list."""

    def __init__(self, prefabs):
        self.prefabs = sorted(set(prefabs))
        self.map = {p: f"[OBJECT_{k}]" for k, p in enumerate(self.prefabs)}

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "GlobalTokens":
        return cls(o.prefab for s in corpus.scenes.values() for o in s.objects)

    def __getitem__(self, prefab: str) -> str:
        return self.map[prefab]

    @property
    def tokens(self) -> list[str]:
        return [self.map[p] for p in self.prefabs]


def object_classes(obj: SceneObject, oracle: bool) -> tuple[str, str]:
    if oracle:
        return simplify_colour(obj.colour), obj.type
    if obj.pred_colour is None or obj.pred_type is None:
        raise MissingPredictedClass(f"object {obj.index} ({obj.prefab}) has no predicted classes")
    return simplify_colour(obj.pred_colour), obj.pred_type


def positional_ids(objects: Sequence[SceneObject], oracle: bool) -> list[int]:
    """k for the k-th object of its (described) type, in scene order, from 1."""
    seen: Counter = Counter()
    out = []
    for o in objects:
        _, type_ = object_classes(o, oracle)
        seen[type_] += 1
        out.append(seen[type_])
    return out


def build_description(
    obj: SceneObject,
    cfg: FeaturizerConfig,
    positional_id: int = 1,
    global_tokens: Optional[GlobalTokens] = None,
) -> ObjectDescription:
    colour, type_ = object_classes(obj, cfg.oracle_descriptions)
    if cfg.use_global_tokens:
        if global_tokens is None:
            raise ConfigError("use_global_tokens needs a GlobalTokens registry")
        ident = global_tokens[obj.prefab]
    elif cfg.use_ids_in_descriptions:
        ident = str(obj.index)
    else:
        ident = None
    words = cfg.use_descriptions
    return ObjectDescription(
        object_index_token=ident,
        colour_token=colour if words and cfg.use_colours else None,
        type_tokens=tuple(type_.split()) if words and cfg.use_types else (),
        positional_id=positional_id,
    )


def scene_descriptions(scene: Scene, cfg: FeaturizerConfig, global_tokens=None) -> list[ObjectDescription]:
    pos = positional_ids(scene.objects, cfg.oracle_descriptions)
    return [build_description(o, cfg, p, global_tokens) for o, p in zip(scene.objects, pos)]


def dedup_by_description(scene: Scene, cfg: FeaturizerConfig) -> list[int]:
    """Positions of objects kept after dropping later objects whose description repeats."""
    seen = set()
    keep = []
    for k, d in enumerate(scene_descriptions(scene, cfg.with_(use_global_tokens=False, use_ids_in_descriptions=False))):
        if d.key in seen:
            continue
        seen.add(d.key)
        keep.append(k)
    return keep


# ---------------------------------------------------------------------------
# sequence assembly


@dataclass
class EncodedExample:
    dialogue_id: str
    turn_index: int
    object_ids: list[int]
    texts: list[str]
    token_ids: list[np.ndarray]
    segment_ids: list[np.ndarray]
    bbox: np.ndarray        # (N, 4), normalised to [0, 1]
    roi: np.ndarray         # (N, F)
    pos_ids: np.ndarray     # (N,), 0 = masked
    labels: np.ndarray      # (N,)
    mask: np.ndarray        # (N,)
    gold: Optional[tuple[int, ...]] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_candidates(self) -> int:
        return len(self.object_ids)


def history_objects(dialogue: Dialogue, t: int, x: Union[int, str]) -> list[int]:
    """Objects mentioned by the system over the previous ``x`` turns (or all),
    in turn order with repeats removed."""
    if x == ALL:
        start = 0
    else:
        start = max(0, t - x)
    out: list[int] = []
    seen = set()
    for turn in dialogue.turns[start:t]:
        for i in turn.system_mentioned:
            if i not in seen:
                seen.add(i)
                out.append(i)
    return out


def _join(*parts: str) -> str:
    return " ".join(p for p in parts if p)


def assemble_sequence(
    dialogue: Dialogue,
    t: int,
    corpus: Corpus,
    cfg: FeaturizerConfig,
    vocab: Vocabulary,
    global_tokens: Optional[GlobalTokens] = None,
    training: bool = False,
) -> EncodedExample:
    """Build one language sequence per candidate object for turn ``t``.

    Layout: ``SYSTEM : S_{t-1} [SEP] O [SEP] USER : U_t [SEP] d_n``; ablated
    parts leave their separators in place so other segments are unchanged.
    """
    if not 0 <= t < len(dialogue.turns):
        raise TurnOutOfRange(f"turn {t} outside dialogue {dialogue.dialogue_id}")
    turn = dialogue.turns[t]
    scene = corpus.scene_for(dialogue, t)
    objects = list(scene.objects)
    if training and len(objects) > cfg.max_objects:
        raise SceneTooLarge(f"scene {scene.scene_id} has {len(objects)} > {cfg.max_objects} objects")

    descs = scene_descriptions(scene, cfg, global_tokens)
    if cfg.dedup_descriptions:
        keep = dedup_by_description(scene, cfg)
        objects = [objects[k] for k in keep]
        descs = [descs[k] for k in keep]

    prev_system = dialogue.turns[t - 1].system if t > 0 else ""
    system_part = _join("SYSTEM :", prev_system) if cfg.use_prev_system_turn else ""
    hist = history_objects(dialogue, t, cfg.history_object_turns)
    if cfg.use_global_tokens:
        hist_scene = corpus.scene_for(dialogue, max(t - 1, 0))
        by_index = {o.index: o for o in hist_scene.objects}
        by_index.update({o.index: o for o in scene.objects})
        obj_part = " ".join(global_tokens[by_index[i].prefab] for i in hist if i in by_index)
    else:
        obj_part = " ".join(str(i) for i in hist)
    user_part = _join("USER :", turn.user) if cfg.use_user_utterance else ""

    system_tok = tokenize(system_part)
    obj_tok = tokenize(obj_part)
    user_tok = tokenize(user_part)
    texts, token_ids, segment_ids = [], [], []
    for d in descs:
        question = tokenize(d.text)
        # Over-long inputs lose the oldest system tokens first, then the end of
        # the user utterance, then the oldest history objects.
        over = 4 + len(system_tok) + len(obj_tok) + len(user_tok) + len(question) - cfg.max_tokens
        cut_sys = min(max(over, 0), len(system_tok))
        over -= cut_sys
        cut_user = min(max(over, 0), len(user_tok))
        over -= cut_user
        cut_obj = min(max(over, 0), len(obj_tok))
        if over - cut_obj > 0:
            raise ConfigError(f"max_tokens={cfg.max_tokens} cannot hold the separators and description {d.text!r}")
        context = (
            [CLS] + system_tok[cut_sys:] + [SEP] + obj_tok[cut_obj:] + [SEP]
            + user_tok[: len(user_tok) - cut_user] + [SEP]
        )
        ids = vocab.encode_tokens(context + question)
        seg = [0] * len(context) + [1] * len(question)
        texts.append(f"{system_part} [SEP] {obj_part} [SEP] {user_part} [SEP] {d.text}")
        token_ids.append(np.asarray(ids, dtype=np.int64))
        segment_ids.append(np.asarray(seg, dtype=np.int64))

    width, height = scene.image_size
    bbox = np.array(
        [[o.bbox[0] / width, o.bbox[1] / height, o.bbox[2] / width, o.bbox[3] / height] for o in objects],
        dtype=np.float64,
    ).reshape(len(objects), 4)
    bbox = np.clip(bbox, 0.0, 1.0)
    roi_dim = max((len(o.roi) for o in objects), default=0)
    roi = np.zeros((len(objects), roi_dim))
    for k, o in enumerate(objects):
        roi[k, : len(o.roi)] = o.roi
    pos = np.array([d.positional_id for d in descs], dtype=np.int64)
    if not cfg.use_bbox:
        bbox = np.zeros_like(bbox)
    if not cfg.use_roi:
        roi = np.zeros_like(roi)
    if not cfg.use_position_counts:
        pos = np.zeros_like(pos)

    gold = turn.targets
    labels = np.zeros(len(objects))
    if gold is not None:
        ids_kept = {o.index for o in objects}
        dropped = [i for i in gold if i not in ids_kept]
        if dropped:
            log.warning("dialogue %s turn %d: targets %s removed by duplicate filter", dialogue.dialogue_id, t, dropped)
            gold = tuple(i for i in gold if i in ids_kept)
        target_set = set(gold)
        labels = np.array([1.0 if o.index in target_set else 0.0 for o in objects])
    return EncodedExample(
        dialogue_id=dialogue.dialogue_id,
        turn_index=t,
        object_ids=[o.index for o in objects],
        texts=texts,
        token_ids=token_ids,
        segment_ids=segment_ids,
        bbox=bbox,
        roi=roi,
        pos_ids=pos,
        labels=labels,
        mask=np.ones(len(objects)),
        gold=gold,
    )


def flatten_dialogue(dialogue: Dialogue, t: int, history_turns: Union[int, str] = 0) -> list[str]:
    """Tokens ``[CLS] [SYS] S [USR] U ...`` ending in the user utterance at ``t``.

    Each user turn is paired with the system utterance that preceded it (empty
    before the first turn). ``history_turns=0`` keeps only ``[USR] U_t``.
    """
    if not 0 <= t < len(dialogue.turns):
        raise TurnOutOfRange(f"turn {t} outside dialogue {dialogue.dialogue_id}")
    if history_turns == 0:
        return [CLS, USR] + tokenize(dialogue.turns[t].user)
    if history_turns == ALL:
        start = 0
    elif isinstance(history_turns, int) and history_turns > 0:
        start = max(0, t - history_turns)
    else:
        raise ConfigError(f"history_turns must be >= 0 or 'all', got {history_turns!r}")
    out = [CLS]
    for k in range(start, t + 1):
        prev_system = dialogue.turns[k - 1].system if k > 0 else ""
        out += [SYS] + tokenize(prev_system) + [USR] + tokenize(dialogue.turns[k].user)
    return out


def truncate_flat(tokens: list[str], max_len: int) -> list[str]:
    """Keep [CLS] plus the most recent tokens."""
    if len(tokens) <= max_len:
        return tokens
    return tokens[:1] + tokens[len(tokens) - (max_len - 1):]


def corpus_texts(corpus: Corpus) -> list[str]:
    """Every text span the featurizer may emit for ``corpus``; feeds vocabulary building."""
    out = []
    for s in corpus.scenes.values():
        for o in s.objects:
            out.append(o.type)
            out.append(simplify_colour(o.colour))
            if o.pred_type:
                out.append(o.pred_type)
            if o.pred_colour:
                out.append(simplify_colour(o.pred_colour))
    for _, t in corpus.iter_turns():
        out.append(t.user)
        out.append(t.system)
    return out


def build_vocabulary(train: Corpus, global_tokens: Optional[GlobalTokens] = None) -> Vocabulary:
    return Vocabulary.build(corpus_texts(train), global_tokens.tokens if global_tokens else ())
