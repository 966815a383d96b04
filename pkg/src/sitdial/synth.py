"""Synthetic corpora calibrated to published statistics of the shopping-dialogue data.

Language is template based: the lexical correlations between utterance form
and the disambiguation label are injected by construction so the analysis
tools can be checked for *detecting* them.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np
from scipy import optimize, stats

from .corpus import SPLITS, TRAIN_OBJECT_CAP, Corpus, Dialogue, Scene, SceneObject, Turn
from .errors import InfeasibleSpec, NoConvergence
from .taxonomy import ATTESTED_CLASSES, COLOURS, DOMAIN_TYPES, type_noun

IMAGE_W, IMAGE_H = 1920.0, 1080.0
ID_BUCKETS = ((0, 5), (5, 10), (10, None))
BISECTION_BUDGET = 64


@dataclass(frozen=True)
class CorpusSpec:
    n_dialogues: int = 200
    scene_size_mean: float = 27.6
    scene_size_sd: float = 20.7
    scene_size_max: int = 141
    # share of scenes above the training object cap; the rest follow a
    # truncated normal body solved so the overall mean/SD hit the targets
    scene_tail_frac: float = 0.04
    train_object_cap: int = TRAIN_OBJECT_CAP
    target_id_frac_below_10: float = 0.525
    target_id_frac_below_5: float = 0.301
    disamb_true_rate: float = 0.494
    target_in_history_rate: float = 0.37
    class_noise_accuracy: float = 0.654
    roi_same_class_cos_mean: float = 0.62
    roi_same_class_cos_sd: float = 0.14
    roi_dim: int = 64
    turns_min: int = 3
    turns_max: int = 7
    fashion_frac: float = 0.65
    split_fracs: tuple[float, float, float, float] = (0.65, 0.05, 0.15, 0.15)
    seed: int = 0

    def validate(self) -> None:
        probs = {
            "target_id_frac_below_10": self.target_id_frac_below_10,
            "target_id_frac_below_5": self.target_id_frac_below_5,
            "disamb_true_rate": self.disamb_true_rate,
            "target_in_history_rate": self.target_in_history_rate,
            "class_noise_accuracy": self.class_noise_accuracy,
            "scene_tail_frac": self.scene_tail_frac,
            "fashion_frac": self.fashion_frac,
        }
        for name, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise InfeasibleSpec(f"{name}={p} is not a probability")
        if self.n_dialogues < 0:
            raise InfeasibleSpec("n_dialogues must be >= 0")
        if self.target_id_frac_below_5 > self.target_id_frac_below_10:
            raise InfeasibleSpec("target_id_frac_below_5 exceeds target_id_frac_below_10")
        if not 1 <= self.scene_size_max <= 141:
            raise InfeasibleSpec("scene_size_max must lie in [1, 141]")
        if not 1 <= self.turns_min <= self.turns_max:
            raise InfeasibleSpec("need 1 <= turns_min <= turns_max")
        if not 0.0 < self.roi_same_class_cos_mean <= 1.0:
            raise InfeasibleSpec("roi_same_class_cos_mean must lie in (0, 1]: cosine to a shared prototype stays positive")
        if self.roi_same_class_cos_sd < 0 or self.roi_dim < 1:
            raise InfeasibleSpec("roi_same_class_cos_sd must be >= 0 and roi_dim >= 1")
        if abs(sum(self.split_fracs) - 1.0) > 1e-9 or min(self.split_fracs) < 0:
            raise InfeasibleSpec("split_fracs must be a distribution over the four splits")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fracs"] = list(self.split_fracs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InfeasibleSpec(f"unknown corpus spec fields: {sorted(unknown)}")
        d = dict(d)
        if "split_fracs" in d:
            d["split_fracs"] = tuple(d["split_fracs"])
        return cls(**d)


# ---------------------------------------------------------------------------
# scene sizes


@functools.lru_cache(maxsize=64)
def _size_model(mean, sd, max_size, cap, tail_frac):
    """Return (tail_frac, body_mu, body_sigma, body_hi, tail_lo, tail_hi)."""
    body_hi = min(cap, max_size)
    if max_size <= cap:
        tail_frac = 0.0
    tail_lo, tail_hi = cap + 1, max_size
    if tail_frac > 0:
        tm = (tail_lo + tail_hi) / 2
        tv = ((tail_hi - tail_lo + 1) ** 2 - 1) / 12
    else:
        tm = tv = 0.0
    bm = (mean - tail_frac * tm) / (1 - tail_frac)
    bv = (mean**2 + sd**2 - tail_frac * (tv + tm**2)) / (1 - tail_frac) - bm**2 - 1 / 12
    lo, hi = 0.5, body_hi + 0.5
    if not (lo < bm < hi) or bv <= 0 or bv >= ((hi - lo) ** 2) / 4:
        raise InfeasibleSpec(f"scene size mean/SD {mean}/{sd} unreachable with tail share {tail_frac}")

    def residual(p):
        mu, log_s = p
        s = math.exp(log_s)
        d = stats.truncnorm((lo - mu) / s, (hi - mu) / s, loc=mu, scale=s)
        return [d.mean() - bm, d.var() - bv]

    sol, info, ok, _ = optimize.fsolve(residual, [bm, 0.5 * math.log(bv)], full_output=True)
    if ok != 1 or max(abs(v) for v in residual(sol)) > 1e-6:
        raise InfeasibleSpec(f"no truncated-normal body matches scene size mean/SD {mean}/{sd}")
    return tail_frac, float(sol[0]), float(math.exp(sol[1])), body_hi, tail_lo, tail_hi


def sample_scene_size(spec: CorpusSpec, rng: np.random.Generator) -> int:
    tail, mu, sigma, body_hi, tail_lo, tail_hi = _size_model(
        spec.scene_size_mean, spec.scene_size_sd, spec.scene_size_max, spec.train_object_cap, spec.scene_tail_frac
    )
    if rng.random() < tail:
        return int(rng.integers(tail_lo, tail_hi + 1))
    lo, hi = 0.5, body_hi + 0.5
    x = stats.truncnorm.rvs((lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma, random_state=rng)
    return int(min(max(round(float(x)), 1), body_hi))


# ---------------------------------------------------------------------------
# classes, prefabs and RoI prototypes

N_PREFAB_VARIANTS = 4


def _domain_classes(domain: str) -> list[tuple[str, str]]:
    types = DOMAIN_TYPES[domain]
    return [c for c in ATTESTED_CLASSES if c[1] in types]


@functools.lru_cache(maxsize=None)
def _class_weights(domain: str) -> np.ndarray:
    # Zipf-like popularity in table order: a few classes dominate, as in a shop floor.
    n = len(_domain_classes(domain))
    w = 1.0 / (np.arange(n) + 3.0) ** 0.7
    return w / w.sum()


def class_pair_weights(spec: CorpusSpec) -> dict[tuple[str, str], float]:
    """Expected share of same-class pairs per class (proportional to squared frequency)."""
    freq = {}
    for domain, share in (("fashion", spec.fashion_frac), ("furniture", 1 - spec.fashion_frac)):
        for c, w in zip(_domain_classes(domain), _class_weights(domain)):
            freq[c] = freq.get(c, 0.0) + share * w
    total = sum(v * v for v in freq.values())
    return {c: v * v / total for c, v in freq.items() if v > 0}


def prefab_id(domain: str, colour: str, type_: str, variant: int) -> str:
    stem = "".join(w.capitalize() for w in type_.split())
    k = ATTESTED_CLASSES.index((colour, type_))
    return f"{domain}/{type_.replace(' ', '_')}/{stem}_{colour.upper()}{k:03d}{'ABCD'[variant]}"


@dataclass(frozen=True)
class RoiModel:
    prototypes: dict          # class -> unit vector
    gains: dict               # class -> prototype norm
    noise: float              # isotropic per-dimension SD


@functools.lru_cache(maxsize=32)
def _prototype_table(seed: int, roi_dim: int):
    rng = np.random.default_rng([seed, 0x501])
    protos, z = {}, {}
    for c in ATTESTED_CLASSES:
        v = rng.standard_normal(roi_dim)
        protos[c] = v / np.linalg.norm(v)
        z[c] = float(rng.standard_normal())
    return protos, z


@functools.lru_cache(maxsize=32)
def _pair_sample(spec: CorpusSpec, n_pairs: int):
    """Common random numbers for Monte-Carlo cosine estimates.

    Returns the unit prototype and gain exponent of each sampled pair's class
    plus two noise draws per pair.
    """
    weights = class_pair_weights(spec)
    classes = list(weights)
    p = np.array([weights[c] for c in classes])
    rng = np.random.default_rng([spec.seed, 0x502])
    picks = rng.choice(len(classes), size=n_pairs, p=p / p.sum())
    e1 = rng.standard_normal((n_pairs, spec.roi_dim))
    e2 = rng.standard_normal((n_pairs, spec.roi_dim))
    protos, z = _prototype_table(spec.seed, spec.roi_dim)
    units = np.stack([protos[classes[i]] for i in picks])
    zs = np.array([z[classes[i]] for i in picks])
    return units, zs, e1, e2


def _pair_cosines(units, gains, e1, e2, noise):
    mu = units * gains[:, None]
    a = mu + noise * e1
    b = mu + noise * e2
    return np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def _bisect(fn, lo, hi, target, increasing, tol=1e-7):
    """Monotone bisection; fn(lo) and fn(hi) must bracket target."""
    for _ in range(BISECTION_BUDGET):
        mid = 0.5 * (lo + hi)
        val = fn(mid)
        if (val < target) == increasing:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, abs(hi)):
            return 0.5 * (lo + hi)
    raise NoConvergence(f"bisection did not converge within {BISECTION_BUDGET} iterations")


N_CALIBRATION_PAIRS = 4000


def calibrate_roi_noise(spec: CorpusSpec, spread: float = 0.0) -> float:
    """Noise SD such that the expected same-class cosine equals the target mean.

    Uses a fixed Monte-Carlo pair sample (common random numbers), so the
    estimate is a smooth decreasing function of the noise level and the
    result is deterministic for a given seed. ``spread`` controls how much
    prototype norms vary between classes (0 means all unit norm).
    """
    target = spec.roi_same_class_cos_mean
    if not 0.0 < target <= 1.0:
        raise InfeasibleSpec("same-class cosine target must lie in (0, 1]")
    if target >= 1.0:
        return 0.0
    return _calibrate(_calibration_key(spec), spread)[0]


@functools.lru_cache(maxsize=256)
def _calibrate(spec: CorpusSpec, spread: float):
    units, zs, e1, e2 = _pair_sample(spec, N_CALIBRATION_PAIRS)
    gains = np.exp(spread * zs)
    target = spec.roi_same_class_cos_mean

    def mean_cos(noise):
        return float(_pair_cosines(units, gains, e1, e2, noise).mean())

    hi = 1.0
    while mean_cos(hi) > target:
        hi *= 4
        if hi > 1e6:
            raise NoConvergence("cannot bracket noise level")
    noise = _bisect(mean_cos, 0.0, hi, target, increasing=False)
    cos = _pair_cosines(units, gains, e1, e2, noise)
    return noise, float(cos.std())


def _calibration_key(spec: CorpusSpec) -> CorpusSpec:
    # corpus size does not enter the calibration; normalise it so caches are shared
    return replace(spec, n_dialogues=1)


def roi_model(spec: CorpusSpec) -> RoiModel:
    """Prototype norms spread so the pooled cosine SD meets its target, then noise for the mean."""
    return _roi_model(_calibration_key(spec))


@functools.lru_cache(maxsize=32)
def _roi_model(spec: CorpusSpec) -> RoiModel:
    protos, z = _prototype_table(spec.seed, spec.roi_dim)
    if spec.roi_same_class_cos_mean >= 1.0:
        return RoiModel(protos, {c: 1.0 for c in protos}, 0.0)
    sd_target = spec.roi_same_class_cos_sd
    base_sd = _calibrate(spec, 0.0)[1]
    spread = 0.0
    if sd_target > base_sd:
        hi = 0.5
        while _calibrate(spec, hi)[1] < sd_target:
            hi *= 2
            if hi > 16:
                raise InfeasibleSpec(f"cosine SD {sd_target} unreachable")
        lo = 0.0
        for _ in range(20):
            mid = 0.5 * (lo + hi)
            if _calibrate(spec, round(mid, 6))[1] < sd_target:
                lo = mid
            else:
                hi = mid
        spread = round(0.5 * (lo + hi), 6)
    noise = _calibrate(spec, spread)[0]
    return RoiModel(protos, {c: math.exp(spread * z[c]) for c in protos}, noise)


# ---------------------------------------------------------------------------
# language templates

_ATTRS = ("price", "size", "brand", "rating", "material", "sizes and prices", "reviews", "available sizes")
_ADJ_FILLERS = ("nice", "long", "new", "big", "small", "cheap", "lovely", "comfortable", "fancy", "casual")
_OPENERS_LONG = (
    "Can you tell me the {attr} of",
    "Could you let me know the {attr} of",
    "I would like to know the {attr} of",
    "Please tell me about the {attr} of",
    "Can I get the {attr} for",
)
_PREP_EXTRA = ("next to the wall", "near the window", "by the mirror", "in the back", "on the display", "beside the shelf")
_SHORT_WH = (
    "What's the price of that {noun}?",
    "Who makes that {noun}?",
    "What size is that {noun}?",
    "What brand is that {noun}?",
    "What about that {noun}?",
    "Which sizes does that {noun} come in?",
    "What's the rating on this {noun}?",
    "Who is the designer of that {noun}?",
)
_SHORT_PREFIX = ("", "", "Okay,", "Hmm,", "Alright,", "So,", "Oh,", "Okay, so")
_SHORT_SUFFIX = (
    "", "", "", "I'm curious.", "It looks interesting.", "I really like it.",
    "Just wondering.", "That one looks good.", "I'm thinking about buying it.",
)
_PRONOUN = (
    "How much is it?",
    "Does it come in other sizes?",
    "Tell me more about that one.",
    "Add it to my cart, please.",
    "What are the reviews like for that?",
    "Great, I'll take it.",
    "Who makes it?",
)
_EMPTY = (
    "Thanks, that's all for now.",
    "Do you have anything else I might like?",
    "Show me something different.",
    "Okay, thank you.",
    "Nothing else for today, thanks.",
)
_POLITE_TAIL = ("", "please.", "thanks!", "if you don't mind.", "for my sister.")


def position_phrase(obj: SceneObject, rng: np.random.Generator, detailed: bool) -> str:
    x, y, w, h = obj.bbox
    cx, cy = (x + w / 2) / IMAGE_W, (y + h / 2) / IMAGE_H
    horiz = "on the left" if cx < 0.34 else "on the right" if cx > 0.66 else "in the middle"
    if not detailed:
        return horiz
    vert = "on the top shelf" if cy < 0.35 else "at the bottom" if cy > 0.7 else "in the front"
    return f"{vert} {horiz}" if rng.random() < 0.7 else f"{horiz} {vert}"


def _noun(obj: SceneObject) -> str:
    return type_noun(obj.type)


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def _describe(obj: SceneObject) -> str:
    return f"{obj.colour} {_noun(obj)}"


def _tidy(text: str) -> str:
    text = " ".join(text.split())
    return text[0].upper() + text[1:] if text else text


def user_descriptive(obj, rng, long: bool) -> str:
    if long:
        adj = _pick(rng, _ADJ_FILLERS) + " " if rng.random() < 0.6 else ""
        body = f"{_pick(rng, _OPENERS_LONG).format(attr=_pick(rng, _ATTRS))} the {adj}{_describe(obj)} {position_phrase(obj, rng, True)}"
        if rng.random() < 0.5:
            body += " " + _pick(rng, _PREP_EXTRA)
        tail = _pick(rng, _POLITE_TAIL)
        return _tidy(f"{body}, {tail}" if tail else body + "?")
    return _tidy(f"I like the {_describe(obj)} {position_phrase(obj, rng, False)}. How much is it?")


def user_wh_descriptive(obj, rng) -> str:
    wh = _pick(rng, ("What's the {attr} of", "What is the {attr} of", "Who makes")).format(attr=_pick(rng, _ATTRS))
    return _tidy(f"{wh} the {_describe(obj)} {position_phrase(obj, rng, True)}?")


def user_ambiguous(obj, rng) -> str:
    prefix = _pick(rng, _SHORT_PREFIX)
    body = _pick(rng, _SHORT_WH).format(noun=_noun(obj))
    if prefix:
        body = body[0].lower() + body[1:]
    return _tidy(f"{prefix} {body} {_pick(rng, _SHORT_SUFFIX)}")


def user_post_clarification(obj, rng) -> str:
    choice = rng.random()
    if choice < 0.4:
        return _tidy(f"The {obj.colour} one {position_phrase(obj, rng, False)}.")
    if choice < 0.7:
        return _tidy(f"I meant the {_describe(obj)} {position_phrase(obj, rng, True)}.")
    return _tidy(f"The one {position_phrase(obj, rng, False)}, please.")


def user_multi(objs, rng) -> str:
    a, b = objs[:2]
    return _tidy(
        f"Can you compare the {_describe(a)} {position_phrase(a, rng, False)} and the {_describe(b)} {position_phrase(b, rng, False)}?"
    )


def system_text(mentioned, rng, clarify: bool) -> str:
    if clarify:
        if len(mentioned) >= 2:
            a, b = mentioned[:2]
            return f"Which one do you mean? The {a.colour} one {position_phrase(a, rng, False)}, or the {b.colour} one {position_phrase(b, rng, False)}?"
        return "Sorry, which one do you mean?"
    if not mentioned:
        return _pick(rng, ("Let me check that for you.", "Sure, anything else?", "Of course."))
    first = mentioned[0]
    parts = [f"The {_describe(first)} {position_phrase(first, rng, False)} is ${int(rng.integers(15, 300))} and has a {rng.integers(20, 50) / 10:.1f} rating."]
    if len(mentioned) > 1:
        others = [f"the {_describe(o)} {position_phrase(o, rng, False)}" for o in mentioned[1:]]
        parts.append("We also have " + " and ".join(others) + ".")
    return " ".join(parts)


# ---------------------------------------------------------------------------
# generation

_KIND_AMBIG = "ambiguous"       # disambiguation true: needs a clarification
_KIND_POST = "post_clarification"
_KIND_EMPTY = "empty"
_KIND_NORMAL = "normal"


def _scene(spec: CorpusSpec, ordinal: int, roi: RoiModel) -> tuple[Scene, list[tuple[str, str]]]:
    rng = np.random.default_rng([spec.seed, ordinal, 0])
    domain = "fashion" if rng.random() < spec.fashion_frac else "furniture"
    size = sample_scene_size(spec, rng)
    classes = _domain_classes(domain)
    weights = _class_weights(domain)
    picks = rng.choice(len(classes), size=size, p=weights)
    types_in_domain = DOMAIN_TYPES[domain]
    objs = []
    gold = []
    for slot, k in enumerate(picks):
        colour, type_ = classes[k]
        variant = int(rng.integers(N_PREFAB_VARIANTS))
        w = float(rng.uniform(60, 360))
        h = float(rng.uniform(80, 420))
        x = float(rng.uniform(0, IMAGE_W - w))
        y = float(rng.uniform(0, IMAGE_H - h))
        pred_colour = colour if rng.random() < spec.class_noise_accuracy else _pick(rng, [c for c in COLOURS if c != colour])
        pred_type = type_ if rng.random() < spec.class_noise_accuracy else _pick(rng, [t for t in types_in_domain if t != type_])
        vec = roi.prototypes[(colour, type_)] * roi.gains[(colour, type_)] + roi.noise * rng.standard_normal(spec.roi_dim)
        objs.append(
            SceneObject(
                index=slot,  # placeholder; canonical ids are assigned after the dialogue plan
                prefab=prefab_id(domain, colour, type_, variant),
                bbox=(round(x, 2), round(y, 2), round(w, 2), round(h, 2)),
                colour=colour,
                type=type_,
                pred_colour=pred_colour,
                pred_type=pred_type,
                roi=tuple(float(v) for v in vec),
            )
        )
        gold.append((colour, type_))
    return Scene(f"s{ordinal:06d}", tuple(objs), domain, (IMAGE_W, IMAGE_H)), gold


def _ambiguous_slots(scene: Scene) -> list[int]:
    counts = {}
    for o in scene.objects:
        counts[o.type] = counts.get(o.type, 0) + 1
    return [k for k, o in enumerate(scene.objects) if counts[o.type] >= 2]


def _plan_kinds(spec: CorpusSpec, ordinal: int, can_ambiguate: bool, p_true: float):
    rng = np.random.default_rng([spec.seed, ordinal, 1])
    n = int(rng.integers(spec.turns_min, spec.turns_max + 1))
    k = min(int(rng.choice(3, p=[0.15, 0.6, 0.25])), (n + 1) // 2)
    # labelled turns are never adjacent, so a clarification is always followed by a plain turn
    pool = list(range(n))
    labeled = []
    for _ in range(k):
        free = [i for i in pool if all(abs(i - j) > 1 for j in labeled)]
        if not free:
            break
        labeled.append(int(free[int(rng.integers(len(free)))]))
    labels = {i: bool(can_ambiguate and rng.random() < p_true) for i in sorted(labeled)}
    kinds = []
    for t in range(n):
        if labels.get(t) is True:
            kinds.append(_KIND_AMBIG)
        elif t > 0 and labels.get(t - 1) is True:
            kinds.append(_KIND_POST)
        elif t not in labels and rng.random() < 0.07:
            kinds.append(_KIND_EMPTY)
        else:
            kinds.append(_KIND_NORMAL)
    return kinds, labels


def _assign_ids(spec: CorpusSpec, rng, n_objects: int, target_slots: list[int]) -> list[int]:
    """Canonical ids: targets get ids from the small-id skew; other objects fill in."""
    universe = max(spec.scene_size_max, n_objects)
    p5 = spec.target_id_frac_below_5
    p10 = spec.target_id_frac_below_10 - p5
    probs = np.array([p5, p10, 1.0 - p5 - p10])
    free = [list(range(0, 5)), list(range(5, 10)), list(range(10, universe))]
    ids = [-1] * n_objects
    for slot in target_slots:
        bucket = int(rng.choice(3, p=probs))
        if not free[bucket]:
            bucket = next(b for b in (2, 1, 0) if free[b])
        pool = free[bucket]
        val = pool.pop(int(rng.integers(len(pool))))
        ids[slot] = val
    rest = sorted(free[0] + free[1] + free[2])
    need = n_objects - len(target_slots)
    if need:
        arr = np.array(rest, dtype=float)
        w = 1.0 / (1.0 + arr / 12.0)
        chosen = rng.choice(len(rest), size=need, replace=False, p=w / w.sum())
        fill = iter(int(rest[i]) for i in chosen)
        for slot in range(n_objects):
            if ids[slot] < 0:
                ids[slot] = next(fill)
    return ids


def _dialogue(spec, ordinal, scene, kinds, labels, p_hist) -> tuple[Dialogue, Scene]:
    rng = np.random.default_rng([spec.seed, ordinal, 2])
    n_obj = len(scene.objects)
    n = len(kinds)
    ambiguous = _ambiguous_slots(scene)
    last_f: dict[int, int] = {}       # slot -> last turn that needs it unmentioned so far
    first_t: dict[int, int] = {}      # slot -> first turn that needs a prior mention
    required: list[set] = [set() for _ in range(n)]
    targets: list[Optional[list[int]]] = [None] * n
    styles: list[str] = [""] * n

    def mention_before(slot, t):
        lo = last_f.get(slot, 0)
        if any(slot in required[s] for s in range(lo, t)):
            return
        s = t - 1 if rng.random() < 0.75 else int(rng.integers(lo, t))
        required[s].add(slot)

    prev_target = None
    for t, kind in enumerate(kinds):
        if kind == _KIND_EMPTY:
            targets[t] = []
            styles[t] = "empty"
            continue
        if kind == _KIND_AMBIG:
            slot = int(ambiguous[int(rng.integers(len(ambiguous)))])
            targets[t] = [slot]
            styles[t] = "ambiguous"
            prev_target = slot
            continue
        want_hist = t > 0 and rng.random() < p_hist
        fresh = [k for k in range(n_obj) if k not in first_t]
        if kind == _KIND_POST:
            slot = prev_target
            if not want_hist and slot in first_t:
                want_hist = True
        elif want_hist:
            slot = prev_target if prev_target is not None and rng.random() < 0.5 else int(rng.integers(n_obj))
        else:
            if not fresh:
                want_hist = t > 0
                slot = int(rng.integers(n_obj))
            else:
                slot = fresh[int(rng.integers(len(fresh)))]
        if want_hist and t == 0:
            want_hist = False
        if want_hist:
            mention_before(slot, t)
            first_t.setdefault(slot, t)
        else:
            last_f[slot] = t
        tg = [slot]
        style = "post" if kind == _KIND_POST else ("pronoun" if want_hist and rng.random() < 0.5 else "descriptive")
        if kind == _KIND_NORMAL:
            r = rng.random()
            others = [k for k in (range(n_obj) if want_hist else fresh) if k != slot]
            if r < 0.13 and others:
                second = int(others[int(rng.integers(len(others)))])
                if not want_hist:
                    last_f[second] = t
                tg.append(second)
                style = "multi"
            elif r < 0.15:
                tg.append(slot)
                style = "duplicate"
        targets[t] = tg
        styles[t] = style
        prev_target = slot

    # System mentions: required ones plus the current targets and distractors,
    # restricted to objects allowed to be mentioned at that point.
    mentions: list[list[int]] = []
    for s in range(n):
        allowed = [k for k in range(n_obj) if last_f.get(k, -1) <= s]
        chosen = list(sorted(required[s]))
        for k in targets[s] or ():
            if k in allowed and k not in chosen and rng.random() < 0.6:
                chosen.append(k)
        if kinds[s] == _KIND_AMBIG:
            same = [k for k in allowed if scene.objects[k].type == scene.objects[targets[s][0]].type and k not in chosen]
            rng.shuffle(same)
            chosen += same[:2]
        n_extra = int(rng.choice(4, p=[0.3, 0.4, 0.2, 0.1]))
        pool = [k for k in allowed if k not in chosen]
        if pool and n_extra:
            chosen += [int(pool[i]) for i in rng.choice(len(pool), size=min(n_extra, len(pool)), replace=False)]
        mentions.append(chosen)

    target_slots = sorted({k for tg in targets if tg for k in tg})
    ids = _assign_ids(spec, rng, n_obj, target_slots)
    objects = tuple(
        SceneObject(ids[k], o.prefab, o.bbox, o.colour, o.type, o.pred_colour, o.pred_type, o.roi)
        for k, o in enumerate(scene.objects)
    )
    scene = Scene(scene.scene_id, objects, scene.domain, scene.image_size)

    turns = []
    for t in range(n):
        tg = targets[t]
        label = labels.get(t)
        obj = objects[tg[0]] if tg else None
        style = styles[t]
        if style == "empty":
            user = _pick(rng, _EMPTY)
        elif style == "ambiguous":
            user = user_ambiguous(obj, rng)
        elif style == "post":
            user = user_post_clarification(obj, rng)
        elif style == "pronoun":
            user = _pick(rng, _PRONOUN)
        elif style == "multi":
            user = user_multi([objects[k] for k in tg], rng)
        elif style == "duplicate":
            user = _tidy(f"I'll take two of the {_describe(obj)} {position_phrase(obj, rng, False)}, please.")
        elif label is False and rng.random() < 0.2:
            user = user_wh_descriptive(obj, rng)
        else:
            user = user_descriptive(obj, rng, long=label is False or rng.random() < 0.5)
        spoken = [objects[k] for k in mentions[t]]
        if kinds[t] == _KIND_AMBIG:
            # the clarification question names the same-type candidates first
            spoken.sort(key=lambda o: o.type != obj.type)
        system = system_text(spoken, rng, clarify=kinds[t] == _KIND_AMBIG)
        turns.append(
            Turn(
                index=t,
                user=user,
                system=system,
                system_mentioned=tuple(objects[k].index for k in mentions[t]),
                disambiguate=label,
                targets=tuple(objects[k].index for k in tg),
                excluded=kinds[t] == _KIND_AMBIG,
            )
        )
    split_rng = np.random.default_rng([spec.seed, ordinal, 3])
    split = SPLITS[int(split_rng.choice(4, p=np.array(spec.split_fracs)))]
    return Dialogue(f"d{ordinal:06d}", scene.scene_id, tuple(turns), split), scene


def generate(spec: CorpusSpec) -> Corpus:
    """Deterministic synthetic corpus for ``spec`` (one scene per dialogue)."""
    spec.validate()
    if spec.n_dialogues == 0:
        return Corpus({}, ())
    roi = roi_model(spec)
    scenes = [_scene(spec, i, roi)[0] for i in range(spec.n_dialogues)]
    supports = np.array([len(_ambiguous_slots(s)) > 0 for s in scenes])
    p_true = min(1.0, spec.disamb_true_rate / supports.mean()) if supports.any() else 0.0
    plans = [_plan_kinds(spec, i, bool(supports[i]), p_true) for i in range(spec.n_dialogues)]

    # Turn 0 can never have a target in history; scale the per-turn rate so
    # the corpus-level rate over scored turns meets the target.
    counted = eligible = 0
    for kinds, _ in plans:
        for t, k in enumerate(kinds):
            if k in (_KIND_NORMAL, _KIND_POST):
                counted += 1
                eligible += t > 0
    p_hist = min(1.0, spec.target_in_history_rate * counted / eligible) if eligible else 0.0

    dialogues, final_scenes = [], {}
    for i, (kinds, labels) in enumerate(plans):
        d, s = _dialogue(spec, i, scenes[i], kinds, labels, p_hist)
        dialogues.append(d)
        final_scenes[s.scene_id] = s
    return Corpus(final_scenes, tuple(dialogues))
