"""Procedural text/motion world.

Motions are 32x6 arrays: root x, root y, heading sin, heading cos and two
limb angles (radians / pi).  Every sequence starts near the origin facing
roughly north; the family decides how root, heading and limbs evolve.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

N_FRAMES = 32
N_CHANNELS = 6

LOCOMOTION = ("circle-cw", "circle-ccw", "line-north", "line-east", "line-west", "zigzag", "figure-eight")
LIMB_POSTURE = ("spin-left", "spin-right", "wave-limb-a", "wave-limb-b", "stand-still")
FAMILIES = LOCOMOTION + LIMB_POSTURE
SPEEDS = ("slow", "medium", "fast")
SIZES = ("small", "large")

_SPEED_FACTOR = {"slow": 0.75, "medium": 1.0, "fast": 1.35}
_SIZE_FACTOR = {"small": 0.6, "large": 1.0}

_FAMILY_PHRASE = {
    "circle-cw": "walks in a circle clockwise",
    "circle-ccw": "walks in a circle counterclockwise",
    "line-north": "walks straight to the north",
    "line-east": "walks straight to the east",
    "line-west": "walks straight to the west",
    "zigzag": "walks forward in a zigzag",
    "figure-eight": "walks in a figure eight",
    "spin-left": "spins in place to the left",
    "spin-right": "spins in place to the right",
    "wave-limb-a": "waves the left arm",
    "wave-limb-b": "waves the right arm",
    "stand-still": "stands still",
}
_SPEED_WORD = {"slow": "slowly", "medium": "steadily", "fast": "quickly"}
_SIZE_PHRASE = {"small": "with small moves", "large": "with large moves"}

PAD, NULL = "<pad>", "<null>"
PROMPT_LEN = 12


def _build_vocab() -> list[str]:
    words = {"a", "person"}
    for phrase in (*_FAMILY_PHRASE.values(), *_SPEED_WORD.values(), *_SIZE_PHRASE.values()):
        words.update(phrase.split())
    return [PAD, NULL, *sorted(words)]


VOCAB = _build_vocab()
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = WORD_TO_ID[PAD]
NULL_ID = WORD_TO_ID[NULL]


class VocabularyError(ValueError):
    def __init__(self, word: str):
        super().__init__(f"unknown word {word!r}")
        self.word = word


@dataclass(frozen=True)
class PromptSpec:
    family: str
    speed: str = "medium"
    size: str = "large"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.speed not in SPEEDS:
            raise ValueError(f"unknown speed {self.speed!r}")
        if self.size not in SIZES:
            raise ValueError(f"unknown size {self.size!r}")


@dataclass(frozen=True)
class PromptTokens:
    ids: tuple[int, ...]
    text: str


ALL_SPECS = tuple(PromptSpec(f, sp, sz) for f, sp, sz in product(FAMILIES, SPEEDS, SIZES))


def render_prompt(spec: PromptSpec) -> str:
    return f"a person {_FAMILY_PHRASE[spec.family]} {_SPEED_WORD[spec.speed]} {_SIZE_PHRASE[spec.size]}"


def tokenize(text: str) -> PromptTokens:
    words = text.lower().split()
    if len(words) > PROMPT_LEN:
        raise ValueError(f"prompt longer than {PROMPT_LEN} tokens")
    ids = []
    for w in words:
        if w not in WORD_TO_ID or w in (PAD, NULL):
            raise VocabularyError(w)
        ids.append(WORD_TO_ID[w])
    ids += [PAD_ID] * (PROMPT_LEN - len(ids))
    return PromptTokens(tuple(ids), " ".join(words))


def null_tokens() -> PromptTokens:
    return PromptTokens((NULL_ID,) + (PAD_ID,) * (PROMPT_LEN - 1), "")


def spec_tokens(spec: PromptSpec) -> PromptTokens:
    return tokenize(render_prompt(spec))


def parse_prompt(text: str) -> PromptSpec | None:
    """Inverse of render_prompt for template strings; None for free text."""
    norm = " ".join(text.lower().split())
    for spec in ALL_SPECS:
        if render_prompt(spec) == norm:
            return spec
    return None


# --- generator --------------------------------------------------------------


def _heading_from_velocity(xy: np.ndarray, fallback: float) -> np.ndarray:
    vel = np.gradient(xy, axis=0)
    ang = np.arctan2(vel[:, 1], vel[:, 0])
    still = np.hypot(vel[:, 0], vel[:, 1]) < 1e-9
    ang[still] = fallback
    return ang


def gen_motion(spec: PromptSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one ground-truth sequence for ``spec``.  Returns (32, 6) float64."""
    T = N_FRAMES
    u = np.linspace(0.0, 1.0, T)
    sp = _SPEED_FACTOR[spec.speed]
    sz = _SIZE_FACTOR[spec.size] * rng.uniform(0.9, 1.1)
    start = rng.uniform(-0.2, 0.2, size=2)
    head0 = math.pi / 2 + rng.uniform(-0.3, 0.3)
    phase = rng.uniform(0.0, 2 * math.pi)
    fam = spec.family

    xy = np.repeat(start[None, :], T, axis=0)
    heading = None
    gait_amp = 0.15 + 0.1 * sp
    limb_a = gait_amp * np.sin(2 * math.pi * (1.0 + 2.0 * sp) * u + phase)
    limb_b = -limb_a

    if fam in ("circle-cw", "circle-ccw"):
        R = 1.2 * sz
        sweep = sp * 1.5 * math.pi
        sign = -1.0 if fam == "circle-cw" else 1.0
        # heading head0, centre lies to the right (cw) or left (ccw) of it
        centre_ang = head0 + sign * math.pi / 2
        centre = start + R * np.array([math.cos(centre_ang), math.sin(centre_ang)])
        theta0 = centre_ang + math.pi
        theta = theta0 + sign * sweep * u
        xy = centre + R * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        heading = theta + sign * math.pi / 2
    elif fam in ("line-north", "line-east", "line-west"):
        direction = {"line-north": math.pi / 2, "line-east": 0.0, "line-west": math.pi}[fam]
        direction += rng.uniform(-0.1, 0.1)
        dist = 1.6 * sp * sz
        d = np.array([math.cos(direction), math.sin(direction)])
        xy = start + (u * dist)[:, None] * d
        heading = np.full(T, direction)
    elif fam == "zigzag":
        dist = 1.6 * sp * sz
        width = 0.5 * sz
        tri = 2.0 * np.abs(((u * 3.0 + 0.25) % 1.0) - 0.5) - 0.5
        xy = start + np.stack([width * tri * 2.0, u * dist], axis=1)
        heading = _heading_from_velocity(xy, head0)
    elif fam == "figure-eight":
        a = 1.0 * sz
        phi = (u * sp * 2.0 * math.pi) * 0.8
        local = np.stack([a * np.sin(phi) * np.cos(phi), a * np.sin(phi)], axis=1)
        xy = start + local
        heading = _heading_from_velocity(xy, head0)
    elif fam in ("spin-left", "spin-right"):
        sign = 1.0 if fam == "spin-left" else -1.0
        heading = head0 + sign * sp * 1.5 * math.pi * sz * u
        limb_a = np.full(T, 0.5) + 0.05 * np.sin(2 * math.pi * u + phase)
        limb_b = np.full(T, 0.5) + 0.05 * np.sin(2 * math.pi * u + phase)
    elif fam in ("wave-limb-a", "wave-limb-b"):
        heading = np.full(T, head0)
        wave = 0.7 + 0.4 * sz * np.sin(2 * math.pi * (1.0 + 2.0 * sp) * u + phase)
        rest = np.full(T, -0.1)
        limb_a, limb_b = (wave, rest) if fam == "wave-limb-a" else (rest, wave)
    else:  # stand-still
        heading = np.full(T, head0)
        limb_a = np.full(T, -0.1)
        limb_b = np.full(T, -0.1)

    frames = np.empty((T, N_CHANNELS))
    frames[:, 0:2] = xy
    frames[:, 2] = np.sin(heading)
    frames[:, 3] = np.cos(heading)
    frames[:, 4] = limb_a
    frames[:, 5] = limb_b
    jitter = rng.normal(0.0, 0.003, size=(T, N_CHANNELS))
    jitter[:, 2:4] = 0.0
    return frames + jitter


def path_length(frames: np.ndarray) -> float:
    d = np.diff(frames[..., :2], axis=-2)
    return np.sum(np.hypot(d[..., 0], d[..., 1]), axis=-1)


def signed_area(frames: np.ndarray) -> float:
    """Shoelace area of the (closed) root path; negative for clockwise."""
    x, y = frames[:, 0], frames[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


# --- datasets and splits ----------------------------------------------------


@dataclass(frozen=True)
class PromptRecord:
    """Trainer-facing record for a prompts-only split; carries no frames."""

    instance_id: int
    spec: PromptSpec
    tokens: PromptTokens

    @property
    def text(self) -> str:
        return self.tokens.text


@dataclass(frozen=True)
class MotionRecord:
    instance_id: int
    spec: PromptSpec
    tokens: PromptTokens
    frames: np.ndarray

    @property
    def text(self) -> str:
        return self.tokens.text

    def prompt_only(self) -> PromptRecord:
        return PromptRecord(self.instance_id, self.spec, self.tokens)


@dataclass
class DatasetSplit:
    name: str
    train: list
    eval: list
    motion_access: str  # "with-motion" | "prompts-only"

    def __post_init__(self):
        if self.motion_access not in ("with-motion", "prompts-only"):
            raise ValueError(self.motion_access)
        if self.motion_access == "prompts-only":
            self.train = [r.prompt_only() if isinstance(r, MotionRecord) else r for r in self.train]
        ids_train = {r.instance_id for r in self.train}
        if ids_train & {r.instance_id for r in self.eval}:
            raise ValueError("train and eval overlap")

    @property
    def train_prompts(self) -> list[PromptSpec]:
        return [r.spec for r in self.train]

    @property
    def eval_prompts(self) -> list[PromptSpec]:
        return [r.spec for r in self.eval]

    @property
    def families(self) -> list[str]:
        return sorted({r.spec.family for r in (*self.train, *self.eval)}, key=FAMILIES.index)


def make_records(families, per_spec: int, rng: np.random.Generator, start_id: int = 0) -> list[MotionRecord]:
    recs = []
    i = start_id
    for spec in ALL_SPECS:
        if spec.family not in families:
            continue
        tok = spec_tokens(spec)
        for _ in range(per_spec):
            recs.append(MotionRecord(i, spec, tok, gen_motion(spec, rng)))
            i += 1
    return recs


def _split_records(recs, ratio, rng):
    order = rng.permutation(len(recs))
    n_train = int(round(ratio * len(recs)))
    return [recs[i] for i in sorted(order[:n_train])], [recs[i] for i in sorted(order[n_train:])]


def make_split(protocol: str, held_out=(), ratio: float = 0.8, per_spec: int = 120, seed: int = 0,
               group_a=LOCOMOTION, group_b=LIMB_POSTURE):
    """Build (pretrain_split, adapt_split) for a protocol.

    The pretraining split keeps motions; the adaptation split is prompts-only
    for its train part while its eval part keeps ground truth for metrics.
    The ``full`` protocol returns a single with-motion split and None.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    if protocol == "full":
        recs = make_records(FAMILIES, per_spec, rng)
        return DatasetSplit("full", recs, [], "with-motion"), None

    if protocol == "leave-one-out":
        held = set(held_out)
        if not held:
            raise ValueError("leave-one-out needs at least one held-out family")
        if held - set(FAMILIES):
            raise ValueError(f"unknown families {sorted(held - set(FAMILIES))}")
        if held == set(FAMILIES):
            raise ValueError("held_out covers every family")
        pre_fams = [f for f in FAMILIES if f not in held]
        adapt_fams = [f for f in FAMILIES if f in held]
    elif protocol == "cross-domain":
        if set(group_a) & set(group_b):
            raise ValueError("cross-domain groups overlap")
        pre_fams, adapt_fams = list(group_a), list(group_b)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")

    pre = make_records(pre_fams, per_spec, rng)
    adapt = make_records(adapt_fams, per_spec, rng, start_id=len(pre))
    pre_train, pre_eval = _split_records(pre, ratio, rng)
    ad_train, ad_eval = _split_records(adapt, ratio, rng)
    return (
        DatasetSplit(f"{protocol}/pretrain", pre_train, pre_eval, "with-motion"),
        DatasetSplit(f"{protocol}/adapt", ad_train, ad_eval, "prompts-only"),
    )


# --- JSONL export -----------------------------------------------------------


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for r in records:
            obj = {
                "id": r.instance_id,
                "prompt_text": r.text,
                "family": r.spec.family,
                "speed": r.spec.speed,
                "size": r.spec.size,
            }
            if isinstance(r, MotionRecord):
                obj["frames"] = np.round(r.frames, 10).tolist()
            f.write(json.dumps(obj) + "\n")


def read_jsonl(path) -> list:
    out = []
    with Path(path).open() as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            spec = PromptSpec(obj["family"], obj["speed"], obj["size"])
            tok = tokenize(obj["prompt_text"])
            if "frames" in obj:
                frames = np.asarray(obj["frames"], dtype=np.float64)
                if frames.shape != (N_FRAMES, N_CHANNELS):
                    raise ValueError(f"bad frame shape {frames.shape}")
                out.append(MotionRecord(obj["id"], spec, tok, frames))
            else:
                out.append(PromptRecord(obj["id"], spec, tok))
    return out


def stack_frames(records) -> np.ndarray:
    return np.stack([r.frames for r in records])


def stack_tokens(records) -> np.ndarray:
    return np.array([r.tokens.ids for r in records], dtype=np.int64)
