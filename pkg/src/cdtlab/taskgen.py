"""Synthetic multi-hop noisy-context QA with per-token class labels.

A sample is a word-level token sequence::

    <bos> context... question... <ans> answer

The context is shared filler noise with supporting facts inserted at chunk
boundaries, interference facts spread among all sentences and a few
low-frequency tokens sprinkled in.  Every token carries one class label.
Answers are re-derived by :func:`oracle_answer`, which replays the facts
through a small world state and never looks at the template that produced
them.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

SUP, INTER, IRR, LOW, QUERY, OTHER = "sup", "inter", "irr", "low", "query", "other"
CONTEXT_CLASSES = (SUP, INTER, IRR, LOW)
CLASSES = CONTEXT_CLASSES + (QUERY, OTHER)

N_SLOTS = 10


class GenerationError(RuntimeError):
    """The generator could not satisfy its construction constraints."""


class UnanswerableError(ValueError):
    """The fact sequence does not determine an answer to the question."""


# vocabulary

ACTORS = (
    "mary", "john", "daniel", "sandra", "mike", "julie", "fred", "bill",
    "emma", "jeff", "lucy", "oliver",
)
LOCATIONS = ("office", "bedroom", "bathroom", "kitchen", "garden", "hallway", "cellar", "attic")
OBJECTS = (
    "apple", "football", "milk", "book", "key", "ball", "lamp", "cup", "hat", "box",
)
VERBS = {
    "move": ("went", "journeyed", "travelled", "moved"),
    "pickup": ("got", "took", "grabbed", "picked"),
    "drop": ("dropped", "discarded", "left", "put"),
}
SPECIALS = ("<pad>", "<bos>", "<ans>", ".")
QUESTION_WORDS = ("where", "was", "is", "the", "before", "prior", "to", "drop", "?")


class Vocab:
    """Partitioned word vocabulary.

    Blocks: specials, question words, actors, verbs, locations, objects,
    procedural noise words ``n000...`` and reserved low-frequency tokens
    ``<lf00>...``.  Noise and low-frequency blocks never overlap entity words.
    """

    def __init__(self, n_noise: int = 400, n_low: int = 64):
        verbs = tuple(v for kind in ("move", "pickup", "drop") for v in VERBS[kind])
        self.noise_words = tuple(f"n{i:03d}" for i in range(n_noise))
        self.low_words = tuple(f"<lf{i:02d}>" for i in range(n_low))
        self.words: tuple[str, ...] = (
            SPECIALS + QUESTION_WORDS + ACTORS + verbs + LOCATIONS + OBJECTS
            + self.noise_words + self.low_words
        )
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary blocks overlap")
        self.index = {w: i for i, w in enumerate(self.words)}
        self.verb_kind = {v: kind for kind, vs in VERBS.items() for v in vs}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index[w] for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.words[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.index["<pad>"]

    def ids_of(self, words: Iterable[str]) -> set[int]:
        return {self.index[w] for w in words}

    @property
    def entity_ids(self) -> set[int]:
        return self.ids_of(ACTORS + LOCATIONS + OBJECTS)

    @property
    def location_ids(self) -> set[int]:
        return self.ids_of(LOCATIONS)


DEFAULT_VOCAB = Vocab()


# facts and questions


@dataclass(frozen=True)
class Fact:
    actor: str
    predicate: str  # move | pickup | drop
    argument: str
    verb: str

    @property
    def surface(self) -> tuple[str, ...]:
        return (self.actor, self.verb, self.argument, ".")

    def tokens(self, vocab: Vocab = DEFAULT_VOCAB) -> list[int]:
        return vocab.encode(self.surface)

    @classmethod
    def parse(cls, words: Sequence[str], vocab: Vocab = DEFAULT_VOCAB) -> "Fact":
        if len(words) != 4 or words[3] != ".":
            raise ValueError(f"not a fact sentence: {' '.join(words)}")
        actor, verb, arg = words[:3]
        kind = vocab.verb_kind.get(verb)
        if actor not in ACTORS or kind is None:
            raise ValueError(f"not a fact sentence: {' '.join(words)}")
        expected = LOCATIONS if kind == "move" else OBJECTS
        if arg not in expected:
            raise ValueError(f"argument {arg!r} does not fit {kind}")
        return cls(actor, kind, arg, verb)


@dataclass(frozen=True)
class Question:
    """``kind``: ``where`` (current location), ``before`` (location before
    ``place``) or ``before_drop`` (location before the drop location)."""

    kind: str
    obj: str
    place: str | None = None

    @property
    def surface(self) -> tuple[str, ...]:
        if self.kind == "where":
            return ("where", "is", "the", self.obj, "?")
        if self.kind == "before":
            return ("where", "was", "the", self.obj, "before", "the", self.place, "?")
        if self.kind == "before_drop":
            return ("where", "was", "the", self.obj, "prior", "to", "drop", "?")
        raise ValueError(f"unknown question kind {self.kind!r}")

    @classmethod
    def parse(cls, words: Sequence[str]) -> "Question":
        words = tuple(words)
        if len(words) == 5 and words[:3] == ("where", "is", "the") and words[4] == "?":
            return cls("where", words[3])
        if len(words) == 8 and words[:3] == ("where", "was", "the") and words[4:6] == ("before", "the"):
            return cls("before", words[3], words[6])
        if len(words) == 8 and words[:3] == ("where", "was", "the") and words[4:] == ("prior", "to", "drop", "?"):
            return cls("before_drop", words[3])
        raise ValueError(f"not a question: {' '.join(words)}")


def oracle_answer(facts: Sequence[Fact], question: Question) -> str:
    """Replay ``facts`` through a world state and answer ``question``.

    The world tracks each actor's location and each object's holder.  The
    queried object's location history grows whenever it is picked up at a
    known place or its holder moves.
    """
    actor_loc: dict[str, str] = {}
    holder: dict[str, str | None] = {}
    obj_loc: dict[str, str] = {}
    history: list[str] = []
    picked = False
    drop_place: str | None = None
    target = question.obj

    def visit(place: str):
        if not history or history[-1] != place:
            history.append(place)

    for f in facts:
        if f.predicate == "move":
            actor_loc[f.actor] = f.argument
            for obj, who in holder.items():
                if who == f.actor:
                    obj_loc[obj] = f.argument
                    if obj == target:
                        visit(f.argument)
        elif f.predicate == "pickup":
            if holder.get(f.argument) is not None:
                continue
            holder[f.argument] = f.actor
            if f.actor in actor_loc:
                obj_loc[f.argument] = actor_loc[f.actor]
            if f.argument == target:
                picked = True
                if f.actor in actor_loc:
                    visit(actor_loc[f.actor])
        elif f.predicate == "drop":
            if holder.get(f.argument) != f.actor:
                continue
            holder[f.argument] = None
            if f.argument == target:
                drop_place = actor_loc.get(f.actor)

    if not picked:
        raise UnanswerableError(f"{target} is never picked up")
    if question.kind == "where":
        if target not in obj_loc:
            raise UnanswerableError(f"location of {target} is unknown")
        return obj_loc[target]
    if question.kind == "before_drop":
        if drop_place is None:
            raise UnanswerableError(f"{target} is never dropped")
        place = drop_place
    else:
        place = question.place
    if place not in history or history.index(place) == 0:
        raise UnanswerableError(f"no location of {target} precedes {place}")
    return history[history.index(place) - 1]


@dataclass(frozen=True)
class FactChain:
    facts: tuple[Fact, ...]
    question: Question
    answer: str


def _pick(rng: np.random.Generator, pool: Sequence[str], exclude: Iterable[str] = ()) -> str:
    excluded = set(exclude)
    choices = [w for w in pool if w not in excluded]
    if not choices:
        raise GenerationError("vocabulary exhausted")
    return choices[int(rng.integers(len(choices)))]


def _verb(rng: np.random.Generator, kind: str) -> str:
    return _pick(rng, VERBS[kind])


def make_fact_chain(
    hops: int,
    rng: np.random.Generator,
    actors: Sequence[str] = ACTORS,
    locations: Sequence[str] = LOCATIONS,
    objects: Sequence[str] = OBJECTS,
) -> FactChain:
    """Supporting facts for one question, in their fixed relative order.

    * 2 hops: ``x p o; x m y`` -- where is o?  -> y
    * 3 hops: ``x p o; x m y1; x m y2`` -- where was o before y2?  -> y1
    * 4 hops: ``x m y1; x p o; x m y2; x d o`` -- where was o prior to
      the drop?  -> y1
    """
    if len(locations) < 2 or not actors or not objects:
        raise GenerationError("need >= 2 locations, >= 1 actor and >= 1 object")
    x, o = _pick(rng, actors), _pick(rng, objects)
    y1 = _pick(rng, locations)
    y2 = _pick(rng, locations, exclude=[y1])
    move = lambda y: Fact(x, "move", y, _verb(rng, "move"))  # noqa: E731
    pickup = Fact(x, "pickup", o, _verb(rng, "pickup"))
    if hops == 2:
        return FactChain((pickup, move(y1)), Question("where", o), y1)
    if hops == 3:
        return FactChain((pickup, move(y1), move(y2)), Question("before", o, y2), y1)
    if hops == 4:
        first = move(y1)
        facts = (first, pickup, move(y2), Fact(x, "drop", o, _verb(rng, "drop")))
        return FactChain(facts, Question("before_drop", o), y1)
    raise GenerationError(f"unsupported hop count {hops}")


def make_interference(
    chain: FactChain,
    rng: np.random.Generator,
    count: int | None = None,
    n_distractors: int = 2,
) -> list[Fact]:
    """Coherent event scripts by other actors over other objects.

    The count is uniform in ``[hops, 2 * hops]`` unless given.  Events are
    valid in order (an actor only drops what it holds), so the sequence can
    be replayed by the oracle without affecting the answer.
    """
    hops = len(chain.facts)
    if count is None:
        count = int(rng.integers(hops, 2 * hops + 1))
    used_actors = {f.actor for f in chain.facts}
    used_objects = {f.argument for f in chain.facts if f.predicate != "move"}
    free_actors = [a for a in ACTORS if a not in used_actors]
    free_objects = [o for o in OBJECTS if o not in used_objects]
    if len(free_actors) < 1 or len(free_objects) < n_distractors:
        raise GenerationError("insufficient disjoint vocabulary for interference")
    order = rng.permutation(len(free_actors))[:n_distractors]
    who = [free_actors[i] for i in order]
    holding: dict[str, str | None] = {a: None for a in who}
    available = list(free_objects)
    out: list[Fact] = []
    for _ in range(count):
        a = who[int(rng.integers(len(who)))]
        options = ["move"]
        if holding[a] is None and available:
            options.append("pickup")
        if holding[a] is not None:
            options.append("drop")
        kind = options[int(rng.integers(len(options)))]
        if kind == "move":
            out.append(Fact(a, "move", _pick(rng, LOCATIONS), _verb(rng, "move")))
        elif kind == "pickup":
            obj = available.pop(int(rng.integers(len(available))))
            holding[a] = obj
            out.append(Fact(a, "pickup", obj, _verb(rng, "pickup")))
        else:
            obj = holding[a]
            holding[a] = None
            available.append(obj)
            out.append(Fact(a, "drop", obj, _verb(rng, "drop")))
    return out


# noise


def make_noise(n_tokens: int, rng: np.random.Generator, vocab: Vocab = DEFAULT_VOCAB) -> list[list[str]]:
    """Filler sentences of 4-9 noise words plus a full stop, at most ``n_tokens`` long.

    The last sentence is shortened to fit the budget.
    """
    sentences: list[list[str]] = []
    total = 0
    while n_tokens - total >= 2:
        k = min(int(rng.integers(4, 10)), n_tokens - total - 1)
        words = [vocab.noise_words[int(i)] for i in rng.integers(len(vocab.noise_words), size=k)]
        sentences.append(words + ["."])
        total += k + 1
    return sentences


def chunk_slots(sentences: Sequence[Sequence[str]], n_slots: int = N_SLOTS) -> list[int]:
    """Sentence indices where each of ``n_slots`` equal-length chunks starts.

    Chunk boundaries are snapped to the nearest sentence start; the tail
    boundary is excluded.
    """
    lengths = np.array([len(s) for s in sentences])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    total = lengths.sum()
    slots = []
    for c in range(n_slots):
        want = total * c / n_slots
        idx = int(np.argmin(np.abs(starts - want)))
        slots.append(idx)
    for c in range(1, n_slots):
        slots[c] = max(slots[c], slots[c - 1])
    return slots


# samples


@dataclass(frozen=True)
class LabeledSample:
    tokens: tuple[int, ...]
    classes: tuple[str, ...]
    question_span: tuple[int, int]
    answer_tokens: tuple[int, ...]
    hops: int
    seed: int
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def answer_span(self) -> tuple[int, int]:
        start = self.question_span[1]
        return start, start + len(self.answer_tokens)

    @property
    def context_positions(self) -> np.ndarray:
        """Positions before the question (labels are not consulted)."""
        return np.arange(self.question_span[0])

    def class_positions(self, cls: str) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.classes) if c == cls], dtype=np.int64)

    def to_json(self) -> str:
        record = {
            "tokens": list(self.tokens),
            "classes": list(self.classes),
            "question_span": list(self.question_span),
            "answer_tokens": list(self.answer_tokens),
            "hops": self.hops,
            "seed": self.seed,
            "meta": self.meta,
        }
        return json.dumps(record, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LabeledSample":
        r = json.loads(line)
        return cls(
            tokens=tuple(r["tokens"]),
            classes=tuple(r["classes"]),
            question_span=tuple(r["question_span"]),
            answer_tokens=tuple(r["answer_tokens"]),
            hops=int(r["hops"]),
            seed=int(r["seed"]),
            meta=r.get("meta", {}),
        )


@dataclass(frozen=True)
class GenSpec:
    hops: int = 3
    sample_count: int = 100
    target_len_tokens: int = 256
    permute_count: int = 5
    interference_range: tuple[int, int] = (1, 2)
    low_frequency_count: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.hops not in (2, 3, 4):
            raise ValueError(f"hops must be 2, 3 or 4, got {self.hops}")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")
        if not 1 <= self.permute_count <= math.comb(N_SLOTS, self.hops):
            raise ValueError(
                f"permute_count {self.permute_count} exceeds C({N_SLOTS},{self.hops})"
                f" = {math.comb(N_SLOTS, self.hops)}"
            )
        lo, hi = self.interference_range
        if not 0 < lo <= hi:
            raise ValueError("interference_range must satisfy 0 < lo <= hi")
        if self.low_frequency_count < 0:
            raise ValueError("low_frequency_count must be >= 0")
        if self.target_len_tokens < self.overhead() + 20:
            raise ValueError(f"target_len_tokens {self.target_len_tokens} too short for the facts")

    def overhead(self) -> int:
        """Worst-case non-noise token count of one sample."""
        fact_tokens = 4 * self.hops * (1 + self.interference_range[1])
        return 1 + fact_tokens + self.low_frequency_count + 8 + 1 + 1

    @property
    def noise_len(self) -> int:
        return self.target_len_tokens - self.overhead()

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "interference_range" in d:
            d["interference_range"] = tuple(d["interference_range"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["interference_range"] = list(self.interference_range)
        return d


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def slot_combinations(spec: GenSpec) -> list[tuple[int, ...]]:
    """``permute_count`` distinct slot combinations drawn from all C(10, hops)."""
    combos = list(itertools.combinations(range(N_SLOTS), spec.hops))
    rng = np.random.default_rng([spec.seed, 0x5107])
    picks = rng.choice(len(combos), size=spec.permute_count, replace=False)
    return [combos[int(i)] for i in sorted(picks)]


def assemble_context(
    noise: Sequence[Sequence[str]],
    chain: FactChain,
    interference: Sequence[Fact],
    slots: tuple[int, ...],
    low_tokens: Sequence[str],
    rng: np.random.Generator,
    seed: int = 0,
    vocab: Vocab = DEFAULT_VOCAB,
    max_retries: int = 50,
) -> LabeledSample:
    """Place facts into the noise and emit a labelled token sequence.

    Supporting facts go to the given chunk slots in chain order.
    Interference facts are then spread over all sentence gaps in their own
    order, with the last one forced after the final supporting fact.
    Low-frequency tokens land at random sentence boundaries.
    """
    if len(slots) != len(chain.facts) or list(slots) != sorted(set(slots)):
        raise GenerationError(f"slots {slots} must be strictly increasing, one per fact")
    starts = chunk_slots(noise)
    # (kind, words) sentences; supporting fact k before noise sentence starts[slot_k]
    items: list[tuple[str, list[str]]] = []
    by_sentence: dict[int, list[Fact]] = {}
    for fact, slot in zip(chain.facts, slots):
        by_sentence.setdefault(starts[slot], []).append(fact)
    for i, sent in enumerate(noise):
        for fact in by_sentence.get(i, []):
            items.append((SUP, list(fact.surface)))
        items.append((IRR, list(sent)))

    last_sup = max(i for i, (kind, _) in enumerate(items) if kind == SUP)
    for _ in range(max_retries):
        gaps = np.sort(rng.integers(0, len(items) + 1, size=len(interference)))
        if len(interference) and gaps[-1] <= last_sup:
            gaps[-1] = int(rng.integers(last_sup + 1, len(items) + 1))
        if not len(interference) or gaps[-1] > last_sup:
            break
    else:
        raise GenerationError("could not place interference after the last supporting fact")
    merged: list[tuple[str, list[str]]] = []
    j = 0
    for g in range(len(items) + 1):
        while j < len(interference) and gaps[j] == g:
            merged.append((INTER, list(interference[j].surface)))
            j += 1
        if g < len(items):
            merged.append(items[g])

    low_at = rng.integers(0, len(merged) + 1, size=len(low_tokens))
    words: list[str] = ["<bos>"]
    classes: list[str] = [OTHER]
    for g in range(len(merged) + 1):
        for k in np.flatnonzero(low_at == g):
            words.append(low_tokens[int(k)])
            classes.append(LOW)
        if g < len(merged):
            kind, sent = merged[g]
            words.extend(sent)
            classes.extend([kind] * len(sent))

    q_start = len(words)
    q_words = list(chain.question.surface) + ["<ans>"]
    words.extend(q_words)
    classes.extend([QUERY] * len(q_words))
    q_stop = len(words)
    words.append(chain.answer)
    classes.append(OTHER)
    return LabeledSample(
        tokens=tuple(vocab.encode(words)),
        classes=tuple(classes),
        question_span=(q_start, q_stop),
        answer_tokens=tuple(vocab.encode([chain.answer])),
        hops=len(chain.facts),
        seed=seed,
        meta={"slots": list(slots), "interference_count": len(interference)},
    )


# audit


def extract_facts(sample: LabeledSample, vocab: Vocab = DEFAULT_VOCAB) -> tuple[list[Fact], list[str]]:
    """Re-parse the fact sentences (sup and inter runs) from a sample."""
    facts, kinds = [], []
    words = vocab.decode(sample.tokens)
    i = 0
    end = sample.question_span[0]
    while i < end:
        c = sample.classes[i]
        if c in (SUP, INTER):
            facts.append(Fact.parse(words[i : i + 4], vocab))
            kinds.append(c)
            i += 4
        else:
            i += 1
    return facts, kinds


def validate(sample: LabeledSample, vocab: Vocab = DEFAULT_VOCAB) -> list[str]:
    """All constraint violations of one sample (empty list means sound)."""
    problems: list[str] = []
    n = len(sample.tokens)
    if len(sample.classes) != n:
        return ["classes length differs from tokens length"]
    q0, q1 = sample.question_span
    if not 0 < q0 < q1 <= n:
        return ["question span out of bounds"]
    if any(c not in CLASSES for c in sample.classes):
        problems.append("unknown class label")
    try:
        facts, kinds = extract_facts(sample, vocab)
        question = Question.parse(vocab.decode(sample.tokens[q0 : q1 - 1]))
    except ValueError as exc:
        return [f"unparseable: {exc}"]
    sup = [f for f, k in zip(facts, kinds) if k == SUP]
    inter = [f for f, k in zip(facts, kinds) if k == INTER]
    try:
        answer = oracle_answer(facts, question)
        if tuple(vocab.encode([answer])) != tuple(sample.answer_tokens):
            problems.append(f"oracle answer {answer} differs from label")
        if oracle_answer(sup, question) != answer:
            problems.append("interference changes the answer")
    except UnanswerableError as exc:
        problems.append(f"unanswerable: {exc}")
    if len(sup) != sample.hops:
        problems.append(f"{len(sup)} supporting facts for {sample.hops} hops")
    if not sample.hops <= len(inter) <= 2 * sample.hops:
        problems.append(f"interference count {len(inter)} outside [{sample.hops}, {2 * sample.hops}]")
    sup_pos = [i for i, c in enumerate(sample.classes) if c == SUP]
    inter_pos = [i for i, c in enumerate(sample.classes) if c == INTER]
    if not inter_pos or not sup_pos or max(inter_pos) < max(sup_pos):
        problems.append("no interference after the last supporting fact")
    sup_objects = {f.argument for f in sup if f.predicate != "move"}
    if any(f.argument in sup_objects for f in inter):
        problems.append("interference reuses a supporting object")
    entity = vocab.entity_ids
    if any(sample.tokens[i] in entity for i, c in enumerate(sample.classes) if c in (IRR, LOW)):
        problems.append("noise token collides with an entity word")
    chain_order = sample.meta.get("chain_order")
    if chain_order is not None and [" ".join(f.surface) for f in sup] != chain_order:
        problems.append("supporting-fact order differs from chain order")
    return problems


# datasets


@dataclass
class Manifest:
    spec: dict
    seeds: list[int]
    slot_combinations: list[list[int]]
    audit: dict
    corpus_digest: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def corpus_digest(samples: Iterable[LabeledSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.to_json().encode())
        h.update(b"\n")
    return h.hexdigest()


def generate_sample(
    spec: GenSpec,
    index: int,
    noise: Sequence[Sequence[str]],
    combos: Sequence[tuple[int, ...]],
    low_tokens: Sequence[str],
    vocab: Vocab = DEFAULT_VOCAB,
) -> LabeledSample:
    seed = sample_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    chain = make_fact_chain(spec.hops, rng)
    lo, hi = spec.interference_range
    count = int(rng.integers(lo * spec.hops, hi * spec.hops + 1))
    interference = make_interference(chain, rng, count=count)
    slots = combos[int(rng.integers(len(combos)))]
    sample = assemble_context(noise, chain, interference, slots, low_tokens, rng, seed=seed, vocab=vocab)
    meta = dict(sample.meta, index=index, chain_order=[" ".join(f.surface) for f in chain.facts])
    return LabeledSample(
        sample.tokens, sample.classes, sample.question_span, sample.answer_tokens,
        sample.hops, sample.seed, meta,
    )


def iter_dataset(spec: GenSpec, vocab: Vocab = DEFAULT_VOCAB) -> Iterator[LabeledSample]:
    """Deterministic sample stream; all samples share one noise context."""
    noise = make_noise(spec.noise_len, np.random.default_rng([spec.seed, spec.target_len_tokens, 0x401]), vocab)
    combos = slot_combinations(spec)
    # low-frequency tokens: each used at most once per shard of the reserved block
    low_rng = np.random.default_rng([spec.seed, 0x10F])
    per_shard = len(vocab.low_words) // max(spec.low_frequency_count, 1)
    pool: list[str] = []
    for index in range(spec.sample_count):
        if spec.low_frequency_count and index % per_shard == 0:
            pool = [vocab.low_words[int(i)] for i in low_rng.permutation(len(vocab.low_words))]
        low = [pool.pop() for _ in range(spec.low_frequency_count)]
        try:
            yield generate_sample(spec, index, noise, combos, low, vocab)
        except GenerationError as exc:
            raise GenerationError(f"sample {index}: {exc}") from exc


def gen_dataset(spec: GenSpec, vocab: Vocab = DEFAULT_VOCAB) -> tuple[list[LabeledSample], Manifest]:
    samples = list(iter_dataset(spec, vocab))
    failures = {}
    for s in samples:
        problems = validate(s, vocab)
        if problems:
            failures[s.meta["index"]] = problems
    audit = {
        "checked": len(samples),
        "passed": len(samples) - len(failures),
        "failures": {str(k): v for k, v in failures.items()},
    }
    manifest = Manifest(
        spec=spec.to_dict(),
        seeds=[s.seed for s in samples],
        slot_combinations=[list(c) for c in slot_combinations(spec)],
        audit=audit,
        corpus_digest=corpus_digest(samples),
    )
    return samples, manifest


def write_dataset(samples: Iterable[LabeledSample], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_dataset(path: str | Path) -> list[LabeledSample]:
    with open(path) as fh:
        return [LabeledSample.from_json(line) for line in fh if line.strip()]


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
