"""Dependency-parsed sentences: CoNLL-U I/O, candidate sidecars, repeated-span
grouping and a synthetic event-detection corpus generator."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

TRIGGER = "trigger"
ARGUMENT = "argument"
KINDS = (TRIGGER, ARGUMENT)
NULL_LABEL = 0
DEFAULT_MAX_LENGTH = 128


class ConlluError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        self.reason = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TreeError(ValueError):
    def __init__(self, message, sentence_id=None):
        self.sentence_id = sentence_id
        super().__init__(f"sentence {sentence_id}: {message}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    index: int
    surface: str
    head: int | None
    deprel: str = "_"


@dataclass(frozen=True)
class CandidateSpan:
    position: int
    gold_label: int
    kind: str = TRIGGER


@dataclass(frozen=True)
class ParsedSentence:
    tokens: tuple[Token, ...]
    candidates: tuple[CandidateSpan, ...] = ()
    id: str = ""

    def __len__(self):
        return len(self.tokens)

    @property
    def heads(self) -> list[int | None]:
        return [t.head for t in self.tokens]

    def neighbors(self, position: int) -> list[int]:
        """1-hop dependency neighbours: the head plus all children."""
        out = [t.index for t in self.tokens if t.head == position]
        head = self.tokens[position].head
        if head is not None:
            out.append(head)
        return sorted(out)

    def candidate_at(self, position: int, kind: str = TRIGGER) -> CandidateSpan:
        for c in self.candidates:
            if c.position == position and c.kind == kind:
                return c
        raise KeyError((self.id, position, kind))


@dataclass(frozen=True)
class OccurrenceGroup:
    sentence_id: str
    positions: tuple[int, ...]
    kind: str = TRIGGER
    key: str = ""

    @property
    def n(self) -> int:
        return len(self.positions)


def validate_tree(heads, sentence_id=None):
    """Raise TreeError unless ``heads`` (0-based, None for root) form a tree."""
    n = len(heads)
    if n == 0:
        raise TreeError("empty sentence", sentence_id)
    roots = [i for i, h in enumerate(heads) if h is None]
    if len(roots) != 1:
        raise TreeError(f"expected exactly one root, found {len(roots)}", sentence_id)
    for i, h in enumerate(heads):
        if h is not None and not 0 <= h < n:
            raise TreeError(f"token {i} has head {h} outside sentence", sentence_id)
        if h == i:
            raise TreeError(f"token {i} is its own head", sentence_id)
    # every chain must reach the root within n steps
    for i in range(n):
        node, steps = i, 0
        while heads[node] is not None:
            node = heads[node]
            steps += 1
            if steps > n:
                raise TreeError(f"cycle through token {i}", sentence_id)


def parse_conllu(text: str) -> list[ParsedSentence]:
    """Parse CoNLL-U text into sentences (without candidates).

    Only ID, FORM, HEAD and DEPREL are kept.  Multiword-token ranges (``1-2``)
    and empty nodes (``1.1``) are skipped.  A ``# sent_id = ...`` comment names
    the sentence; otherwise it is called ``s<k>`` by order of appearance.
    """
    sentences = []
    rows, sent_id = [], None

    def flush():
        nonlocal rows, sent_id
        if rows:
            sid = sent_id if sent_id is not None else f"s{len(sentences)}"
            tokens = tuple(Token(i, form, head, rel) for i, (form, head, rel) in enumerate(rows))
            validate_tree([t.head for t in tokens], sid)
            sentences.append(ParsedSentence(tokens=tokens, id=sid))
        rows, sent_id = [], None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sent_id") and "=" in body:
                sent_id = body.split("=", 1)[1].strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(f"expected 10 tab-separated columns, got {len(cols)}", lineno)
        tid = cols[0]
        if "-" in tid or "." in tid:
            continue
        try:
            idx = int(tid)
            head = int(cols[6])
        except ValueError:
            raise ConlluError(f"non-integer ID or HEAD ({tid!r}, {cols[6]!r})", lineno) from None
        if idx != len(rows) + 1:
            raise ConlluError(f"token ID {idx} out of sequence", lineno)
        rows.append((cols[1], None if head == 0 else head - 1, cols[7]))
    flush()
    return sentences


def serialize_conllu(sentences) -> str:
    out = []
    for s in sentences:
        out.append(f"# sent_id = {s.id}")
        for t in s.tokens:
            head = 0 if t.head is None else t.head + 1
            cols = [str(t.index + 1), t.surface, "_", "_", "_", "_", str(head), t.deprel or "_", "_", "_"]
            out.append("\t".join(cols))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def candidate_records(sentences) -> list[dict]:
    return [
        {"sentence_id": s.id, "position": c.position, "kind": c.kind, "label": c.gold_label}
        for s in sentences
        for c in s.candidates
    ]


def serialize_candidates(sentences) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in candidate_records(sentences))


def parse_candidates(text: str) -> list[dict]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            records.append(
                {
                    "sentence_id": str(rec["sentence_id"]),
                    "position": int(rec["position"]),
                    "kind": str(rec.get("kind", TRIGGER)),
                    "label": int(rec["label"]),
                }
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ConlluError(f"bad candidate record ({exc})", lineno) from None
    return records


def attach_candidates(sentences, records, num_labels=None) -> list[ParsedSentence]:
    by_id = {s.id: [] for s in sentences}
    for rec in records:
        sid = rec["sentence_id"]
        if sid not in by_id:
            raise ConlluError(f"candidate refers to unknown sentence {sid!r}")
        by_id[sid].append(CandidateSpan(rec["position"], rec["label"], rec["kind"]))
    out = []
    for s in sentences:
        cands = tuple(sorted(by_id[s.id], key=lambda c: (c.position, c.kind)))
        s = replace(s, candidates=cands)
        validate_candidates(s, num_labels)
        out.append(s)
    return out


def validate_candidates(s: ParsedSentence, num_labels=None):
    seen = set()
    for c in s.candidates:
        if not 0 <= c.position < len(s):
            raise TreeError(f"candidate position {c.position} outside sentence", s.id)
        if c.kind not in KINDS:
            raise TreeError(f"unknown candidate kind {c.kind!r}", s.id)
        if c.gold_label < 0 or (num_labels is not None and c.gold_label >= num_labels):
            raise TreeError(f"label {c.gold_label} outside label set", s.id)
        if (c.position, c.kind) in seen:
            raise TreeError(f"duplicate candidate at {c.position}", s.id)
        seen.add((c.position, c.kind))


def read_corpus(conllu_path, candidates_path=None, num_labels=None) -> list[ParsedSentence]:
    conllu_path = Path(conllu_path)
    if candidates_path is None:
        candidates_path = sidecar_path(conllu_path)
    sentences = parse_conllu(conllu_path.read_text(encoding="utf-8"))
    records = parse_candidates(Path(candidates_path).read_text(encoding="utf-8"))
    return attach_candidates(sentences, records, num_labels)


def sidecar_path(conllu_path) -> Path:
    return Path(conllu_path).with_suffix(".jsonl")


def truncate(s: ParsedSentence, max_length: int = DEFAULT_MAX_LENGTH) -> ParsedSentence:
    """Drop candidates at or beyond ``max_length``.

    Tokens are kept so field sizes still reflect the full parse; encoders crop
    their inputs to ``max_length`` themselves.
    """
    if len(s) <= max_length:
        return s
    kept = tuple(c for c in s.candidates if c.position < max_length)
    warnings.warn(
        f"sentence {s.id}: length {len(s)} exceeds {max_length}; "
        f"dropped {len(s.candidates) - len(kept)} candidate(s)",
        stacklevel=2,
    )
    return replace(s, candidates=kept)


def matching_key(s: ParsedSentence, c: CandidateSpan) -> tuple[str, str]:
    return s.tokens[c.position].surface.casefold(), c.kind


def group_occurrences(s: ParsedSentence) -> list[OccurrenceGroup]:
    """Partition the candidates of ``s`` into groups of identical spans."""
    groups: dict[tuple[str, str], list[int]] = {}
    for c in sorted(s.candidates, key=lambda c: c.position):
        groups.setdefault(matching_key(s, c), []).append(c.position)
    return [
        OccurrenceGroup(s.id, tuple(positions), kind, surface)
        for (surface, kind), positions in groups.items()
    ]


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SyntheticConfig:
    n_sentences: int = 2000
    num_labels: int = 8
    filler_vocab: int = 120
    trigger_vocab: int = 12
    cues_per_label: int = 1
    min_length: int = 10
    max_length: int = 18
    # fraction of sentences whose trigger word occurs twice
    repeat_prob: float = 0.3
    # largest linear distance between the two occurrences
    repeat_max_gap: int = 8
    # chance that each repeated occurrence also has a competing cue in its field
    repeat_noise: float = 1.0
    distractors: int = 2
    null_candidate_prob: float = 0.5
    cue_in_field: bool = True

    def validate(self):
        if self.n_sentences < 1:
            raise ConfigError("n_sentences must be >= 1")
        if self.num_labels < 2:
            raise ConfigError("num_labels must be >= 2 (null label plus one event type)")
        if self.filler_vocab < 1 or self.trigger_vocab < 2 or self.cues_per_label < 1:
            raise ConfigError("vocabulary sizes must be positive (trigger_vocab >= 2)")
        if not 6 <= self.min_length <= self.max_length:
            raise ConfigError("need 6 <= min_length <= max_length")
        if self.repeat_max_gap < 2:
            raise ConfigError("repeat_max_gap must be >= 2")
        for name in ("repeat_prob", "repeat_noise", "null_candidate_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.distractors < 0:
            raise ConfigError("distractors must be >= 0")


def random_projective_tree(n: int, rng: np.random.Generator) -> list[int | None]:
    """Random projective dependency tree over ``n`` linear positions."""
    heads: list[int | None] = [None] * n
    stack = [(0, n, None)]
    while stack:
        lo, hi, parent = stack.pop()
        if lo >= hi:
            continue
        root = int(rng.integers(lo, hi))
        heads[root] = parent
        stack.append((lo, root, root))
        stack.append((root + 1, hi, root))
    return heads


def _neighbors(heads, p):
    out = {i for i, h in enumerate(heads) if h == p}
    if heads[p] is not None:
        out.add(heads[p])
    return out


def _nearest(p, options):
    return min(options, key=lambda q: (abs(q - p), q))


def _window(heads, p):
    """Linear span covered by the field of ``p``."""
    d = max((abs(q - p) for q in _neighbors(heads, p)), default=1)
    return set(range(p - d, p + d + 1))


def _repeat_site(heads, rng, max_gap):
    """A (left, shared, right) triple: two positions with a common neighbour between them."""
    sites = []
    for h in range(len(heads)):
        nb = _neighbors(heads, h)
        for a in nb:
            for b in nb:
                if a < h < b and b - a <= max_gap:
                    sites.append((a, h, b))
    if not sites:
        return None
    return sites[int(rng.integers(len(sites)))]


def generate_synthetic(config: SyntheticConfig, seed: int) -> list[ParsedSentence]:
    """Deterministic synthetic corpus where labels hide in the syntactic field.

    Every sentence has one event trigger (label 1..C-1, uniform); trigger words
    themselves carry no label information.  The label is spelled by a cue
    word ``c<label>_<k>`` that is a dependency neighbour of the trigger:

    * single trigger: the cue is its linearly nearest neighbour;
    * repeated trigger (``repeat_prob``): the word occurs twice, both
      occurrences attach to a shared neighbour lying between them, and that
      shared word is the cue.  With ``repeat_noise`` each occurrence also gets
      a competing cue of another label on a private neighbour, so one field
      alone is ambiguous and only the two fields together identify the label.

    Cues of other labels are scattered as distractors outside the linear
    window of every field.  Optionally (``null_candidate_prob``) a different
    trigger word whose field holds a null cue (label 0) is added as a
    negative candidate.  With ``cue_in_field=False`` the label cue is put
    outside every field and no distractors are planted, so syntactic fields
    carry no signal.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    C = config.num_labels
    sentences = []
    attempts = 0

    def cue(lab):
        return f"c{lab}_{int(rng.integers(config.cues_per_label))}"

    def other_label(exclude):
        choices = [c for c in range(1, C) if c not in exclude]
        return int(choices[int(rng.integers(len(choices)))]) if choices else None

    while len(sentences) < config.n_sentences:
        attempts += 1
        if attempts > 50 * config.n_sentences:
            raise ConfigError("could not place patterns; increase min_length")
        n = int(rng.integers(config.min_length, config.max_length + 1))
        heads = random_projective_tree(n, rng)
        label = int(rng.integers(1, C))
        slots: dict[int, str] = {}
        if rng.random() < config.repeat_prob:
            site = _repeat_site(heads, rng, config.repeat_max_gap)
            if site is None:
                continue
            a, shared, b = site
            triggers = [a, b]
            if config.cue_in_field:
                slots[shared] = cue(label)
                used = {label}
                for t in triggers:
                    private = _neighbors(heads, t) - {shared} - set(triggers) - set(slots)
                    if private and rng.random() < config.repeat_noise:
                        lab = other_label(used)
                        if lab is not None:
                            used.add(lab)
                            slots[_nearest(t, private)] = cue(lab)
        else:
            triggers = [int(rng.integers(n))]
            nb = _neighbors(heads, triggers[0])
            if not nb:
                continue
            if config.cue_in_field:
                slots[_nearest(triggers[0], nb)] = cue(label)
        covered = set(triggers)
        for t in triggers:
            covered |= _neighbors(heads, t)

        null_pos = None
        if rng.random() < config.null_candidate_prob:
            free = [
                q
                for q in range(n)
                if q not in covered and _neighbors(heads, q) and not (_neighbors(heads, q) & covered)
            ]
            if free:
                null_pos = free[int(rng.integers(len(free)))]
                nb = _neighbors(heads, null_pos) - set(slots)
                slots[_nearest(null_pos, nb)] = cue(NULL_LABEL)
                covered |= {null_pos} | _neighbors(heads, null_pos)

        windows = set()
        for t in triggers + ([null_pos] if null_pos is not None else []):
            windows |= _window(heads, t)
        far = [q for q in range(n) if q not in windows and q not in covered]
        rng.shuffle(far)
        if not config.cue_in_field:
            spots = [q for q in range(n) if q not in covered]
            if not spots:
                continue
            slots[spots[int(rng.integers(len(spots)))]] = cue(label)
        elif C > 2:
            for q in far[: config.distractors]:
                slots[q] = cue(other_label({label}))

        trig_word = int(rng.integers(config.trigger_vocab))
        surfaces = [f"w{int(x)}" for x in rng.integers(config.filler_vocab, size=n)]
        for q, w in slots.items():
            surfaces[q] = w
        for t in triggers:
            surfaces[t] = f"t{trig_word}"
        if null_pos is not None:
            shift = 1 + int(rng.integers(config.trigger_vocab - 1))
            surfaces[null_pos] = f"t{(trig_word + shift) % config.trigger_vocab}"
        tokens = tuple(
            Token(i, surfaces[i], heads[i], "root" if heads[i] is None else "dep") for i in range(n)
        )
        cands = [CandidateSpan(t, label, TRIGGER) for t in triggers]
        if null_pos is not None:
            cands.append(CandidateSpan(null_pos, NULL_LABEL, TRIGGER))
        cands.sort(key=lambda c: c.position)
        sentences.append(ParsedSentence(tokens, tuple(cands), f"syn{len(sentences):05d}"))
    return sentences


def write_corpus(sentences, conllu_path, candidates_path=None):
    from .io import atomic_write_text

    conllu_path = Path(conllu_path)
    atomic_write_text(conllu_path, serialize_conllu(sentences))
    atomic_write_text(candidates_path or sidecar_path(conllu_path), serialize_candidates(sentences))
