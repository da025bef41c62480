"""Synthetic character-level tasks, dataset partitioning, and serialization.

Every sample is prompt tokens followed by answer tokens; the ground-truth
mask is 1 exactly on the answer suffix. Token ids index a fixed 64-symbol
charset laid out so that structurally required symbols come first and each
task kind needs only a prefix of the id space.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, PartitionError

# structural symbols first so small vocabularies can still host simple kinds
CHARSET = "=+CRSM" + "0123456789" + "abcdefghijklmnopqrstuvwxyz" + "ABGHIJKLNOPQTUVWXYZDEF"
assert len(CHARSET) == 64 and len(set(CHARSET)) == 64

TOKEN_OF = {ch: i for i, ch in enumerate(CHARSET)}
EQ, PLUS = TOKEN_OF["="], TOKEN_OF["+"]
DIGIT_BASE = 6          # ids 6..15 are digits 0-9
LETTER_BASE = 16        # ids 16..41 are letters a-z
N_LETTERS = 26

TASK_KINDS = ("copy", "reverse", "modular_add", "sort")
_OPCODE = {"copy": TOKEN_OF["C"], "reverse": TOKEN_OF["R"], "sort": TOKEN_OF["S"]}

# highest token id each kind can emit
_MAX_ID = {
    "copy": LETTER_BASE + N_LETTERS - 1,
    "reverse": LETTER_BASE + N_LETTERS - 1,
    "sort": LETTER_BASE + N_LETTERS - 1,
    "modular_add": DIGIT_BASE + 9,
}


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    gt_mask: tuple[int, ...]
    category: str

    def __post_init__(self):
        if len(self.tokens) != len(self.gt_mask):
            raise ConfigError("tokens and mask lengths differ")
        n = sum(self.gt_mask)
        if n < 1:
            raise ConfigError("sample must mask at least one ground-truth position")
        # mask must be a contiguous suffix: prompt first, answer last
        if tuple(self.gt_mask) != (0,) * (len(self.tokens) - n) + (1,) * n:
            raise ConfigError("ground-truth mask must be a suffix region")

    @property
    def prompt_len(self) -> int:
        return len(self.tokens) - sum(self.gt_mask)

    @property
    def answer(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len:]


def _make_sample(kind: str, rng: np.random.Generator) -> Sample:
    if kind == "modular_add":
        a, b = int(rng.integers(0, 10)), int(rng.integers(0, 10))
        prompt = (DIGIT_BASE + a, PLUS, DIGIT_BASE + b, EQ)
        answer = (DIGIT_BASE + (a + b) % 10,)
    else:
        n = int(rng.integers(3, 7))
        letters = [int(x) for x in rng.integers(0, N_LETTERS, size=n)]
        if kind == "copy":
            out = letters
        elif kind == "reverse":
            out = letters[::-1]
        elif kind == "sort":
            out = sorted(letters)
        else:
            raise ConfigError(f"unknown task kind {kind!r}")
        prompt = (_OPCODE[kind],) + tuple(LETTER_BASE + x for x in letters) + (EQ,)
        answer = tuple(LETTER_BASE + x for x in out)
    mask = (0,) * len(prompt) + (1,) * len(answer)
    return Sample(prompt + answer, mask, kind)


def seed_entropy(seed) -> list[int]:
    """Normalize an int or int-sequence seed into SeedSequence entropy."""
    items = seed if isinstance(seed, (list, tuple)) else [seed]
    return [int(x) & 0xFFFFFFFF for x in items]


def generate_task(kind: str, count: int, seed, vocab_size: int = 64) -> list[Sample]:
    """Deterministic sample list for one task kind."""
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}; known: {TASK_KINDS}")
    if vocab_size <= _MAX_ID[kind]:
        raise ConfigError(
            f"vocab_size={vocab_size} too small for kind {kind!r} "
            f"(needs > {_MAX_ID[kind]})")
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    rng = np.random.default_rng(
        np.random.SeedSequence([hash_kind(kind)] + seed_entropy(seed)))
    return [_make_sample(kind, rng) for _ in range(count)]


def hash_kind(kind: str) -> int:
    """Stable small integer per kind (python hash() is salted per process)."""
    return TASK_KINDS.index(kind)


def generate_mixture(kinds: tuple[str, ...], count: int, seed,
                     vocab_size: int = 64) -> list[Sample]:
    """count samples spread as evenly as possible over kinds, shuffled."""
    if not kinds:
        raise ConfigError("mixture needs at least one task kind")
    per = count // len(kinds)
    extra = count % len(kinds)
    parts: list[Sample] = []
    for i, kind in enumerate(kinds):
        parts.extend(generate_task(kind, per + (1 if i < extra else 0), seed, vocab_size))
    rng = np.random.default_rng(np.random.SeedSequence([97] + seed_entropy(seed)))
    order = rng.permutation(len(parts))
    return [parts[i] for i in order]


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str  # "iid" | "by_category"
    n_clients: int
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("iid", "by_category"):
            raise ConfigError(f"unknown partition scheme {self.scheme!r}")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")


def partition(dataset: list[Sample], spec: PartitionSpec) -> list[list[Sample]]:
    """Split a dataset into per-client shards; every shard must be non-empty."""
    m = spec.n_clients
    if spec.scheme == "iid":
        if len(dataset) < m:
            raise PartitionError(f"{len(dataset)} samples cannot fill {m} shards")
        rng = np.random.default_rng(np.random.SeedSequence([11] + seed_entropy(spec.seed)))
        order = rng.permutation(len(dataset))
        shards: list[list[Sample]] = [[] for _ in range(m)]
        for pos, idx in enumerate(order):
            shards[pos % m].append(dataset[int(idx)])
    else:
        cats: dict[str, list[Sample]] = {}
        for s in dataset:
            cats.setdefault(s.category, []).append(s)
        if len(cats) < m:
            raise PartitionError(
                f"by_category needs at least {m} categories, found {len(cats)}")
        # largest category first onto the currently lightest shard
        shards = [[] for _ in range(m)]
        for name in sorted(cats, key=lambda c: (-len(cats[c]), c)):
            lightest = min(range(m), key=lambda i: (len(shards[i]), i))
            shards[lightest].extend(cats[name])
    if any(not s for s in shards):
        raise PartitionError("partition produced an empty shard")
    return shards


def client_weights(shards: list[list[Sample]]) -> list[Fraction]:
    """Exact aggregation weights p_m = |D_m| / |D|; they sum to 1."""
    total = sum(len(s) for s in shards)
    return [Fraction(len(s), total) for s in shards]


# ---------------------------------------------------------------------------
# next-token supervision and serialization


def next_token_batch(sample: Sample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs, targets, loss_mask) for next-token prediction.

    Position t's logits predict token t+1; the mask selects positions whose
    *predicted* token is ground truth, so it is the sample mask shifted
    left by one with the final position dropped from supervision.
    """
    toks = np.asarray(sample.tokens, dtype=np.int64)
    t = len(toks)
    targets = np.zeros(t, dtype=np.int64)
    targets[:-1] = toks[1:]
    loss_mask = np.zeros(t, dtype=np.int64)
    loss_mask[:-1] = np.asarray(sample.gt_mask, dtype=np.int64)[1:]
    return toks, targets, loss_mask


def to_lines(dataset: list[Sample]) -> str:
    """One sample per line: token ids, mask bits, category (tab-separated)."""
    rows = []
    for s in dataset:
        rows.append("{}\t{}\t{}".format(
            " ".join(map(str, s.tokens)), " ".join(map(str, s.gt_mask)), s.category))
    return "\n".join(rows) + ("\n" if rows else "")


def from_lines(text: str) -> list[Sample]:
    out = []
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"dataset line {ln}: expected 3 tab-separated fields")
        tokens = tuple(int(x) for x in parts[0].split())
        mask = tuple(int(x) for x in parts[1].split())
        out.append(Sample(tokens, mask, parts[2]))
    return out
