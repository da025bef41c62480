"""Held-out evaluation: masked next-token loss and greedy exact match."""

from __future__ import annotations

import numpy as np

from .autodiff import softmax_cross_entropy
from .data import Sample, next_token_batch
from .errors import ConfigError
from .model import AssembledModel


def dataset_loss(model: AssembledModel, dataset: list[Sample]) -> float:
    """Mean over samples of the masked next-token cross entropy."""
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    total = 0.0
    for sample in dataset:
        tokens, targets, loss_mask = next_token_batch(sample)
        total += softmax_cross_entropy(model.logits(tokens), targets, loss_mask).item()
    return total / len(dataset)


def greedy_decode(model: AssembledModel, prompt: tuple[int, ...], n_new: int) -> list[int]:
    """Argmax continuation of the prompt, one token at a time."""
    toks = list(prompt)
    for _ in range(n_new):
        logits = model.logits(np.asarray(toks, dtype=np.int64)).values
        toks.append(int(np.argmax(logits[-1])))
    return toks[len(prompt):]


def exact_match_rate(model: AssembledModel, dataset: list[Sample]) -> float:
    """Fraction of samples whose decoded answer matches exactly."""
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    hits = 0
    for sample in dataset:
        answer = sample.answer
        got = greedy_decode(model, sample.tokens[:sample.prompt_len], len(answer))
        hits += int(tuple(got) == answer)
    return hits / len(dataset)
