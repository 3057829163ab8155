"""Continent gate: a d_model x 5 routing matrix initialized from system-prompt
hidden states, and the softmax weighting it induces over a prompt encoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .common import CONTINENTS, round9
from .errors import DimensionMismatch, EmptyPrompt, NonFiniteInput
from .tensor_store import Checkpoint, TensorSpec, load_checkpoint, save_checkpoint
from .reference_model import TinyTransformer, tokenize

DEFAULT_SYSTEM_PROMPTS: dict[str, str] = {
    c: (
        f"You are a knowledge chatbot about {c}. Ground every answer in {c}'s "
        f"cultures, traditions, history, and daily life."
    )
    for c in CONTINENTS
}

_COLUMN_NORM_TOL = 1e-6


@dataclass
class GateMatrix:
    """Routing matrix with one column per continent, in fixed order."""

    matrix: np.ndarray
    labels: tuple[str, ...] = CONTINENTS
    normalized: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labels = tuple(self.labels)
        if self.matrix.ndim != 2 or self.matrix.shape[1] != len(self.labels):
            raise DimensionMismatch(
                f"gate matrix shape {self.matrix.shape} does not give one column "
                f"per label ({len(self.labels)})"
            )
        if len(self.labels) != len(CONTINENTS):
            raise DimensionMismatch(f"expected {len(CONTINENTS)} labels, got {len(self.labels)}")
        if not np.all(np.isfinite(self.matrix)):
            raise NonFiniteInput("gate matrix contains non-finite entries")
        if self.normalized:
            norms = np.linalg.norm(self.matrix, axis=0)
            if np.any(np.abs(norms - 1.0) > _COLUMN_NORM_TOL):
                raise DimensionMismatch("normalized gate matrix must have unit-norm columns")

    @property
    def d_model(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class GateWeights:
    """A 5-way simplex vector aligned with the gate labels."""

    values: tuple[float, ...]
    labels: tuple[str, ...] = CONTINENTS

    def __post_init__(self):
        if len(self.values) != len(self.labels):
            raise DimensionMismatch("weights and labels differ in length")
        if abs(sum(self.values) - 1.0) > 1e-6:
            raise DimensionMismatch(f"gate weights sum to {sum(self.values)}, expected 1")

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels, self.values))

    def argmax_label(self) -> str:
        return self.labels[int(np.argmax(self.values))]


def softmax_weights(logits: Sequence[float], temperature: float = 1.0) -> np.ndarray:
    """Max-subtracted softmax; shift-invariant and numerically stable."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("softmax input contains non-finite entries")
    e = np.exp(z - z.max())
    return e / e.sum()


def init_gate(
    model: Checkpoint,
    system_prompts: Mapping[str, str] | Sequence[str] | None = None,
    normalize: bool = True,
) -> GateMatrix:
    """Build the gate from the mean-pooled hidden state of each continent's
    system prompt.

    Columns are L2-normalized by default so that routing a prompt against its
    own column scores cosine 1; raw hidden states are kept with
    ``normalize=False``.
    """
    if system_prompts is None:
        system_prompts = DEFAULT_SYSTEM_PROMPTS
    if isinstance(system_prompts, Mapping):
        missing = [c for c in CONTINENTS if c not in system_prompts]
        if missing:
            raise EmptyPrompt(f"missing system prompts for {missing}")
        prompts = [system_prompts[c] for c in CONTINENTS]
    else:
        prompts = list(system_prompts)
        if len(prompts) != len(CONTINENTS):
            raise DimensionMismatch(f"expected {len(CONTINENTS)} prompts, got {len(prompts)}")

    tt = TinyTransformer.from_checkpoint(model)
    columns = []
    for continent, prompt in zip(CONTINENTS, prompts):
        if not prompt:
            raise EmptyPrompt(f"empty system prompt for {continent}")
        hidden = tt.mean_hidden(tokenize(prompt, tt.cfg.max_seq))
        if normalize:
            hidden = hidden / np.linalg.norm(hidden)
        columns.append(hidden)
    return GateMatrix(matrix=np.stack(columns, axis=1), normalized=normalize)


def route(hidden: Sequence[float], gate: GateMatrix, temperature: float = 1.0) -> GateWeights:
    """softmax(hidden . W_g): the expert weighting for one prompt encoding."""
    vec = np.asarray(hidden, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != gate.d_model:
        raise DimensionMismatch(
            f"hidden vector has shape {vec.shape}, gate expects ({gate.d_model},)"
        )
    if not np.all(np.isfinite(vec)):
        raise NonFiniteInput("hidden vector contains non-finite entries")
    weights = softmax_weights(vec @ gate.matrix, temperature)
    return GateWeights(values=tuple(float(w) for w in weights), labels=gate.labels)


def route_prompt(
    model: Checkpoint, gate: GateMatrix, prompt: str, temperature: float = 1.0
) -> GateWeights:
    """Encode the prompt (mean-pooled hidden) and route it."""
    tt = TinyTransformer.from_checkpoint(model)
    hidden = tt.mean_hidden(tokenize(prompt, tt.cfg.max_seq))
    return route(hidden, gate, temperature)


def save_gate(gate: GateMatrix, path) -> None:
    metadata = {
        "labels": json.dumps(list(gate.labels)),
        "normalized": "true" if gate.normalized else "false",
    }
    save_checkpoint(Checkpoint([TensorSpec.from_array("W_g", gate.matrix)], metadata), path)


def load_gate(path) -> GateMatrix:
    ckpt = load_checkpoint(path)
    if "W_g" not in ckpt:
        raise DimensionMismatch("gate checkpoint must contain a tensor named 'W_g'")
    labels = tuple(json.loads(ckpt.metadata.get("labels", json.dumps(list(CONTINENTS)))))
    normalized = ckpt.metadata.get("normalized", "true") == "true"
    matrix = ckpt["W_g"].array().astype(np.float64)
    if normalized:
        # f32 storage wobbles the unit norms; restore them exactly.
        matrix = matrix / np.linalg.norm(matrix, axis=0, keepdims=True)
    return GateMatrix(matrix=matrix, labels=labels, normalized=normalized)


def format_weights(weights: GateWeights) -> str:
    """JSON object keyed by continent, floats at 9 significant digits."""
    return json.dumps({k: round9(v) for k, v in weights.as_dict().items()}, sort_keys=True)
