"""Shared test helpers: checkpoint builders, toy datasets, fixture records."""

from __future__ import annotations

import numpy as np

from palette.align_trainer import PreferenceRecord
from palette.common import CONTINENTS
from palette.reference_model import ModelConfig, init_model
from palette.tensor_store import Checkpoint, TensorSpec


def ckpt(metadata=None, **tensors) -> Checkpoint:
    """Checkpoint from name -> array-like kwargs."""
    return Checkpoint(
        [TensorSpec.from_array(name, np.asarray(data, dtype=np.float32)) for name, data in tensors.items()],
        metadata,
    )


def random_checkpoint(rng: np.random.Generator, n_tensors=3, max_elems=16, prefix="") -> Checkpoint:
    specs = []
    for i in range(n_tensors):
        size = int(rng.integers(1, max_elems + 1))
        specs.append(TensorSpec.from_array(f"{prefix}t{i:02d}", rng.normal(size=size)))
    return Checkpoint(specs)


def like(base: Checkpoint, rng: np.random.Generator) -> Checkpoint:
    """A random checkpoint with the same schema as `base`."""
    return Checkpoint(
        [TensorSpec.from_array(name, rng.normal(size=spec.shape)) for name, spec in base.items()],
        base.metadata,
    )


def tiny_config(**overrides) -> ModelConfig:
    defaults = dict(d_model=16, n_layers=1, n_heads=2, max_seq=160, seed=3)
    defaults.update(overrides)
    return ModelConfig(**defaults)


def tiny_model(**overrides) -> Checkpoint:
    return init_model(tiny_config(**overrides))


GRAD_CHECK_RECORD = PreferenceRecord(
    query="why is the sky blue",
    preferred="light scatters",
    rejected=("dragons", "magnets", "no reason", "paint"),
    continent="Europe",
)


# Three fixed records evaluated on the seed-42 default model; the expected
# loss values are frozen in the trainer tests.
FIXTURE_RECORDS = [
    PreferenceRecord(
        query="What matters most at a family meal?",
        preferred="Sharing food and stories with elders first.",
        rejected=(
            "Eating quickly to return to work.",
            "Keeping conversation to a minimum.",
            "Serving each person separately.",
            "Starting before everyone arrives.",
        ),
        continent="Africa",
    ),
    PreferenceRecord(
        query="How should disagreements be settled?",
        preferred="Openly, with each side stating its case.",
        rejected=(
            "Quietly, through an intermediary.",
            "By deferring to the eldest person.",
            "By avoiding the topic entirely.",
            "Through a formal written complaint.",
        ),
        continent="America",
    ),
    PreferenceRecord(
        query="What makes a good neighbour?",
        preferred="Respecting privacy while staying ready to help.",
        rejected=(
            "Visiting unannounced every day.",
            "Never speaking across the fence.",
            "Competing over garden size.",
            "Reporting every small noise.",
        ),
        continent="Europe",
    ),
]

_STYLES = {
    "Africa": "community comes first",
    "America": "individual choice leads",
    "Asia": "harmony guides the group",
    "Europe": "tradition meets civic rules",
    "Oceania": "land and sea bind people",
}

_TOPICS = ["meals", "greetings", "weddings", "markets", "music", "elders", "rain", "harvest"]


def toy_preference_dataset(n_queries=50, seed=42) -> list[PreferenceRecord]:
    """Continent-tagged toy set: 5 records per query, one per continent.

    The query carries the continent cue, so preferred responses are
    predictable from the query and the margin is not symmetric-by-construction.
    """
    rng = np.random.default_rng(seed)
    records = []
    for q in range(n_queries):
        topic = _TOPICS[int(rng.integers(len(_TOPICS)))]
        finals = {c: f"In {c}, {_STYLES[c]} for {topic}." for c in CONTINENTS}
        for c in CONTINENTS:
            records.append(
                PreferenceRecord(
                    query=f"q{q} ({c}): how do people approach {topic}?",
                    preferred=finals[c],
                    rejected=tuple(finals[o] for o in CONTINENTS if o != c),
                    continent=c,
                )
            )
    return records
