"""Dataset ingestion, splitting, sparsity bucketing, and synthetic corpora.

File formats:

- dataset: UTF-8 JSON-lines, one object per line with exactly the fields
  ``user`` (string), ``item`` (string), ``rating`` (positive number),
  ``features`` (array of strings), ``explanation`` (string);
- cluster-label sidecar: lines ``user<TAB>cluster_index`` — evaluation-only
  ground truth for synthetic corpora, never part of the training stream.

The synthetic generator plants user clusters with disjoint signature
lexicons, cluster-dependent rating levels, and fully deterministic
explanation templates, so cluster recovery and explanation fidelity have a
known answer at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DataError
from .rng import Rng

DATASET_FIELDS = ("user", "item", "rating", "features", "explanation")


@dataclass
class InteractionRecord:
    user: str
    item: str
    rating: float
    features: List[str]
    explanation: str


@dataclass
class DatasetSplit:
    train: List[InteractionRecord]
    valid: List[InteractionRecord]
    test: List[InteractionRecord]
    user_index: Dict[str, int]
    item_index: Dict[str, int]

    @property
    def n_users(self) -> int:
        return len(self.user_index)

    @property
    def n_items(self) -> int:
        return len(self.item_index)

    def user_ids(self, records: Sequence[InteractionRecord]) -> np.ndarray:
        unk = len(self.user_index)
        return np.array([self.user_index.get(r.user, unk) for r in records],
                        dtype=np.int64)

    def item_ids(self, records: Sequence[InteractionRecord]) -> np.ndarray:
        unk = len(self.item_index)
        return np.array([self.item_index.get(r.item, unk) for r in records],
                        dtype=np.int64)


def _validate_record(obj: dict, line_no: int) -> InteractionRecord:
    if not isinstance(obj, dict) or set(obj) != set(DATASET_FIELDS):
        missing = set(DATASET_FIELDS) - set(obj) if isinstance(obj, dict) else DATASET_FIELDS
        raise DataError(f"line {line_no}: record fields wrong (missing/extra: {missing})")
    if not isinstance(obj["user"], str) or not isinstance(obj["item"], str):
        raise DataError(f"line {line_no}: user and item must be strings")
    rating = obj["rating"]
    if not isinstance(rating, (int, float)) or isinstance(rating, bool) or rating <= 0:
        raise DataError(f"line {line_no}: rating must be a positive number")
    feats = obj["features"]
    if not isinstance(feats, list) or not all(isinstance(f, str) for f in feats):
        raise DataError(f"line {line_no}: features must be an array of strings")
    if not isinstance(obj["explanation"], str):
        raise DataError(f"line {line_no}: explanation must be a string")
    return InteractionRecord(obj["user"], obj["item"], float(rating),
                             list(feats), obj["explanation"])


def load_records(path) -> List[InteractionRecord]:
    """Parse a JSON-lines dataset; reports every malformed line by number."""
    records = []
    problems = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(_validate_record(obj, line_no))
            except json.JSONDecodeError:
                problems.append(f"line {line_no}: not valid JSON")
            except DataError as err:
                problems.append(str(err))
    if problems:
        raise DataError("; ".join(problems))
    return records


def save_records(records: Sequence[InteractionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "user": rec.user,
                "item": rec.item,
                "rating": rec.rating,
                "features": rec.features,
                "explanation": rec.explanation,
            }) + "\n")


def load_labels(path) -> Dict[str, int]:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"line {line_no}: expected user<TAB>cluster")
            labels[parts[0]] = int(parts[1])
    return labels


def save_labels(labels: Dict[str, int], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user in sorted(labels):
            fh.write(f"{user}\t{labels[user]}\n")


def split_records(records: Sequence[InteractionRecord], seed: int) -> DatasetSplit:
    """Seeded shuffle, then 80/10/10 by record count (remainder to train).

    Id maps cover train+valid+test so evaluation-time entities resolve; the
    reserved unknown index is one past the map size.
    """
    if len(records) < 10:
        raise DataError(f"need at least 10 records to split, have {len(records)}")
    shuffled = Rng(seed).substream("split").shuffle(list(records))
    n = len(shuffled)
    n_valid = n // 10
    n_test = n // 10
    n_train = n - n_valid - n_test
    train = shuffled[:n_train]
    valid = shuffled[n_train:n_train + n_valid]
    test = shuffled[n_train + n_valid:]
    users = sorted({r.user for r in shuffled})
    items = sorted({r.item for r in shuffled})
    return DatasetSplit(
        train=train, valid=valid, test=test,
        user_index={u: i for i, u in enumerate(users)},
        item_index={it: i for i, it in enumerate(items)},
    )


def sparsity_buckets(
    test_records: Sequence[InteractionRecord],
    train_records: Sequence[InteractionRecord],
) -> Tuple[List[InteractionRecord], List[InteractionRecord], List[InteractionRecord]]:
    """Split test records into three near-equal groups by how often each
    record's user appears in training: bucket 1 holds the most frequent
    users, bucket 3 the least (users unseen in training count as zero).
    Frequency ties break by user id, lexicographically.
    """
    if not test_records:
        raise DataError("cannot bucket an empty test set")
    freq: Dict[str, int] = {}
    for rec in train_records:
        freq[rec.user] = freq.get(rec.user, 0) + 1
    ranked = sorted(test_records, key=lambda r: (-freq.get(r.user, 0), r.user))
    n = len(ranked)
    sizes = [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]
    first = ranked[: sizes[0]]
    second = ranked[sizes[0]: sizes[0] + sizes[1]]
    third = ranked[sizes[0] + sizes[1]:]
    return first, second, third


# --- synthetic corpus with planted structure ---

SENTIMENT_WORDS = {1: "awful", 2: "weak", 3: "decent", 4: "great", 5: "superb"}

CLUSTER_LEXICONS = [
    ["noodles", "curry", "dumplings", "sushi", "tacos", "falafel", "ramen", "paella"],
    ["staff", "seating", "lighting", "music", "decor", "patio", "hosts", "ambience"],
    ["parking", "prices", "portions", "deals", "view", "rooftop", "location", "wifi"],
    ["trails", "guides", "maps", "gear", "summit", "campsite", "rapids", "lookout"],
    ["screens", "sound", "seats", "snacks", "lobby", "tickets", "aisles", "previews"],
]

CLUSTER_TEMPLATES = [
    "the {f1} with {f2} tasted {sentiment}",
    "the {f1} and {f2} made it feel {sentiment}",
    "with {f1} and {f2} the value felt {sentiment}",
    "the {f1} near the {f2} looked {sentiment}",
    "the {f1} before the {f2} sounded {sentiment}",
]

CLUSTER_RATING_BIAS = [2.2, 3.5, 4.8, 1.6, 3.0]


@dataclass
class SynthSpec:
    planted_clusters: int = 3
    n_users: int = 300
    n_items: int = 100
    records_per_user: int = 20
    noise_rate: float = 0.1
    rating_noise: float = 0.3
    favorites_per_user: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.planted_clusters <= len(CLUSTER_LEXICONS):
            raise DataError(
                f"planted_clusters must be in [1, {len(CLUSTER_LEXICONS)}]")
        if not 0.0 <= self.noise_rate < 1.0:
            raise DataError("noise_rate must be in [0, 1)")


def cluster_signature(cluster: int) -> List[str]:
    """The signature feature tokens planted for one cluster (disjoint
    across clusters)."""
    return list(CLUSTER_LEXICONS[cluster])


def render_explanation(cluster: int, bucket: int, f1: str, f2: str) -> str:
    """Deterministic explanation for (cluster, rating bucket, features)."""
    return CLUSTER_TEMPLATES[cluster].format(
        f1=f1, f2=f2, sentiment=SENTIMENT_WORDS[bucket])


def generate_synthetic(spec: SynthSpec) -> Tuple[List[InteractionRecord], Dict[str, int]]:
    """Planted-cluster corpus plus the user -> cluster ground-truth labels.

    Users are assigned clusters round-robin. Each record draws two distinct
    features from the user's three favorite signature tokens; each feature
    flips to a random other-cluster token with probability `noise_rate`.
    Ratings are the cluster's level plus Gaussian noise, clipped to [1, 5].
    Explanations are a pure function of (cluster, rating bucket, features).
    The labels never enter the record stream.
    """
    rng = Rng(spec.seed).substream("synth")
    k = spec.planted_clusters
    users = [f"u{idx:04d}" for idx in range(spec.n_users)]
    items = [f"i{idx:04d}" for idx in range(spec.n_items)]
    labels = {user: idx % k for idx, user in enumerate(users)}

    item_effect = {item: float(rng.uniform(1)[0] * 0.5 - 0.25) for item in items}
    favorites = {}
    for user in users:
        lex = cluster_signature(labels[user])
        favorites[user] = rng.shuffle(lex)[: spec.favorites_per_user]

    other_tokens = {
        c: [tok for cc in range(k) if cc != c for tok in CLUSTER_LEXICONS[cc]]
        for c in range(k)
    }

    records = []
    for user in users:
        cluster = labels[user]
        for _ in range(spec.records_per_user):
            item = items[int(rng.integers(1, spec.n_items)[0])]
            favs = favorites[user]
            first = int(rng.integers(1, len(favs))[0])
            second = int(rng.integers(1, len(favs) - 1)[0])
            picks = [favs[first], [f for i, f in enumerate(favs) if i != first][second]]
            feats = []
            for tok in picks:
                noisy = k > 1 and float(rng.uniform(1)[0]) < spec.noise_rate
                if noisy:
                    pool = other_tokens[cluster]
                    feats.append(pool[int(rng.integers(1, len(pool))[0])])
                else:
                    feats.append(tok)
            rating = float(np.clip(
                CLUSTER_RATING_BIAS[cluster] + item_effect[item]
                + float(rng.normal(1)[0]) * spec.rating_noise, 1.0, 5.0))
            rating = round(rating, 2)
            bucket = int(np.clip(round(rating), 1, 5))
            records.append(InteractionRecord(
                user=user, item=item, rating=rating, features=feats,
                explanation=render_explanation(cluster, bucket, feats[0], feats[1])))
    return records, labels


def corpus_stats(records: Sequence[InteractionRecord]) -> Dict[str, int]:
    features = {f for rec in records for f in rec.features}
    return {
        "users": len({r.user for r in records}),
        "items": len({r.item for r in records}),
        "records": len(records),
        "features": len(features),
    }
