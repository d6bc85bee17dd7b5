"""Feature schema and numeric encoding of cycle examples.

The schema is the single authority mapping feature names to vector slots.
Every example becomes a fixed-shape triple: a 24 x D day matrix, a 24-bit
day mask, and a U-wide user vector.  With the default schema D = 114
(108 binary slots + presence/value pairs for the 3 continuous features),
U = 35 (age flag+value, 30 birth-control indicators, 3 per-user means),
so the flattened width is 24 * 114 + 35 = 2771.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

if TYPE_CHECKING:
    from .cycles import RawExample
    from .ingest import UserProfile

WINDOW_DAYS = 24

# Daily feature catalogue: category -> types.  Binary unless the category
# is "continuous".  Pregnancy tests stay in the catalogue (they are parsed
# and used for labeling) but never receive day-vector slots.
FEATURE_TABLE: dict[str, tuple[str, ...]] = {
    "ailment": ("allergy", "cold_flu_ailment", "fever", "injury"),
    "appointment": ("date", "doctor", "ob_gyn", "vacation"),
    "collection_method": ("menstrual_cup", "pad", "panty_liner", "tampon"),
    "continuous": ("bbt", "resting_heart_rate", "weight"),
    "craving": ("carbs", "chocolate", "salty", "sweet"),
    "digestion": ("bloated", "gassy", "great_digestion", "nauseated"),
    "emotion": ("happy", "pms", "sad", "sensitive"),
    "energy": ("energized", "exhausted", "high_energy", "low_energy"),
    "exercise": ("biking", "running", "swimming", "yoga"),
    "fluid": ("atypical", "creamy", "egg_white", "sticky"),
    "hair": ("bad", "dry", "good", "oily"),
    "injection_hbc": ("administered", "type_not_provided"),
    "iud": ("inserted", "removed", "thread_checked", "type_not_provided"),
    "medication": ("antibiotic", "antihistamine", "cold_flu_medication", "pain"),
    "mental": ("calm", "distracted", "focused", "stressed"),
    "motivation": ("motivated", "productive", "unmotivated", "unproductive"),
    "pain": ("cramps", "headache", "ovulation_pain", "tender_breasts"),
    "party": ("big_night_party", "cigarettes", "drinks_party", "hangover"),
    "patch_hbc": ("removed", "removed_late", "replaced", "replaced_late", "type_not_provided"),
    "period": ("heavy", "light", "medium", "spotting"),
    "pill_hbc": ("double", "late", "missed", "taken", "type_not_provided"),
    "poop": ("constipated", "diarrhea", "great", "normal"),
    "ring_hbc": ("removed", "removed_late", "replaced", "replaced_late", "type_not_provided"),
    "sex": ("high_sex_drive", "protected", "unprotected", "withdrawal"),
    "skin": ("acne", "dry", "good", "oily"),
    "sleep": ("0_3_hrs", "3_6_hrs", "6_9_hrs", "9_hrs", "type_not_provided"),
    "social": ("conflict", "sociable", "supportive", "withdrawn"),
    "test": ("ovulation_neg", "ovulation_pos", "pregnancy_neg", "pregnancy_pos"),
}

CONTINUOUS_FEATURES = ("continuous:bbt", "continuous:resting_heart_rate", "continuous:weight")
PREGNANCY_TEST_FEATURES = ("test:pregnancy_neg", "test:pregnancy_pos")
POSITIVE_TEST_FEATURE = "test:pregnancy_pos"
NEGATIVE_TEST_FEATURE = "test:pregnancy_neg"
BLEEDING_FEATURES = ("period:heavy", "period:light", "period:medium", "period:spotting")

# Sex-act types in the order used by the structured probability model.
# "high_sex_drive" is a mood log, not an act, so it is excluded here.
SEX_ACT_FEATURES = ("sex:protected", "sex:unprotected", "sex:withdrawal")
SEX_TYPES = ("protected", "unprotected", "withdrawal", "none")

DEFAULT_BIRTH_CONTROL_METHODS = (
    "none",
    "condoms",
    "female_condom",
    "pill_combined",
    "pill_progestin_only",
    "pill_extended_cycle",
    "pill_unspecified",
    "iud_copper",
    "iud_hormonal",
    "iud_unspecified",
    "implant",
    "injection",
    "patch",
    "ring",
    "diaphragm",
    "cervical_cap",
    "sponge",
    "spermicide",
    "withdrawal",
    "fertility_awareness",
    "cycle_tracking_app",
    "lactational_amenorrhea",
    "abstinence",
    "outercourse",
    "emergency_pill",
    "tubal_ligation",
    "vasectomy_partner",
    "hormonal_unspecified",
    "barrier_unspecified",
    "other",
)

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Unknown feature name or malformed schema definition."""


def all_feature_names() -> list[str]:
    """Every catalogue feature as 'category:type', in catalogue order."""
    return [f"{cat}:{typ}" for cat, types in FEATURE_TABLE.items() for typ in types]


@dataclass(frozen=True)
class FeatureSchema:
    """Frozen slot assignment for day vectors and user vectors.

    binary_features exclude the two pregnancy-test features by
    construction; attempts to include them are rejected.
    """

    binary_features: tuple[str, ...]
    continuous_features: tuple[str, ...] = CONTINUOUS_FEATURES
    birth_control_methods: tuple[str, ...] = DEFAULT_BIRTH_CONTROL_METHODS
    version: int = SCHEMA_VERSION

    def __post_init__(self):
        for f in PREGNANCY_TEST_FEATURES:
            if f in self.binary_features:
                raise SchemaError(f"pregnancy test feature {f!r} may not receive a slot")
        if len(set(self.binary_features)) != len(self.binary_features):
            raise SchemaError("duplicate binary feature")

    # -- widths ---------------------------------------------------------

    @property
    def day_width(self) -> int:
        return len(self.binary_features) + 2 * len(self.continuous_features)

    @property
    def user_width(self) -> int:
        return 2 + len(self.birth_control_methods) + len(self.continuous_features)

    @property
    def flat_width(self) -> int:
        return WINDOW_DAYS * self.day_width + self.user_width

    # -- slot maps ------------------------------------------------------

    @cached_property
    def binary_slot(self) -> dict[str, int]:
        return {f: i for i, f in enumerate(self.binary_features)}

    @cached_property
    def continuous_presence_slot(self) -> dict[str, int]:
        base = len(self.binary_features)
        return {f: base + 2 * i for i, f in enumerate(self.continuous_features)}

    @cached_property
    def continuous_value_slot(self) -> dict[str, int]:
        base = len(self.binary_features)
        return {f: base + 2 * i + 1 for i, f in enumerate(self.continuous_features)}

    @cached_property
    def birth_control_slot(self) -> dict[str, int]:
        return {m: 2 + i for i, m in enumerate(self.birth_control_methods)}

    @cached_property
    def known_features(self) -> frozenset[str]:
        return frozenset(self.binary_features) | set(self.continuous_features) | set(
            PREGNANCY_TEST_FEATURES
        )

    @cached_property
    def sex_act_slots(self) -> np.ndarray:
        """Day-vector slots of the three sex-act features, model type order."""
        return np.array([self.binary_slot[f] for f in SEX_ACT_FEATURES], dtype=np.intp)

    def day_slot(self, feature: str) -> int:
        """Slot of a binary feature within one day vector."""
        try:
            return self.binary_slot[feature]
        except KeyError:
            raise SchemaError(f"not a binary daily feature: {feature!r}") from None

    def flat_slot(self, feature: str, day: int) -> int:
        """Index of (binary feature, cycle day) in the flattened vector."""
        if not 0 <= day < WINDOW_DAYS:
            raise SchemaError(f"cycle day out of range: {day}")
        return day * self.day_width + self.day_slot(feature)

    # -- serialization ---------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "binary_features": list(self.binary_features),
                "continuous_features": list(self.continuous_features),
                "birth_control_methods": list(self.birth_control_methods),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        d = json.loads(text)
        return cls(
            binary_features=tuple(d["binary_features"]),
            continuous_features=tuple(d["continuous_features"]),
            birth_control_methods=tuple(d["birth_control_methods"]),
            version=d.get("version", SCHEMA_VERSION),
        )


def default_schema() -> FeatureSchema:
    """Schema over the full catalogue minus pregnancy tests (D=114, U=35)."""
    binary = tuple(
        f
        for f in all_feature_names()
        if f not in CONTINUOUS_FEATURES and f not in PREGNANCY_TEST_FEATURES
    )
    return FeatureSchema(binary_features=binary)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

@dataclass
class EncodedExample:
    """One cycle as fixed-shape arrays, ready for any model."""

    day_matrix: np.ndarray  # (24, D) float64
    day_mask: np.ndarray  # (24,) float64, 1.0 = day within cycle
    user_vector: np.ndarray  # (U,) float64
    label: int
    user_id: str
    start_ordinal: int  # proleptic ordinal of the cycle start date
    continuous_means: dict[str, float] = dataclasses.field(default_factory=dict)


def encode_day(day_logs: Mapping[str, float | None], schema: FeatureSchema) -> np.ndarray:
    """Encode one day's logs into a D-wide vector.

    Binary features map to a 1 at their slot.  Continuous features map to a
    (presence, value) pair; values are expected to be already centered on
    the cycle mean (see center_continuous).  Unknown features are an error:
    the schema is authoritative.
    """
    v = np.zeros(schema.day_width)
    for feature, value in day_logs.items():
        if feature in schema.binary_slot:
            v[schema.binary_slot[feature]] = 1.0
        elif feature in schema.continuous_presence_slot:
            if value is None:
                raise SchemaError(f"continuous feature {feature!r} logged without a value")
            v[schema.continuous_presence_slot[feature]] = 1.0
            v[schema.continuous_value_slot[feature]] = float(value)
        else:
            raise SchemaError(f"feature not in schema: {feature!r}")
    return v


def decode_day(vector: np.ndarray, schema: FeatureSchema) -> tuple[set[str], dict[str, float]]:
    """Inverse of encode_day: logged binary features and present continuous values."""
    binary = {f for f, i in schema.binary_slot.items() if vector[i] != 0.0}
    continuous = {
        f: float(vector[schema.continuous_value_slot[f]])
        for f, i in schema.continuous_presence_slot.items()
        if vector[i] != 0.0
    }
    return binary, continuous


def center_continuous(example: "RawExample") -> "RawExample":
    """Subtract each continuous feature's mean over the cycle's visible days.

    The mean is taken over present values on days 0..23 only.  Per-feature
    means are recorded on the returned example so original values stay
    recoverable.  Days are left untouched for features with no values.
    """
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for slot in example.day_slots:
        for feature, value in slot.items():
            if feature in CONTINUOUS_FEATURES and value is not None:
                sums[feature] = sums.get(feature, 0.0) + float(value)
                counts[feature] = counts.get(feature, 0) + 1
    means = {f: sums[f] / counts[f] for f in sums}
    new_slots = []
    for slot in example.day_slots:
        new = dict(slot)
        for feature in list(new):
            if feature in means:
                new[feature] = float(new[feature]) - means[feature]
        new_slots.append(new)
    return dataclasses.replace(example, day_slots=new_slots, continuous_means=dict(means))


@dataclass(frozen=True)
class AgeStats:
    """Standardization statistics for the age feature, fit on training users."""

    mean: float
    std: float

    def standardize(self, age: float) -> float:
        return (age - self.mean) / self.std if self.std > 0 else age - self.mean


def encode_user(
    profile: "UserProfile | None",
    user_continuous_means: Mapping[str, float],
    schema: FeatureSchema,
    age_stats: AgeStats | None = None,
) -> np.ndarray:
    """Build the U-wide user vector.

    Layout: [age_missing, age_value, birth-control one-hot, per-user means
    of the continuous features].  A missing profile yields zeros everywhere
    except the means.  Unknown birth-control methods count as missing.
    """
    v = np.zeros(schema.user_width)
    age = getattr(profile, "age", None) if profile is not None else None
    if age is None:
        v[0] = 1.0
    else:
        v[1] = age_stats.standardize(float(age)) if age_stats is not None else float(age)
    method = getattr(profile, "birth_control", None) if profile is not None else None
    if method is not None and method in schema.birth_control_slot:
        v[schema.birth_control_slot[method]] = 1.0
    base = 2 + len(schema.birth_control_methods)
    for i, feature in enumerate(schema.continuous_features):
        v[base + i] = float(user_continuous_means.get(feature, 0.0))
    return v


def encode_days(
    example: "RawExample", schema: FeatureSchema
) -> tuple[np.ndarray, np.ndarray, dict[str, float]]:
    """Center and encode the day part only: (day_matrix, mask, cycle means)."""
    centered = center_continuous(example)
    day_matrix = np.zeros((WINDOW_DAYS, schema.day_width))
    for d in range(WINDOW_DAYS):
        if centered.day_mask[d]:
            day_matrix[d] = encode_day(centered.day_slots[d], schema)
    mask = np.asarray(centered.day_mask, dtype=float)
    return day_matrix, mask, centered.continuous_means or {}


def encode_example(
    example: "RawExample",
    profile: "UserProfile | None",
    user_continuous_means: Mapping[str, float],
    schema: FeatureSchema,
    age_stats: AgeStats | None = None,
) -> EncodedExample:
    """Full encoding of one labeled cycle: center, encode days, encode user."""
    day_matrix, mask, means = encode_days(example, schema)
    user_vector = encode_user(profile, user_continuous_means, schema, age_stats)
    return EncodedExample(
        day_matrix=day_matrix,
        day_mask=mask,
        user_vector=user_vector,
        label=int(example.label),
        user_id=example.user_id,
        start_ordinal=example.start_date.toordinal(),
        continuous_means=means,
    )


def flatten_for_linear(encoded: EncodedExample) -> np.ndarray:
    """Concatenate the 24 day vectors then the user vector (width 24*D + U)."""
    return np.concatenate([encoded.day_matrix.ravel(), encoded.user_vector])


# ---------------------------------------------------------------------------
# Dataset container and tensor-file format
# ---------------------------------------------------------------------------

SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2
SPLIT_NAMES = ("train", "val", "test")

TENSOR_MAGIC = "pregpred-tensor"


@dataclass
class HistoryStore:
    """Sparse per-user daily vectors for history windows.

    Rows are (date ordinal, day-vector slot, value) triplets grouped by
    user: rows indptr[u]..indptr[u+1] belong to user u, sorted by date.
    dense_window scatters the 180 calendar days before a cycle start into
    a dense (180, D) block; days with no logs stay zero.
    """

    indptr: np.ndarray  # (n_users + 1,) int64
    date_ord: np.ndarray  # (M,) int32
    slot: np.ndarray  # (M,) int32
    value: np.ndarray  # (M,) float32
    window: int = 180

    def dense_window(self, user_index: int, start_ordinal: int, day_width: int) -> np.ndarray:
        lo, hi = self.indptr[user_index], self.indptr[user_index + 1]
        dates = self.date_ord[lo:hi]
        first = start_ordinal - self.window
        sel = (dates >= first) & (dates < start_ordinal)
        out = np.zeros((self.window, day_width))
        out[dates[sel] - first, self.slot[lo:hi][sel]] = self.value[lo:hi][sel]
        return out


@dataclass
class EncodedDataset:
    """Column-oriented store of encoded examples plus split assignment."""

    schema: FeatureSchema
    day_matrix: np.ndarray  # (N, 24, D) float32
    day_mask: np.ndarray  # (N, 24) uint8
    user_vector: np.ndarray  # (N, U) float32
    label: np.ndarray  # (N,) uint8
    user_index: np.ndarray  # (N,) int32 into user_ids
    start_ordinal: np.ndarray  # (N,) int32
    split: np.ndarray  # (N,) uint8; 0 train / 1 val / 2 test
    user_ids: list[str]
    history: HistoryStore | None = None
    meta: dict = dataclasses.field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.label)

    def indices_for(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def example_user_ids(self) -> list[str]:
        return [self.user_ids[i] for i in self.user_index]


@dataclass
class Batch:
    """A model-ready slice of encoded examples, float64 throughout."""

    day: np.ndarray  # (B, 24, D)
    mask: np.ndarray  # (B, 24)
    user: np.ndarray  # (B, U)
    label: np.ndarray  # (B,)
    history: np.ndarray | None = None  # (B, window, D)

    def __len__(self) -> int:
        return len(self.label)


def make_batch(
    dataset: EncodedDataset, indices: np.ndarray | Sequence[int], with_history: bool = False
) -> Batch:
    idx = np.asarray(indices, dtype=np.intp)
    history = None
    if with_history:
        if dataset.history is None:
            raise ValueError("dataset was encoded without a history store")
        D = dataset.schema.day_width
        history = np.stack(
            [
                dataset.history.dense_window(
                    int(dataset.user_index[i]), int(dataset.start_ordinal[i]), D
                )
                for i in idx
            ]
        )
    return Batch(
        day=dataset.day_matrix[idx].astype(float),
        mask=dataset.day_mask[idx].astype(float),
        user=dataset.user_vector[idx].astype(float),
        label=dataset.label[idx].astype(float),
        history=history,
    )


def flatten_batch(batch: Batch) -> np.ndarray:
    """(B, 24*D + U) design matrix: day vectors in day order, then user block."""
    B = len(batch)
    return np.concatenate([batch.day.reshape(B, -1), batch.user], axis=1)


def _array_entries(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def write_tensor_file(path, arrays: dict[str, np.ndarray], header_extra: dict | None = None) -> None:
    """Write named arrays as one file: a JSON header line, then raw bytes."""
    entries, payload = _array_entries(arrays)
    header = {"format": TENSOR_MAGIC, "version": 1, "arrays": entries}
    if header_extra:
        header.update(header_extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a tensor file back into (header, {name: array})."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != TENSOR_MAGIC:
            raise ValueError(f"not a {TENSOR_MAGIC} file: {path}")
        payload = fh.read()
    arrays = {}
    for e in header["arrays"]:
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return header, arrays


def save_dataset(dataset: EncodedDataset, path) -> None:
    arrays = {
        "day_matrix": dataset.day_matrix,
        "day_mask": dataset.day_mask,
        "user_vector": dataset.user_vector,
        "label": dataset.label,
        "user_index": dataset.user_index,
        "start_ordinal": dataset.start_ordinal,
        "split": dataset.split,
    }
    if dataset.history is not None:
        arrays.update(
            hist_indptr=dataset.history.indptr,
            hist_date_ord=dataset.history.date_ord,
            hist_slot=dataset.history.slot,
            hist_value=dataset.history.value,
        )
    extra = {
        "schema": json.loads(dataset.schema.to_json()),
        "user_ids": dataset.user_ids,
        "meta": dataset.meta,
        "history_window": dataset.history.window if dataset.history is not None else None,
    }
    write_tensor_file(path, arrays, extra)


def load_dataset(path) -> EncodedDataset:
    header, arrays = read_tensor_file(path)
    schema = FeatureSchema.from_json(json.dumps(header["schema"]))
    history = None
    if "hist_indptr" in arrays:
        history = HistoryStore(
            indptr=arrays["hist_indptr"],
            date_ord=arrays["hist_date_ord"],
            slot=arrays["hist_slot"],
            value=arrays["hist_value"],
            window=header.get("history_window") or 180,
        )
    return EncodedDataset(
        schema=schema,
        day_matrix=arrays["day_matrix"],
        day_mask=arrays["day_mask"],
        user_vector=arrays["user_vector"],
        label=arrays["label"],
        user_index=arrays["user_index"],
        start_ordinal=arrays["start_ordinal"],
        split=arrays["split"],
        user_ids=list(header["user_ids"]),
        history=history,
        meta=header.get("meta", {}),
    )
