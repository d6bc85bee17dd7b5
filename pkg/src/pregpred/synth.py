"""Synthetic-cohort generator with planted ground truth.

Each user gets a fertility multiplier, a behavior profile, and a sequence
of cycles.  Under the default "bms" process, every day with (or without)
sex contributes an independent survival factor 1 - m_u * r_type * f_day,
where f is a bell-shaped day-specific fertility curve; the cycle's
pregnancy outcome is drawn from the resulting probability.  Two
alternative processes with no exploitable daily structure ("ttp") or
peak-day-only structure ("ettp") serve as negative controls.  Emitted
logs and profiles are valid ingest inputs; the planted parameters go to a
separate truth record that no downstream step may read.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Iterator

import numpy as np

from .codec import FEATURE_TABLE, SEX_TYPES, all_feature_names
from .ingest import DailyLog, UserProfile, write_log_file, write_profile_file

SEX_TYPE_FEATURE = {
    "protected": "sex:protected",
    "unprotected": "sex:unprotected",
    "withdrawal": "sex:withdrawal",
}

# Generic daily symptoms: everything except bleeding, sex acts, tests, and
# the continuous features (those are emitted by their own processes).
_EXCLUDED_FROM_POOL = {
    *SEX_TYPE_FEATURE.values(),
    "period:heavy",
    "period:light",
    "period:medium",
    "period:spotting",
    "test:ovulation_neg",
    "test:ovulation_pos",
    "test:pregnancy_neg",
    "test:pregnancy_pos",
}
SYMPTOM_POOL = tuple(
    f
    for f in all_feature_names()
    if f not in _EXCLUDED_FROM_POOL and not f.startswith("continuous:")
)

TRYING_BIRTH_CONTROL = ("none", "fertility_awareness", "cycle_tracking_app", "withdrawal")
AVOIDING_BIRTH_CONTROL = (
    "condoms",
    "pill_combined",
    "pill_progestin_only",
    "iud_hormonal",
    "iud_copper",
    "ring",
)

GENERATIVE_KINDS = ("bms", "ttp", "ettp")


@dataclass(frozen=True)
class WorldSpec:
    """All knobs of the generator.  Defaults target a labeled positive
    fraction in the mid-teens with a strong, recoverable daily signal."""

    n_users: int = 1000
    seed: int = 0
    kind: str = "bms"
    cycles_per_user: int = 8
    # cycle-length distribution (days)
    cycle_length_mean: float = 28.5
    cycle_length_sd: float = 3.0
    cycle_length_min: int = 21
    cycle_length_max: int = 45
    # planted day-specific fertility curve: gaussian bump over cycle days
    peak_day: int = 12
    peak_value: float = 0.30
    curve_width: float = 2.5
    # planted per-type risk multipliers
    risk_protected: float = 0.02
    risk_unprotected: float = 1.0
    risk_withdrawal: float = 0.25
    risk_none: float = 0.03
    # per-user fertility multiplier: lognormal with unit mean, times scale
    fertility_sigma: float = 0.5
    fertility_scale: float = 1.0
    # behavior
    trying_fraction: float = 0.40
    sex_rate: float = 0.30
    force_unprotected_peak: bool = False
    # logging propensities
    log_sex: float = 0.90
    log_bbt: float = 0.35
    log_weight: float = 0.15
    log_heart_rate: float = 0.15
    log_bleed: float = 0.90  # bleeding days after day 0; day 0 always logged
    symptom_rate: float = 0.70  # expected generic symptom logs per day
    log_test: float = 0.50
    # pregnant users keep logging for about nine months: without this tail,
    # early pregnancies fall under the per-user activity threshold and the
    # labeled positive rate collapses
    post_pregnancy_days: int = 270
    # profile
    age_missing: float = 0.25
    bc_missing: float = 0.20
    # alternative processes
    ttp_mu_mean: float = 0.16
    ttp_mu_concentration: float = 12.0
    base_date: str = "2020-01-01"

    def validate(self) -> None:
        probs = {
            "peak_value": self.peak_value,
            "risk_protected": self.risk_protected,
            "risk_unprotected": self.risk_unprotected,
            "risk_withdrawal": self.risk_withdrawal,
            "risk_none": self.risk_none,
            "trying_fraction": self.trying_fraction,
            "sex_rate": self.sex_rate,
            "log_sex": self.log_sex,
            "log_bbt": self.log_bbt,
            "log_weight": self.log_weight,
            "log_heart_rate": self.log_heart_rate,
            "log_bleed": self.log_bleed,
            "log_test": self.log_test,
            "age_missing": self.age_missing,
            "bc_missing": self.bc_missing,
            "ttp_mu_mean": self.ttp_mu_mean,
        }
        for name, value in probs.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")
        if self.kind not in GENERATIVE_KINDS:
            raise ValueError(f"kind must be one of {GENERATIVE_KINDS}, got {self.kind!r}")
        if self.n_users <= 0 or self.cycles_per_user <= 0:
            raise ValueError("n_users and cycles_per_user must be positive")
        if not self.cycle_length_min <= self.cycle_length_mean <= self.cycle_length_max:
            raise ValueError("cycle length mean must lie between min and max")
        gap = self.cycle_length_mean - self.peak_day
        if not 11.0 <= gap <= 17.0:
            raise ValueError(
                f"fertility peak must sit 14 +- 3 days before the mean cycle end (gap {gap})"
            )

    def risks(self) -> dict[str, float]:
        return {
            "protected": self.risk_protected,
            "unprotected": self.risk_unprotected,
            "withdrawal": self.risk_withdrawal,
            "none": self.risk_none,
        }

    def fertility_curve(self, n_days: int) -> np.ndarray:
        """Planted f values for cycle days 0..n_days-1."""
        d = np.arange(n_days, dtype=float)
        if self.curve_width == 0.0:
            return self.peak_value * (d == self.peak_day)
        return self.peak_value * np.exp(-0.5 * ((d - self.peak_day) / self.curve_width) ** 2)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PlantedTruth:
    """Ground truth kept apart from the emitted dataset files."""

    spec: dict
    risks: dict[str, float]
    curve: list[float]
    users: list[dict] = field(default_factory=list)
    cycles: list[dict] = field(default_factory=list)

    def positive_rate(self) -> float:
        flags = [c["pregnant"] for c in self.cycles]
        return float(np.mean(flags)) if flags else 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PlantedTruth":
        return cls(**json.loads(text))


@dataclass
class Cohort:
    logs: list[DailyLog]
    profiles: dict[str, UserProfile]
    truth: PlantedTruth


def _user_rng(spec: WorldSpec, user_index: int) -> np.random.Generator:
    # independent stream per (seed, user): reproducible under any sharding
    return np.random.default_rng(np.random.SeedSequence((spec.seed, user_index)))


def _cycle_probability(
    spec: WorldSpec, kind: str, mult: float, mu: float, length: int,
    act: np.ndarray, act_type: np.ndarray, curve: np.ndarray,
) -> float:
    """Planted pregnancy probability for one cycle."""
    risks = spec.risks()
    type_names = list(SEX_TYPE_FEATURE)
    if kind == "ttp":
        return mu
    if kind == "ettp":
        if spec.peak_day >= length:
            return 0.0
        r = risks[type_names[act_type[spec.peak_day]]] if act[spec.peak_day] else risks["none"]
        return float(np.clip(mult * r * curve[spec.peak_day], 0.0, 0.995))
    per_day_risk = np.where(
        act,
        np.array([risks[type_names[t]] for t in act_type]),
        risks["none"],
    )
    q = np.clip(mult * per_day_risk * curve[:length], 0.0, 0.995)
    return float(-np.expm1(np.sum(np.log1p(-q))))


def generate_user(
    spec: WorldSpec, user_index: int
) -> tuple[list[DailyLog], UserProfile, dict, list[dict]]:
    """One user's logs, profile, truth record, and per-cycle truth rows."""
    rng = _user_rng(spec, user_index)
    uid = f"u{user_index:06d}"
    base = date.fromisoformat(spec.base_date).toordinal()

    trying = bool(rng.random() < spec.trying_fraction)
    if spec.fertility_sigma > 0:
        mult = spec.fertility_scale * float(
            rng.lognormal(-0.5 * spec.fertility_sigma**2, spec.fertility_sigma)
        )
    else:
        mult = spec.fertility_scale
    if spec.ttp_mu_mean <= 0.0:
        mu = 0.0
    else:
        k = spec.ttp_mu_concentration
        mu = float(rng.beta(spec.ttp_mu_mean * k, (1.0 - spec.ttp_mu_mean) * k))

    age = None if rng.random() < spec.age_missing else float(int(np.clip(rng.normal(29, 6), 16, 50)))
    if rng.random() < spec.bc_missing:
        bc = None
    elif trying:
        bc = str(rng.choice(TRYING_BIRTH_CONTROL, p=[0.6, 0.2, 0.1, 0.1]))
    else:
        bc = str(rng.choice(AVOIDING_BIRTH_CONTROL, p=[0.35, 0.25, 0.1, 0.15, 0.1, 0.05]))
    profile = UserProfile(uid, age, bc)

    mix = np.array([0.05, 0.80, 0.15]) if trying else np.array([0.70, 0.10, 0.20])
    bbt_base = float(rng.normal(97.2, 0.25))
    weight_base = float(np.clip(rng.normal(65, 10), 45, 120))
    rhr_base = float(np.clip(rng.normal(62, 5), 48, 85))
    max_len = spec.cycle_length_max + 1
    curve = spec.fertility_curve(max_len)

    logs: list[DailyLog] = []
    cycle_rows: list[dict] = []

    def emit(day_offset: int, feature: str, value: float | None = None) -> None:
        logs.append(DailyLog(uid, date.fromordinal(base + day_offset), feature, value))

    def emit_daily_background(day_offset: int, cycle_day: int | None) -> None:
        """Continuous features and generic symptoms for one day."""
        if rng.random() < spec.log_bbt:
            shift = 0.45 if (cycle_day is None or cycle_day >= spec.peak_day) else 0.0
            value = float(np.clip(bbt_base + shift + rng.normal(0, 0.12), 95.0, 99.5))
            emit(day_offset, "continuous:bbt", value)
        if rng.random() < spec.log_weight:
            emit(day_offset, "continuous:weight",
                 float(np.clip(weight_base + rng.normal(0, 0.4), 40.0, 150.0)))
        if rng.random() < spec.log_heart_rate:
            emit(day_offset, "continuous:resting_heart_rate",
                 float(np.clip(rhr_base + rng.normal(0, 2.0), 40.0, 110.0)))
        n_sym = int(rng.poisson(spec.symptom_rate))
        if n_sym > 0:
            for f in rng.choice(len(SYMPTOM_POOL), size=min(n_sym, 8), replace=False):
                emit(day_offset, SYMPTOM_POOL[f])

    cursor = int(rng.integers(0, 28))
    pregnant_at: int | None = None  # offset of the pregnancy test day if any
    for _ in range(spec.cycles_per_user):
        length = int(np.clip(round(rng.normal(spec.cycle_length_mean, spec.cycle_length_sd)),
                             spec.cycle_length_min, spec.cycle_length_max))
        act = rng.random(length) < spec.sex_rate
        act_type = rng.choice(3, size=length, p=mix)
        if spec.force_unprotected_peak and spec.peak_day < length:
            act[spec.peak_day] = True
            act_type[spec.peak_day] = 1  # unprotected
        prob = _cycle_probability(spec, spec.kind, mult, mu, length, act, act_type, curve)
        pregnant = bool(rng.random() < prob)
        cycle_rows.append(
            {
                "user_id": uid,
                "start": date.fromordinal(base + cursor).isoformat(),
                "length": length,
                "pregnant": pregnant,
                "probability": round(prob, 6),
            }
        )

        bleed_len = int(rng.integers(3, 6))
        bleed_pattern = ("period:heavy", "period:medium", "period:medium",
                         "period:light", "period:spotting")
        for d in range(length):
            off = cursor + d
            if d < bleed_len and (d == 0 or rng.random() < spec.log_bleed):
                emit(off, bleed_pattern[d])
            if act[d] and rng.random() < spec.log_sex:
                emit(off, SEX_TYPE_FEATURE[list(SEX_TYPE_FEATURE)[act_type[d]]])
            emit_daily_background(off, d)

        tested = rng.random() < spec.log_test
        test_off = cursor + length + int(rng.integers(-3, 4))
        if pregnant:
            if tested:
                emit(test_off, "test:pregnancy_pos")
                pregnant_at = test_off
            # keeps using the app while pregnant: symptoms continue, no bleeding
            for d in range(length, length + spec.post_pregnancy_days):
                emit_daily_background(cursor + d, None)
            break
        if tested:
            emit(test_off, "test:pregnancy_neg")
        cursor += length

    logs.sort(key=lambda log: (log.date, log.feature))
    user_row = {
        "user_id": uid,
        "multiplier": round(mult, 6),
        "mu": round(mu, 6),
        "trying": trying,
        "pregnant_test_day": pregnant_at,
    }
    return logs, profile, user_row, cycle_rows


def iter_users(spec: WorldSpec) -> Iterator[tuple[list[DailyLog], UserProfile, dict, list[dict]]]:
    """Stream users one at a time; bounded memory for large cohorts."""
    spec.validate()
    for i in range(spec.n_users):
        yield generate_user(spec, i)


def gen_cohort(spec: WorldSpec) -> Cohort:
    """Materialize a full cohort with its planted truth."""
    spec.validate()
    truth = PlantedTruth(
        spec=spec.to_dict(),
        risks=spec.risks(),
        curve=[float(v) for v in spec.fertility_curve(spec.cycle_length_max + 1)],
    )
    logs: list[DailyLog] = []
    profiles: dict[str, UserProfile] = {}
    for user_logs, profile, user_row, cycle_rows in iter_users(spec):
        logs.extend(user_logs)
        profiles[profile.user_id] = profile
        truth.users.append(user_row)
        truth.cycles.extend(cycle_rows)
    return Cohort(logs, profiles, truth)


def gen_alt_process(spec: WorldSpec, kind: str) -> Cohort:
    """Cohort under an alternative outcome process ("ttp" or "ettp")."""
    return gen_cohort(dataclasses.replace(spec, kind=kind))


def write_cohort(cohort: Cohort, logs_path, profiles_path, truth_path) -> None:
    write_log_file(logs_path, cohort.logs)
    write_profile_file(profiles_path, cohort.profiles.values())
    with open(truth_path, "w", encoding="utf-8") as fh:
        fh.write(cohort.truth.to_json() + "\n")
