"""Core data model, register-file ingestion, and outcome transforms.

The register is three CSV files (persons, outcomes, shocks) plus an optional
deflator. Loading validates every invariant and rejects bad input instead of
repairing it. The loaded :class:`Registry` is immutable by convention: no
pipeline stage mutates its frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from medshock._validation import DataError

ROLES = ("index", "partner", "adult_child")

#: Outcome columns of outcomes.csv, in canonical order. Cells may be empty
#: (person alive but value absent for that series); an absent row means the
#: person-year is not observed at all.
OUTCOME_COLUMNS = [
    "family_income",
    "own_income",
    "partner_income",
    "wages",
    "unemployment",
    "capital",
    "sickness",
    "disability",
    "child_income",
    "child_wages",
    "child_welfare",
]

PERSON_COLUMNS = [
    "person_id",
    "birth_year",
    "gender",
    "schooling_years",
    "earnings_38_39",
    "family_id",
    "role",
    "liquidity_flag",
    "marital_flag",
]

SHOCK_COLUMNS = ["person_id", "shock_year", "disease_group"]

N_DISEASE_GROUPS = 91

#: Disease groups 1..91 aggregated into the 13 coarse diagnosis chapters.
ICD_CHAPTERS = {
    "cancer": range(1, 26),
    "circulatory": range(26, 36),
    "mental": range(36, 43),
    "nervous": range(43, 49),
    "digestive": range(49, 56),
    "musculoskeletal": range(56, 60),
    "urinary": range(60, 65),
    "respiratory": range(65, 69),
    "metabolic": range(69, 73),
    "bloodforming": range(73, 76),
    "sense": range(76, 82),
    "skin": range(82, 84),
    "infectious": range(84, 92),
}

CHAPTER_OF = {g: name for name, groups in ICD_CHAPTERS.items() for g in groups}


def chapter_of(group: int) -> str:
    """Coarse diagnosis chapter for a disease group (1..91)."""
    try:
        return CHAPTER_OF[int(group)]
    except KeyError:
        raise DataError(f"disease_group {group} outside 1..{N_DISEASE_GROUPS}") from None


def ihs(x):
    """Inverse hyperbolic sine, ln(x + sqrt(x^2 + 1)).

    A log-like transform that is odd, strictly increasing, and defined at zero
    and for negative amounts. Accepts scalars or arrays; raises on non-finite
    input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("ihs: input contains non-finite values")
    out = np.arcsinh(arr)
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Deflator:
    """Price index by calendar year, equal to 1.0 in the base year."""

    index: dict[int, float]
    base_year: int = 2021

    def __post_init__(self):
        if self.base_year not in self.index:
            raise DataError(f"deflator: base year {self.base_year} missing")
        if abs(self.index[self.base_year] - 1.0) > 1e-12:
            raise DataError(f"deflator: index at base year {self.base_year} must be 1.0")
        for year, value in self.index.items():
            if not (np.isfinite(value) and value > 0):
                raise DataError(f"deflator: index for year {year} must be strictly positive")

    def index_for(self, year: int) -> float:
        try:
            return self.index[int(year)]
        except KeyError:
            raise DataError(f"deflator: no index for year {year}") from None

    @classmethod
    def identity(cls, years, base_year: int = 2021) -> "Deflator":
        idx = {int(y): 1.0 for y in years}
        idx[base_year] = 1.0
        return cls(index=idx, base_year=base_year)

    def to_frame(self) -> pd.DataFrame:
        years = sorted(self.index)
        return pd.DataFrame({"year": years, "index": [self.index[y] for y in years]})


def deflate(x, year: int, deflator: Deflator):
    """Convert a nominal amount in `year` to base-year terms."""
    return x / deflator.index_for(year)


@dataclass(frozen=True)
class PersonRecord:
    person_id: int
    birth_year: int
    gender: int
    schooling_years: int
    ihs_earnings_38_39: float
    family_id: int
    role: str
    liquidity_flag: int = 0
    marital_flag: int = 0


@dataclass(frozen=True)
class HealthShock:
    person_id: int
    shock_year: int
    disease_group: int
    stay_days: float | None = None
    emergency: bool = False


@dataclass
class Registry:
    """In-memory register with validated invariants.

    ``persons`` keeps the raw ``earnings_38_39`` column alongside the derived
    ``ihs_earnings_38_39`` used for matching. ``outcomes`` holds nominal
    amounts exactly as loaded; deflation and the IHS transform happen at
    stacking time so the estimator sees model-ready values.
    """

    persons: pd.DataFrame
    outcomes: pd.DataFrame
    shocks: pd.DataFrame
    deflator: Deflator
    meta: dict = field(default_factory=dict)

    def person_record(self, person_id: int) -> PersonRecord:
        row = self.persons.loc[self.persons["person_id"] == person_id]
        if row.empty:
            raise DataError(f"unknown person_id {person_id}")
        r = row.iloc[0]
        return PersonRecord(
            person_id=int(r["person_id"]),
            birth_year=int(r["birth_year"]),
            gender=int(r["gender"]),
            schooling_years=int(r["schooling_years"]),
            ihs_earnings_38_39=float(r["ihs_earnings_38_39"]),
            family_id=int(r["family_id"]),
            role=str(r["role"]),
            liquidity_flag=int(r["liquidity_flag"]),
            marital_flag=int(r["marital_flag"]),
        )

    def shocks_for(self, person_id: int) -> list[HealthShock]:
        rows = self.shocks.loc[self.shocks["person_id"] == person_id]
        return [
            HealthShock(
                person_id=int(r["person_id"]),
                shock_year=int(r["shock_year"]),
                disease_group=int(r["disease_group"]),
                stay_days=float(r["stay_days"]) if "stay_days" in rows.columns and pd.notna(r["stay_days"]) else None,
                emergency=bool(r["emergency"]) if "emergency" in rows.columns else False,
            )
            for _, r in rows.iterrows()
        ]

    @property
    def n_persons(self) -> int:
        return len(self.persons)

    @property
    def n_shocks(self) -> int:
        return len(self.shocks)

    def save(self, out_dir, header: str | None = None) -> None:
        """Re-serialize the register in canonical order (round-trip safe)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        def _write(frame: pd.DataFrame, name: str):
            path = out / name
            with open(path, "w", encoding="utf-8") as fh:
                if header:
                    fh.write(f"# {header}\n")
                frame.to_csv(fh, index=False, lineterminator="\n")

        persons = self.persons.sort_values("person_id")[PERSON_COLUMNS]
        _write(persons, "persons.csv")
        outcomes = self.outcomes.sort_values(["person_id", "year"])[["person_id", "year"] + OUTCOME_COLUMNS]
        _write(outcomes, "outcomes.csv")
        shock_cols = [c for c in ["person_id", "shock_year", "disease_group", "stay_days", "emergency"] if c in self.shocks.columns]
        _write(self.shocks.sort_values(["person_id", "shock_year"])[shock_cols], "shocks.csv")
        _write(self.deflator.to_frame(), "deflator.csv")


def _read_csv(path, required, where: str, optional=()) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{where}: file not found: {path}")
    try:
        frame = pd.read_csv(path, comment="#", skip_blank_lines=True)
    except Exception as exc:  # noqa: BLE001 - surface parser failures as data errors
        raise DataError(f"{where}: cannot parse {path}: {exc}") from exc
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{where}: {path} missing column(s) {', '.join(missing)}")
    return frame


def _leading_comment_lines(path) -> int:
    n = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                n += 1
            else:
                break
    return n


def _to_number(frame: pd.DataFrame, column: str, path, kind: str = "int", allow_na: bool = False) -> pd.Series:
    """Convert a column, reporting the file line of the first malformed cell."""
    converted = pd.to_numeric(frame[column], errors="coerce")
    bad = converted.isna() & frame[column].notna()
    if bad.any():
        pos = int(np.flatnonzero(bad.to_numpy())[0])
        line = _leading_comment_lines(path) + 1 + pos + 1  # comments + header + 1-based data row
        raise DataError(f"{path}: malformed {column} at line {line}: {frame[column].iloc[pos]!r}")
    if not allow_na and converted.isna().any():
        pos = int(np.flatnonzero(converted.isna().to_numpy())[0])
        line = _leading_comment_lines(path) + 1 + pos + 1
        raise DataError(f"{path}: missing {column} at line {line}")
    if kind == "int" and not allow_na:
        non_integral = converted.notna() & (converted != converted.round())
        if non_integral.any():
            pos = int(np.flatnonzero(non_integral.to_numpy())[0])
            line = _leading_comment_lines(path) + 1 + pos + 1
            raise DataError(f"{path}: non-integer {column} at line {line}: {frame[column].iloc[pos]!r}")
        return converted.astype(np.int64)
    return converted.astype(np.float64)


def load_registry(
    persons_file,
    outcomes_file,
    shocks_file,
    deflator_file=None,
    *,
    birth_year_range: tuple[int, int] = (1900, 2005),
    shock_age_range: tuple[int, int] = (40, 70),
    include_emergency: bool = False,
) -> Registry:
    """Load and validate the register files.

    Validation rejects rather than repairs: duplicate person ids, shocks that
    violate the 3-year clean window, disease groups outside 1..91, unknown
    roles, and malformed cells (reported with file and line) all raise
    :class:`DataError`.

    ``earnings_38_39`` is IHS-transformed at load into ``ihs_earnings_38_39``
    because matching operates on that scale; the raw column is retained for
    round-trip serialization. Shocks flagged as emergency-unit records are
    dropped unless ``include_emergency`` is set.
    """
    persons = _read_csv(persons_file, PERSON_COLUMNS, "persons")
    for col in ("person_id", "birth_year", "gender", "schooling_years", "family_id", "liquidity_flag", "marital_flag"):
        persons[col] = _to_number(persons, col, persons_file, kind="int")
    persons["earnings_38_39"] = _to_number(persons, "earnings_38_39", persons_file, kind="float")

    dup = persons["person_id"].duplicated()
    if dup.any():
        raise DataError(f"persons: duplicate person_id {int(persons.loc[dup, 'person_id'].iloc[0])}")
    bad_role = ~persons["role"].isin(ROLES)
    if bad_role.any():
        raise DataError(f"persons: unknown role {persons.loc[bad_role, 'role'].iloc[0]!r}")
    lo, hi = birth_year_range
    out_of_range = (persons["birth_year"] < lo) | (persons["birth_year"] > hi)
    if out_of_range.any():
        bad = persons.loc[out_of_range].iloc[0]
        raise DataError(f"persons: birth_year {int(bad['birth_year'])} outside configured range {birth_year_range} (person {int(bad['person_id'])})")
    if not persons["gender"].isin((0, 1)).all():
        raise DataError("persons: gender must be 0/1")
    if (persons["schooling_years"] < 0).any():
        raise DataError("persons: schooling_years must be non-negative")
    persons = persons.copy()
    persons["ihs_earnings_38_39"] = np.arcsinh(persons["earnings_38_39"].to_numpy())

    outcomes = _read_csv(outcomes_file, ["person_id", "year"] + OUTCOME_COLUMNS, "outcomes")
    outcomes["person_id"] = _to_number(outcomes, "person_id", outcomes_file, kind="int")
    outcomes["year"] = _to_number(outcomes, "year", outcomes_file, kind="int")
    for col in OUTCOME_COLUMNS:
        outcomes[col] = _to_number(outcomes, col, outcomes_file, kind="float", allow_na=True)
    dup = outcomes.duplicated(subset=["person_id", "year"])
    if dup.any():
        r = outcomes.loc[dup].iloc[0]
        raise DataError(f"outcomes: duplicate person-year ({int(r['person_id'])}, {int(r['year'])})")
    known = set(persons["person_id"])
    unknown = ~outcomes["person_id"].isin(known)
    if unknown.any():
        raise DataError(f"outcomes: unknown person_id {int(outcomes.loc[unknown, 'person_id'].iloc[0])}")

    shocks = _read_csv(shocks_file, SHOCK_COLUMNS, "shocks")
    for col in SHOCK_COLUMNS:
        shocks[col] = _to_number(shocks, col, shocks_file, kind="int")
    if "stay_days" in shocks.columns:
        shocks["stay_days"] = _to_number(shocks, "stay_days", shocks_file, kind="float", allow_na=True)
    if "emergency" in shocks.columns:
        shocks["emergency"] = _to_number(shocks, "emergency", shocks_file, kind="int").astype(bool)
        if not include_emergency:
            shocks = shocks.loc[~shocks["emergency"]].reset_index(drop=True)
    bad_group = (shocks["disease_group"] < 1) | (shocks["disease_group"] > N_DISEASE_GROUPS)
    if bad_group.any():
        raise DataError(f"shocks: disease_group {int(shocks.loc[bad_group, 'disease_group'].iloc[0])} outside 1..{N_DISEASE_GROUPS}")
    unknown = ~shocks["person_id"].isin(known)
    if unknown.any():
        raise DataError(f"shocks: unknown person_id {int(shocks.loc[unknown, 'person_id'].iloc[0])}")

    person_meta = persons.set_index("person_id")
    roles = person_meta.loc[shocks["person_id"], "role"].to_numpy()
    if (roles != "index").any():
        bad = shocks.loc[roles != "index"].iloc[0]
        raise DataError(f"shocks: person {int(bad['person_id'])} has role {person_meta.loc[int(bad['person_id']), 'role']!r}; shocks are defined for index persons")
    births = person_meta.loc[shocks["person_id"], "birth_year"].to_numpy()
    ages = shocks["shock_year"].to_numpy() - births
    a_lo, a_hi = shock_age_range
    bad_age = (ages < a_lo) | (ages > a_hi)
    if bad_age.any():
        bad = shocks.loc[bad_age].iloc[0]
        raise DataError(f"shocks: person {int(bad['person_id'])} shocked at age {int(ages[np.flatnonzero(bad_age)[0]])}, outside {shock_age_range}")

    # 3-year clean window: within a person, admissions must be >3 years apart.
    ordered = shocks.sort_values(["person_id", "shock_year"])
    same = ordered["person_id"].to_numpy()[1:] == ordered["person_id"].to_numpy()[:-1]
    gaps = np.diff(ordered["shock_year"].to_numpy())
    dup_year = same & (gaps == 0)
    if dup_year.any():
        i = int(np.flatnonzero(dup_year)[0])
        raise DataError(
            f"shocks: person {int(ordered['person_id'].iloc[i])} has duplicate admission year {int(ordered['shock_year'].iloc[i])}"
        )
    violation = same & (gaps > 0) & (gaps <= 3)
    if violation.any():
        i = int(np.flatnonzero(violation)[0])
        raise DataError(
            f"shocks: person {int(ordered['person_id'].iloc[i])} admitted in {int(ordered['shock_year'].iloc[i])} and again "
            f"{int(gaps[i])} year(s) later, violating the 3-year clean window"
        )

    if deflator_file is not None:
        dfl = _read_csv(deflator_file, ["year", "index"], "deflator")
        dfl["year"] = _to_number(dfl, "year", deflator_file, kind="int")
        dfl["index"] = _to_number(dfl, "index", deflator_file, kind="float")
        deflator = Deflator(index=dict(zip(dfl["year"].tolist(), dfl["index"].tolist())))
    else:
        years = outcomes["year"].unique().tolist() if len(outcomes) else []
        deflator = Deflator.identity(years)

    return Registry(
        persons=persons.sort_values("person_id").reset_index(drop=True),
        outcomes=outcomes.sort_values(["person_id", "year"]).reset_index(drop=True),
        shocks=shocks.sort_values(["person_id", "shock_year"]).reset_index(drop=True),
        deflator=deflator,
        meta={"include_emergency": include_emergency},
    )
