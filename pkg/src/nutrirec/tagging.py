"""Health tags for foods and users, edge signing and tag-set similarity.

A tag vector is a boolean numpy array with two slots per nutrient, in table
order: ``low_<name>`` then ``high_<name>``.
"""

from __future__ import annotations

import operator
import sys
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODES = ("macro_only", "all")

_OPS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


class TagConflictWarning(UserWarning):
    """Both directions of one nutrient fired for a user; neither is kept."""


@dataclass(frozen=True)
class Nutrient:
    name: str
    column: str
    low: float
    high: float
    nrv: float | None = None
    group: str = "macro"

    def __post_init__(self):
        if self.low < 0 or self.high < 0 or (self.nrv is not None and self.nrv < 0):
            raise ConfigError(f"nutrient {self.name}: thresholds must be >= 0")
        if self.low > self.high:
            raise ConfigError(
                f"nutrient {self.name}: low threshold {self.low} exceeds high {self.high}"
            )


@dataclass(frozen=True)
class ThresholdTable:
    nutrients: tuple[Nutrient, ...]

    def __post_init__(self):
        names = [n.name for n in self.nutrients]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate nutrient in threshold table")

    def __len__(self):
        return len(self.nutrients)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nutrients)

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(n.column for n in self.nutrients)

    @property
    def tag_names(self) -> tuple[str, ...]:
        out = []
        for n in self.nutrients:
            out += [f"low_{n.name}", f"high_{n.name}"]
        return tuple(out)

    @property
    def low(self) -> np.ndarray:
        return np.array([n.low for n in self.nutrients], dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.array([n.high for n in self.nutrients], dtype=np.float64)

    @property
    def mode(self) -> str:
        groups = {n.group for n in self.nutrients}
        if groups == {"macro"} and len(self) == 7:
            return "macro_only"
        if groups == {"macro", "micro"} and len(self) == 16:
            return "all"
        return "custom"

    def tag_index(self, tag: str) -> int:
        try:
            return self.tag_names.index(tag)
        except ValueError:
            raise ConfigError(f"unknown tag {tag!r}") from None

    def nutrient(self, name: str) -> Nutrient:
        for n in self.nutrients:
            if n.name == name or n.column == name:
                return n
        raise KeyError(name)

    def select(self, mode: str | None) -> "ThresholdTable":
        if mode is None:
            return self
        if mode not in MODES:
            raise ConfigError(f"unknown benchmark mode {mode!r}; expected one of {MODES}")
        keep = ("macro",) if mode == "macro_only" else ("macro", "micro")
        return ThresholdTable(tuple(n for n in self.nutrients if n.group in keep))

    def tags_of(self, vec: np.ndarray) -> list[str]:
        names = self.tag_names
        return [names[i] for i in np.flatnonzero(vec)]

    def vector(self, tags: Sequence[str]) -> np.ndarray:
        vec = np.zeros(2 * len(self), dtype=bool)
        for tag in tags:
            vec[self.tag_index(tag)] = True
        return vec


@dataclass(frozen=True)
class LabFlag:
    """A condition flag computed from a raw numeric users-file column."""

    name: str
    column: str
    op: str
    value: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise ConfigError(f"lab flag {self.name}: unsupported comparison {self.op!r}")

    def evaluate(self, x: float) -> bool:
        return bool(_OPS[self.op](x, self.value))


@dataclass(frozen=True)
class UserRule:
    flag: str
    tag: str


@dataclass(frozen=True)
class UserRuleTable:
    rules: tuple[UserRule, ...] = ()
    lab_flags: tuple[LabFlag, ...] = ()

    @property
    def flags(self) -> tuple[str, ...]:
        seen = dict.fromkeys(r.flag for r in self.rules)
        return tuple(seen)

    @property
    def lab_flag_names(self) -> frozenset[str]:
        return frozenset(f.name for f in self.lab_flags)

    @property
    def explicit_flags(self) -> tuple[str, ...]:
        """Flags that must come from ``cond_`` columns."""
        labs = self.lab_flag_names
        return tuple(f for f in self.flags if f not in labs)


@dataclass(frozen=True)
class HealthConfig:
    thresholds: ThresholdTable
    rules: UserRuleTable = field(default_factory=UserRuleTable)


def default_config_path() -> Path:
    return Path(str(resources.files("nutrirec") / "data" / "thresholds.toml"))


def parse_config(doc: Mapping, mode: str | None = None) -> HealthConfig:
    try:
        nutrients = tuple(
            Nutrient(
                name=name,
                column=spec.get("column", name),
                low=float(spec["low"]),
                high=float(spec["high"]),
                nrv=None if spec.get("nrv") is None else float(spec["nrv"]),
                group=spec.get("group", "macro"),
            )
            for name, spec in doc.get("nutrients", {}).items()
        )
        labs = tuple(
            LabFlag(f["name"], f["column"], f["op"], float(f["value"]))
            for f in doc.get("lab_flags", [])
        )
        raw_rules = [UserRule(r["flag"], r["tag"]) for r in doc.get("user_rules", [])]
    except KeyError as exc:
        raise ConfigError(f"threshold config missing key {exc}") from None
    full = ThresholdTable(nutrients)
    table = full.select(mode)
    known = set(full.tag_names)
    active = set(table.tag_names)
    rules = []
    for rule in raw_rules:
        if rule.tag not in known:
            raise ConfigError(f"user rule {rule.flag}->{rule.tag}: unknown tag {rule.tag!r}")
        # rules for nutrients outside the active mode are simply inactive
        if rule.tag in active:
            rules.append(rule)
    return HealthConfig(table, UserRuleTable(tuple(rules), labs))


def load_config(path: str | Path | None = None, mode: str | None = None) -> HealthConfig:
    """Read a threshold/rule TOML file; ``None`` loads the shipped default."""
    path = default_config_path() if path is None else Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return parse_config(doc, mode)


def dump_config(config: HealthConfig) -> str:
    """Render a config back to TOML text that ``load_config`` reads losslessly."""
    lines = []
    for n in config.thresholds.nutrients:
        lines += [
            f"[nutrients.{n.name}]",
            f'column = "{n.column}"',
            f'group = "{n.group}"',
            f"low = {n.low!r}",
            f"high = {n.high!r}",
        ]
        if n.nrv is not None:
            lines.append(f"nrv = {n.nrv!r}")
        lines.append("")
    for f in config.rules.lab_flags:
        lines += [
            "[[lab_flags]]",
            f'name = "{f.name}"',
            f'column = "{f.column}"',
            f'op = "{f.op}"',
            f"value = {f.value!r}",
            "",
        ]
    for r in config.rules.rules:
        lines += ["[[user_rules]]", f'flag = "{r.flag}"', f'tag = "{r.tag}"', ""]
    return "\n".join(lines)


def _nutrient_values(nutrients, thresholds: ThresholdTable) -> np.ndarray:
    if isinstance(nutrients, Mapping):
        values = []
        for n in thresholds.nutrients:
            if n.column in nutrients:
                values.append(nutrients[n.column])
            elif n.name in nutrients:
                values.append(nutrients[n.name])
            else:
                raise ValidationError(f"missing nutrient {n.column!r}")
        return np.asarray(values, dtype=np.float64)
    values = np.asarray(nutrients, dtype=np.float64)
    if values.shape != (len(thresholds),):
        raise ValidationError(
            f"nutrient vector has {values.size} entries, thresholds cover {len(thresholds)}"
        )
    return values


def tag_food(nutrients, thresholds: ThresholdTable) -> np.ndarray:
    """Tag one food. Both boundaries are inclusive (<= low, >= high)."""
    values = _nutrient_values(nutrients, thresholds)
    return tag_food_matrix(values[None, :], thresholds)[0]


def tag_food_matrix(values: np.ndarray, thresholds: ThresholdTable) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if (values < 0).any():
        raise ValidationError("nutrient values must be >= 0")
    high = values >= thresholds.high
    # only reachable when low == high; the high tag wins
    low = (values <= thresholds.low) & ~high
    out = np.zeros((values.shape[0], 2 * len(thresholds)), dtype=bool)
    out[:, 0::2] = low
    out[:, 1::2] = high
    return out


def tag_user(condition_flags: Mapping[str, bool], rule_table: UserRuleTable,
             thresholds: ThresholdTable, user_id: str | None = None) -> np.ndarray:
    """Union of fired rules; a nutrient fired in both directions keeps neither."""
    vec = np.zeros(2 * len(thresholds), dtype=bool)
    for rule in rule_table.rules:
        if rule.flag not in condition_flags:
            raise ConfigError(f"user rule references unknown flag {rule.flag!r}")
        if condition_flags[rule.flag]:
            vec[thresholds.tag_index(rule.tag)] = True
    conflict = vec[0::2] & vec[1::2]
    if conflict.any():
        names = [thresholds.names[i] for i in np.flatnonzero(conflict)]
        who = f"user {user_id}: " if user_id is not None else ""
        warnings.warn(
            f"{who}conflicting low/high rules for {', '.join(names)}; dropping both",
            TagConflictWarning,
            stacklevel=2,
        )
        vec[0::2] &= ~conflict
        vec[1::2] &= ~conflict
    return vec


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape or a.ndim != 1 or a.size % 2:
        raise ValidationError(f"tag vectors differ in length: {a.shape} vs {b.shape}")


def match_counts(user_tags: np.ndarray, food_tags: np.ndarray) -> tuple[int, int]:
    """(matching, converse) nutrient counts between two tag vectors."""
    u = np.asarray(user_tags, dtype=bool)
    f = np.asarray(food_tags, dtype=bool)
    _check_pair(u, f)
    matching = int(((u[0::2] & f[0::2]) | (u[1::2] & f[1::2])).sum())
    converse = int(((u[0::2] & f[1::2]) | (u[1::2] & f[0::2])).sum())
    return matching, converse


def sign_edge(user_tags: np.ndarray, food_tags: np.ndarray) -> int:
    """+1 when strictly more matching than converse tags, else -1."""
    matching, converse = match_counts(user_tags, food_tags)
    return 1 if matching > converse else -1


def sign_matrix(user_tags: np.ndarray, food_tags: np.ndarray) -> np.ndarray:
    """Vectorised ``sign_edge`` over all user x food pairs."""
    u = np.asarray(user_tags, dtype=np.int64)
    f = np.asarray(food_tags, dtype=np.int64)
    # a nutrient slot pair can only hold one tag, so summing slot products counts nutrients
    matching = u[:, 0::2] @ f[:, 0::2].T + u[:, 1::2] @ f[:, 1::2].T
    converse = u[:, 0::2] @ f[:, 1::2].T + u[:, 1::2] @ f[:, 0::2].T
    return np.where(matching > converse, 1, -1)


def jaccard(tags_a: np.ndarray, tags_b: np.ndarray) -> float:
    a = np.asarray(tags_a, dtype=bool)
    b = np.asarray(tags_b, dtype=bool)
    _check_pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return int((a & b).sum()) / union


def jaccard_matrix(user_tags: np.ndarray, food_tags: np.ndarray) -> np.ndarray:
    u = np.asarray(user_tags, dtype=np.float64)
    f = np.asarray(food_tags, dtype=np.float64)
    inter = u @ f.T
    union = u.sum(1)[:, None] + f.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return out
