import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nutrirec.errors import ConfigError, ValidationError
from nutrirec.tagging import (
    TagConflictWarning,
    UserRule,
    UserRuleTable,
    dump_config,
    jaccard,
    jaccard_matrix,
    load_config,
    match_counts,
    parse_config,
    sign_edge,
    sign_matrix,
    tag_food,
    tag_user,
)
from nutrirec.verify import GOLDEN_THRESHOLDS, MACRO, golden_table_check

import tomli


def only(table, name):
    return type(table)(tuple(n for n in table.nutrients if n.name == name))


def food_tags(table, **values):
    full = {c: (n.low + n.high) / 2 for n, c in zip(table.nutrients, table.columns)}
    full.update(values)
    return set(table.tags_of(tag_food(full, table)))


class TestThresholdTable:
    def test_golden_rows(self, table):
        assert golden_table_check() == []
        assert len(table) == 16
        for name, (column, low, high, nrv) in GOLDEN_THRESHOLDS.items():
            n = table.nutrient(name)
            assert (n.column, n.low, n.high, n.nrv) == (column, low, high, nrv)

    def test_sodium_and_calories_spot_values(self, table):
        s, c = table.nutrient("sodium"), table.nutrient("calories")
        assert (s.low, s.high, s.nrv) == (120, 200, 2000)
        assert (c.low, c.high, c.nrv) == (40, 225, 2000)

    def test_macro_mode_has_seven(self):
        macro = load_config(mode="macro_only").thresholds
        assert set(macro.names) == set(MACRO)
        assert macro.mode == "macro_only"
        assert load_config().thresholds.mode == "all"

    def test_macro_mode_drops_micro_rules(self):
        cfg = load_config(mode="macro_only")
        assert all(r.tag.split("_", 1)[1] in MACRO for r in cfg.rules.rules)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            load_config(mode="vitamins")

    def test_low_above_high_rejected(self):
        doc = {"nutrients": {"x": {"column": "x_g", "low": 5, "high": 1}}}
        with pytest.raises(ConfigError, match="exceeds"):
            parse_config(doc)

    def test_negative_threshold_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"nutrients": {"x": {"low": -1, "high": 1}}})

    def test_rule_with_unknown_tag(self):
        doc = {"nutrients": {"x": {"low": 1, "high": 2}}, "user_rules": [{"flag": "f", "tag": "low_y"}]}
        with pytest.raises(ConfigError, match="unknown tag"):
            parse_config(doc)

    def test_dump_roundtrip(self, config):
        again = parse_config(tomli.loads(dump_config(config)))
        assert again.thresholds == config.thresholds
        assert again.rules == config.rules

    def test_tag_names_order(self, table):
        assert table.tag_names[:2] == ("low_calories", "high_calories")
        assert len(table.tag_names) == 32


class TestTagFood:
    def test_sodium_examples(self, table):
        sodium = only(table, "sodium")
        assert sodium.tags_of(tag_food({"sodium_mg": 100}, sodium)) == ["low_sodium"]
        assert sodium.tags_of(tag_food({"sodium_mg": 250}, sodium)) == ["high_sodium"]
        assert sodium.tags_of(tag_food({"sodium_mg": 150}, sodium)) == []

    def test_boundaries_inclusive(self, table):
        assert "low_calories" in food_tags(table, calories_kcal=40)
        assert "high_calories" in food_tags(table, calories_kcal=225)
        assert food_tags(table, calories_kcal=40.0001) & {"low_calories", "high_calories"} == set()
        assert "low_sodium" in food_tags(table, sodium_mg=120)
        assert "high_sodium" in food_tags(table, sodium_mg=200)

    def test_zero_low_threshold(self, table):
        assert "low_potassium" in food_tags(table, potassium_mg=0)
        assert "low_potassium" not in food_tags(table, potassium_mg=1e-9)

    def test_missing_nutrient_named(self, table):
        with pytest.raises(ValidationError, match="sodium_mg"):
            tag_food({"calories_kcal": 10}, only(table, "sodium"))

    def test_negative_value(self, table):
        with pytest.raises(ValidationError):
            tag_food({"sodium_mg": -1}, only(table, "sodium"))

    def test_accepts_nutrient_names(self, table):
        sodium = only(table, "sodium")
        assert sodium.tags_of(tag_food({"sodium": 50}, sodium)) == ["low_sodium"]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 5000, allow_nan=False), min_size=16, max_size=16),
           st.integers(0, 15), st.floats(0, 5000, allow_nan=False))
    def test_monotone(self, values, idx, bump):
        table = load_config().thresholds
        before = tag_food(np.array(values), table)
        raised = list(values)
        raised[idx] += bump
        after = tag_food(np.array(raised), table)
        assert not (before[2 * idx + 1] and not after[2 * idx + 1])
        assert not (after[2 * idx] and not before[2 * idx])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 5000, allow_nan=False), min_size=16, max_size=16))
    def test_never_both_directions(self, values):
        table = load_config().thresholds
        t = tag_food(np.array(values), table)
        assert not (t[0::2] & t[1::2]).any()


class TestTagUser:
    def test_blood_pressure_rule(self, table):
        rules = UserRuleTable((UserRule("high_blood_pressure", "low_sodium"),))
        assert table.tags_of(tag_user({"high_blood_pressure": True}, rules, table)) == ["low_sodium"]

    def test_default_rules_blood_pressure(self, config):
        flags = {f: False for f in config.rules.flags}
        flags["high_blood_pressure"] = True
        assert config.thresholds.tags_of(tag_user(flags, config.rules, config.thresholds)) == ["low_sodium"]

    def test_no_flags(self, config):
        flags = {f: False for f in config.rules.flags}
        assert not tag_user(flags, config.rules, config.thresholds).any()

    def test_conflict_dropped_with_warning(self, config):
        flags = {f: False for f in config.rules.flags}
        flags.update(overweight=True, underweight=True)
        with pytest.warns(TagConflictWarning, match="calories"):
            tags = config.thresholds.tags_of(tag_user(flags, config.rules, config.thresholds))
        assert "low_calories" not in tags and "high_calories" not in tags
        assert "high_protein" in tags

    def test_unknown_flag(self, config):
        with pytest.raises(ConfigError, match="flag"):
            tag_user({}, config.rules, config.thresholds)


class TestSigning:
    def vec(self, table, *tags):
        return table.vector(tags)

    def test_examples(self, table):
        user = self.vec(table, "low_sodium", "low_calories")
        assert sign_edge(user, self.vec(table, "low_sodium")) == 1
        assert match_counts(user, self.vec(table, "low_sodium", "high_calories")) == (1, 1)
        assert sign_edge(user, self.vec(table, "low_sodium", "high_calories")) == -1
        assert sign_edge(self.vec(table), self.vec(table)) == -1

    def test_length_mismatch(self, table):
        with pytest.raises(ValidationError):
            sign_edge(np.zeros(4, bool), np.zeros(6, bool))

    def test_matrix_matches_scalar(self, rng):
        u = rng.random((7, 32)) < 0.3
        f = rng.random((9, 32)) < 0.3
        u[:, 0::2] &= ~u[:, 1::2]
        f[:, 0::2] &= ~f[:, 1::2]
        m = sign_matrix(u, f)
        for i in range(7):
            for j in range(9):
                assert m[i, j] == sign_edge(u[i], f[j])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_nutrient_permutation_invariance(self, seed):
        r = np.random.default_rng(seed)
        choice = r.integers(0, 3, size=(2, 16))  # 0 none, 1 low, 2 high
        perm = r.permutation(16)

        def encode(c):
            v = np.zeros(32, bool)
            v[0::2] = c == 1
            v[1::2] = c == 2
            return v
        assert sign_edge(encode(choice[0]), encode(choice[1])) == \
            sign_edge(encode(choice[0][perm]), encode(choice[1][perm]))


class TestJaccard:
    def test_examples(self, table):
        a = table.vector(["low_sodium", "low_calories"])
        assert jaccard(a, a) == 1.0
        assert jaccard(table.vector(["low_sodium"]), table.vector(["high_protein"])) == 0.0
        assert jaccard(a, table.vector(["low_sodium"])) == 0.5
        assert jaccard(table.vector([]), table.vector([])) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), min_size=10, max_size=10), st.lists(st.booleans(), min_size=10, max_size=10))
    def test_properties(self, a, b):
        a, b = np.array(a), np.array(b)
        j = jaccard(a, b)
        assert j == jaccard(b, a)
        assert 0.0 <= j <= 1.0
        if a.any() or b.any():
            assert (j == 1.0) == bool((a == b).all())

    def test_matrix_matches_scalar(self, rng):
        u = rng.random((5, 12)) < 0.3
        f = rng.random((6, 12)) < 0.3
        m = jaccard_matrix(u, f)
        for i in range(5):
            for j in range(6):
                assert m[i, j] == jaccard(u[i], f[j])
