"""Flat key=value configuration parsing and typed application."""
from __future__ import annotations

import dataclasses

import pytest

from grlayout.runconfig import (
    apply_section, check_consumed, coerce, dataclass_flat, format_flat,
    load_kv_file, parse_kv_args, parse_kv_text,
)


@dataclasses.dataclass
class Knobs:
    steps: int = 10
    lr: float = 0.5
    name: str = "x"
    deep: bool = False
    cap: int | None = None


def test_parse_text_basics():
    text = "# comment\n\n a.b = 3 \nc.d=hello world\n"
    assert parse_kv_text(text) == {"a.b": "3", "c.d": "hello world"}


def test_parse_text_errors_carry_location():
    with pytest.raises(ValueError, match=r"cfg:2"):
        parse_kv_text("a=1\nnot a pair\n", source="cfg")
    with pytest.raises(ValueError, match=r"duplicate key 'a'"):
        parse_kv_text("a=1\na=2\n")
    with pytest.raises(ValueError, match="empty key"):
        parse_kv_text("=3\n")


def test_load_kv_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("train.steps=5\n# note\nmodel.d=32\n")
    assert load_kv_file(str(p)) == {"train.steps": "5", "model.d": "32"}
    with pytest.raises(ValueError, match=str(p)):
        p.write_text("oops\n")
        load_kv_file(str(p))


def test_parse_kv_args():
    assert parse_kv_args(["a.b=1", "c=x=y"]) == {"a.b": "1", "c": "x=y"}
    with pytest.raises(ValueError, match="expected key=value"):
        parse_kv_args(["novalue"])


def test_coerce_each_type():
    assert coerce("k", "7", "int") == 7
    assert coerce("k", "2.5", "float") == 2.5
    assert coerce("k", "3", "float") == 3.0
    assert coerce("k", "hi", "str") == "hi"
    for raw in ("true", "1", "YES", "on"):
        assert coerce("k", raw, "bool") is True
    for raw in ("false", "0", "No", "off"):
        assert coerce("k", raw, "bool") is False


def test_coerce_optional_and_errors():
    assert coerce("k", "none", "int | None") is None
    assert coerce("k", "", "int | None") is None
    assert coerce("k", "4", "int | None") == 4
    with pytest.raises(ValueError, match="expected an integer"):
        coerce("k", "4.5", "int")
    with pytest.raises(ValueError, match="expected a boolean"):
        coerce("k", "maybe", "bool")
    with pytest.raises(ValueError, match="expected a number"):
        coerce("k", "fast", "float")
    with pytest.raises(ValueError, match="unsupported"):
        coerce("k", "x", "list[int]")


def test_apply_section_sets_typed_fields():
    obj = Knobs()
    used: set[str] = set()
    flat = {"t.steps": "99", "t.lr": "0.01", "t.deep": "yes",
            "t.cap": "none", "other.x": "1"}
    apply_section(obj, "t", flat, used)
    assert obj == Knobs(steps=99, lr=0.01, deep=True, cap=None)
    assert used == {"t.steps", "t.lr", "t.deep", "t.cap"}


def test_apply_section_rejects_unknown_key_with_suggestions():
    obj = Knobs()
    with pytest.raises(ValueError) as exc:
        apply_section(obj, "t", {"t.stepz": "3"}, set())
    assert "t.stepz" in str(exc.value) and "t.steps" in str(exc.value)


def test_check_consumed():
    flat = {"a.x": "1", "b.y": "2"}
    check_consumed(flat, {"a.x", "b.y"})
    with pytest.raises(ValueError, match="b.y"):
        check_consumed(flat, {"a.x"})


def test_flat_round_trip():
    obj = Knobs(steps=3, lr=1.5, name="run", deep=True, cap=8)
    flat = dataclass_flat(obj, "t")
    text = format_flat(flat)
    assert text.splitlines() == sorted(text.splitlines())
    back = Knobs()
    used: set[str] = set()
    apply_section(back, "t", {k: str(v) for k, v in flat.items()}, used)
    check_consumed(flat, used)
    assert back == obj
